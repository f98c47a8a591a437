"""Posterior summaries and image-quality metrics."""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyBuffer

SNR_CAP_DB = 300.0


class ChainSummary:
    """Running summaries of post-burn-in samples.

    Keeps the running mean (MMSE estimate), the sample with the lowest
    potential (MAP estimate, replaced only on strict improvement) and a
    thinned buffer of samples for pixelwise quantiles.

    Parameters
    ----------
    shape : tuple
        Shape of one sample.
    n_iter, burn_in : int
        Samples ``t = burn_in + 1, ..., n_iter`` are summarised.
    thinning : int
        Every ``thinning``-th summarised sample goes to the buffer, starting
        with the first, so the buffer holds ``ceil((n_iter - burn_in) / thinning)``.
    keep_buffer : bool
        Disable to skip the quantile buffer.
    """

    def __init__(self, shape, n_iter: int, burn_in: int, thinning: int = 3,
                 keep_buffer: bool = True):
        if thinning < 1 or burn_in < 0 or n_iter < burn_in:
            raise ValueError("need thinning >= 1 and 0 <= burn_in <= n_iter")
        self.shape = tuple(shape)
        self.n_iter, self.burn_in, self.thinning = n_iter, burn_in, thinning
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.map = None
        self.map_potential = math.inf
        self.map_t = -1
        n_buf = -(-(n_iter - burn_in) // thinning) if keep_buffer else 0
        self.buffer = np.empty((n_buf,) + self.shape) if keep_buffer else None
        self.n_buffered = 0

    def update(self, t: int, x: np.ndarray, potential: float) -> None:
        if t <= self.burn_in or t > self.n_iter:
            return
        x = np.asarray(x, dtype=np.float64).reshape(self.shape)
        self.count += 1
        self.mean += (x - self.mean) / self.count
        if potential < self.map_potential:
            self.map_potential = float(potential)
            self.map = x.copy()
            self.map_t = t
        if self.buffer is not None and (t - self.burn_in - 1) % self.thinning == 0:
            self.buffer[self.n_buffered] = x
            self.n_buffered += 1

    @property
    def samples(self) -> np.ndarray:
        if self.buffer is None:
            return np.empty((0,) + self.shape)
        return self.buffer[:self.n_buffered]

    def credible_interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        lo = (1.0 - level) / 2.0
        return quantile(self.samples, lo), quantile(self.samples, 1.0 - lo)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.copy(),
                "map": self.map if self.map is not None else np.empty(0),
                "map_potential": self.map_potential, "map_t": self.map_t,
                "buffer": self.samples.copy(), "n_iter": self.n_iter,
                "burn_in": self.burn_in, "thinning": self.thinning}

    def load_state_dict(self, state: dict) -> None:
        self.count = int(state["count"])
        self.mean = np.array(state["mean"], dtype=np.float64).reshape(self.shape)
        m = np.asarray(state["map"])
        self.map = None if m.size == 0 else m.reshape(self.shape).copy()
        self.map_potential = float(state["map_potential"])
        self.map_t = int(state["map_t"])
        buf = np.asarray(state["buffer"])
        self.n_buffered = buf.shape[0]
        if self.buffer is not None:
            self.buffer[:self.n_buffered] = buf


def quantile(samples: np.ndarray, p: float) -> np.ndarray:
    """Nearest-rank quantile along the first axis.

    The ``ceil(p * n)``-th smallest of ``n`` values (1-based, at least the first).
    """
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n == 0:
        raise EmptyBuffer("no samples were kept after burn-in")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rank = max(1, math.ceil(round(p * n, 9)))
    return np.partition(samples, rank - 1, axis=0)[rank - 1]


def snr(truth: np.ndarray, estimate: np.ndarray) -> float:
    """``10 log10(||truth||^2 / ||truth - estimate||^2)`` in dB, capped at 300."""
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise DimensionMismatch(f"truth {truth.shape} and estimate {estimate.shape} differ in shape")
    err = float(np.sum((truth - estimate) ** 2))
    sig = float(np.sum(truth ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    if sig == 0.0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(sig / err))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully contained Gaussian windows.

    Local statistics use an ``window x window`` Gaussian weighting with
    ``sigma``; stabilisers are ``(0.01 R)^2`` and ``(0.03 R)^2`` with ``R``
    the data range (that of ``a`` when omitted).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatch(f"ssim needs two 2-D images of one shape, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"images must be at least {window} pixels on each side")
    R = float(a.max() - a.min()) if data_range is None else float(data_range)
    c1, c2 = (0.01 * R) ** 2, (0.03 * R) ** 2
    w = _gaussian_window(window, sigma)
    h = window // 2

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")[h:-h, h:-h]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


METRIC_KEYS = ("snr_mmse", "snr_map", "ssim_mmse", "ssim_map",
               "time_per_iter_mean_s", "time_per_iter_std_s", "runtime_s")


def metrics(truth, mmse, map_estimate, iteration_times, runtime_s: float,
            data_range: float | None = None) -> dict:
    """Quality and timing figures of one run."""
    truth = np.asarray(truth, dtype=np.float64)
    times = np.asarray(iteration_times, dtype=np.float64)
    return {
        "snr_mmse": snr(truth, np.reshape(mmse, truth.shape)),
        "snr_map": snr(truth, np.reshape(map_estimate, truth.shape)),
        "ssim_mmse": ssim(truth, np.reshape(mmse, truth.shape), data_range),
        "ssim_map": ssim(truth, np.reshape(map_estimate, truth.shape), data_range),
        "time_per_iter_mean_s": float(times.mean()) if times.size else 0.0,
        "time_per_iter_std_s": float(times.std()) if times.size else 0.0,
        "runtime_s": float(runtime_s),
    }


def write_metrics(path, values: dict, extra: dict | None = None) -> None:
    doc = {k: values[k] for k in METRIC_KEYS}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
