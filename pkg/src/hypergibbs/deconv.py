"""Poisson deconvolution with a total-variation prior and a nonnegativity constraint.

Two splitting terms act on the image: a blur ``D1`` feeding a Poisson
likelihood and forward differences ``D2`` feeding an isotropic TV penalty.
The image itself is constrained to be nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TileTooSmall
from .hypergraph import build_partition, grid_partition_2d
from .kernels import AxdaParams, GroupL21, NonNegative, PoissonLikelihood
from .linops import Conv2DOperator, Grad2DOperator, apply_adjoint, operator_norm_sq
from .rng import NoiseSource
from .sampler import ProblemSpec


def gaussian_kernel(size: int, sigma: float | None = None) -> np.ndarray:
    """Normalised ``size x size`` Gaussian kernel; ``sigma`` defaults to ``size / 6``."""
    if size % 2 == 0 or size < 1:
        raise ValueError("kernel size must be a positive odd integer")
    sigma = size / 6.0 if sigma is None else sigma
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


@dataclass
class DeconvSpec:
    """Settings of one deconvolution experiment.

    Attributes
    ----------
    height, width : int
        Image size.
    kernel : ndarray
        Odd-sized blur kernel.
    kappa : float
        Weight of the TV penalty.
    alpha_sq, beta_sq : tuple of float
        Squared coupling and auxiliary tolerances for (blur, differences).
    grid : tuple of int
        Worker grid ``(rows, cols)``.
    gamma_factor, eta_factor : float
        Fraction of the step-size bounds actually used.
    init : {"backprojection", "zero"}
        Initial image: the observations pushed through the blur adjoint and
        clipped at zero, or zeros.
    """

    height: int
    width: int
    kernel: np.ndarray
    kappa: float = 1.0
    alpha_sq: tuple = (1.0, 1.0)
    beta_sq: tuple = (1.0, 1.0)
    grid: tuple = (1, 1)
    gamma_factor: float = 0.99
    eta_factor: float = 0.99
    init: str = "backprojection"

    @property
    def n_workers(self) -> int:
        return self.grid[0] * self.grid[1]


def make_operators(ds: DeconvSpec) -> tuple[Conv2DOperator, Grad2DOperator]:
    return Conv2DOperator(ds.height, ds.width, ds.kernel), Grad2DOperator(ds.height, ds.width)


def step_bounds(ds: DeconvSpec, operators=None) -> tuple[float, tuple]:
    """Largest admissible image step and splitting steps.

    Returns ``(gamma_max, (eta1_max, eta2_max))``; admissible values are
    strictly below these.
    """
    ops = operators or make_operators(ds)
    norms = [operator_norm_sq(op) for op in ops]
    gamma_max = 1.0 / sum(n / a for n, a in zip(norms, ds.alpha_sq))
    return gamma_max, tuple(ds.alpha_sq)


def check_tiles(ds: DeconvSpec) -> None:
    """Each tile must cover the halo each neighbour needs from it."""
    rows, cols = ds.grid
    h1, h2 = ds.kernel.shape[0] // 2, ds.kernel.shape[1] // 2
    need_r, need_c = max(h1, 1), max(h2, 1)
    tile_r = ds.height // rows
    tile_c = ds.width // cols
    if rows > 1 and tile_r < need_r:
        raise TileTooSmall(f"tiles have {tile_r} rows but the halo is {need_r} rows deep")
    if cols > 1 and tile_c < need_c:
        raise TileTooSmall(f"tiles have {tile_c} columns but the halo is {need_c} columns wide")


def build_problem(ds: DeconvSpec, observations: np.ndarray):
    """Sampler problem and per-operator partitions for observed counts.

    Returns
    -------
    spec : ProblemSpec
    partitions : list of HypergraphPartition
        Grid partitions of the blur and the differences, sharing the pixel owners.
    """
    check_tiles(ds)
    y = np.asarray(observations, dtype=np.float64).ravel()
    if y.size != ds.height * ds.width:
        raise ValueError(f"observations have {y.size} values, expected {ds.height * ds.width}")
    blur, grad = make_operators(ds)
    gamma_max, eta_max = step_bounds(ds, (blur, grad))
    alpha = tuple(float(np.sqrt(a)) for a in ds.alpha_sq)
    beta = tuple(float(np.sqrt(b)) for b in ds.beta_sq)
    params = AxdaParams(alpha, beta, tuple(ds.eta_factor * e for e in eta_max),
                        ds.gamma_factor * gamma_max)
    if ds.init == "backprojection":
        x0 = np.maximum(apply_adjoint(blur, y), 0.0)
    elif ds.init == "zero":
        x0 = np.zeros(y.size)
    else:
        raise ValueError(f"unknown init {ds.init!r}")
    spec = ProblemSpec([blur, grad], [PoissonLikelihood(y), GroupL21(ds.kappa)], params,
                       f=NonNegative(), x0=x0)
    owner = grid_partition_2d(ds.height, ds.width, *ds.grid)
    parts = [build_partition(op.structure, ds.n_workers, owner, owner) for op in (blur, grad)]
    for key, verts in parts[1].halo_vertices.items():
        outer = parts[0].halo_vertices.get(key, np.zeros(0, np.int64))
        if not np.all(np.isin(verts, outer)):
            raise AssertionError("difference halo is not contained in the blur halo")
    return spec, parts


def generate_observations(truth: np.ndarray, kernel: np.ndarray, xmax: float, seed: int):
    """Scale ``truth`` to peak ``xmax``, blur it and draw Poisson counts.

    Returns ``(scaled_truth, counts)`` as 2-D arrays.
    """
    truth = np.asarray(truth, dtype=np.float64)
    peak = truth.max()
    # divide first so that the peak pixel maps to exactly xmax
    scaled = truth / peak * xmax if peak > 0 else np.zeros_like(truth)
    blur = Conv2DOperator(truth.shape[0], truth.shape[1], kernel)
    mean = np.maximum(blur.apply(scaled.ravel()), 0.0)
    counts = NoiseSource(seed).poisson(mean)
    return scaled, counts.reshape(truth.shape)
