"""End-to-end experiment steps behind the command-line interface."""

from __future__ import annotations

import csv
import json
import logging
import socket
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_grid
from .deconv import DeconvSpec, build_problem, generate_observations
from .errors import ConfigError, EmptyBuffer
from .io import load_truth, read_f64, write_f64, write_pgm16
from .sampler import (ChainState, load_snapshot, potential, run_distributed, run_serial,
                      save_snapshot, snapshot_path)
from .stats import ChainSummary, metrics, write_metrics
from .transport import DirectSchedule, GridSchedule

log = logging.getLogger(__name__)


def deconv_spec(cfg: ExperimentConfig, height: int, width: int, grid=None) -> DeconvSpec:
    m = cfg.model
    return DeconvSpec(height, width, cfg.kernel(), kappa=m.kappa,
                      alpha_sq=(m.alpha1_sq, m.alpha2_sq), beta_sq=(m.beta1_sq, m.beta2_sq),
                      grid=grid or cfg.grid, gamma_factor=m.gamma_factor,
                      eta_factor=m.eta_factor, init=m.init)


def gen_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Write the scaled ground truth and Poisson observations to the output directory."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    truth = load_truth(cfg.data.truth, cfg.data.size)
    scaled, counts = generate_observations(truth, cfg.kernel(), cfg.data.xmax, cfg.data.seed)
    h = cfg.hash()
    write_f64(out / "truth.f64", scaled, config_hash=h)
    write_f64(out / "y.f64", counts, config_hash=h)
    write_pgm16(out / "truth.pgm", scaled)
    write_pgm16(out / "y.pgm", counts)
    return scaled, counts


def _schedule(cfg: ExperimentConfig, grid):
    return GridSchedule(*grid) if cfg.workers.schedule == "grid" else DirectSchedule()


def _addresses(cfg: ExperimentConfig, n: int):
    hosts = [h for h in cfg.workers.hosts.split(",") if h.strip()]
    if len(hosts) != n:
        raise ConfigError(f"tcp transport needs {n} hosts, got {len(hosts)}")
    return hosts


def free_addresses(n: int) -> list[str]:
    """Loopback addresses on ports that are free right now."""
    socks, out = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        out.append(f"127.0.0.1:{s.getsockname()[1]}")
    for s in socks:
        s.close()
    return out


@dataclass
class RunResult:
    summary: ChainSummary
    metrics: dict
    potentials: list
    final: ChainState | None


def run_experiment(cfg: ExperimentConfig, rank: int | None = None) -> RunResult | None:
    """Sample the posterior for the observations in the output directory.

    With the tcp transport and ``rank`` set, only that rank runs here; rank 0
    gathers states and writes every output. Returns ``None`` on other ranks.
    """
    out = cfg.out_dir
    s = cfg.sampler
    if s.iterations <= s.burn_in:
        raise EmptyBuffer(f"iterations ({s.iterations}) must exceed burn_in ({s.burn_in}) "
                          "to keep any sample")
    y = read_f64(out / "y.f64")
    truth = read_f64(out / "truth.f64")
    height, width = y.shape
    grid = cfg.grid
    ds = deconv_spec(cfg, height, width, grid)
    spec, parts = build_problem(ds, y)
    K = ds.n_workers
    h = cfg.hash()
    summary = ChainSummary((height, width), s.iterations, s.burn_in, s.thinning)
    potentials: dict[int, float] = {}
    times: list[float] = []
    resume = s.resume_from
    ckpt_dir = out / "checkpoints"
    if s.checkpoint_every:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        with np.load(ckpt_dir / f"summary_t{resume:08d}.npz") as z:
            summary.load_state_dict({k: z[k] for k in z.files})
            potentials.update(zip(z["trace_t"].tolist(), z["trace_potential"].tolist()))
            times.extend(z["times"].tolist())
    clock = [time.perf_counter()]
    transport = cfg.workers.transport

    def observe(state: ChainState) -> None:
        if state.t <= resume:
            return
        now = time.perf_counter()
        times.append(now - clock[0])
        clock[0] = now
        pot = potential(spec, state.x, state.v, state.z, state.u, s.map_density)
        potentials[state.t] = pot
        summary.update(state.t, state.x.reshape(height, width), pot)
        if s.checkpoint_every and state.t % s.checkpoint_every == 0:
            if transport == "serial":
                save_snapshot(snapshot_path(ckpt_dir, state.t, 0), state, 1, 0)
            ts = np.array(sorted(potentials))
            np.savez(ckpt_dir / f"summary_t{state.t:08d}.npz", **summary.state_dict(),
                     trace_t=ts, trace_potential=np.array([potentials[t] for t in ts]),
                     times=np.array(times))

    t_start = time.perf_counter()
    final = None
    if transport == "serial":
        start = load_snapshot(snapshot_path(ckpt_dir, resume, 0))[0] if resume else None
        for state in run_serial(spec, s.iterations, s.seed, observer=observe,
                                partitions=parts if K > 1 else None, start=start):
            final = state
    else:
        ranks = None if rank is None else [rank]
        start = None
        if resume:
            start = {k: load_snapshot(snapshot_path(ckpt_dir, resume, k))[0]
                     for k in (range(K) if ranks is None else ranks)}
        addresses = _addresses(cfg, K) if transport == "tcp" else None
        final = run_distributed(
            spec, parts, s.iterations, s.seed, transport=transport,
            schedule=_schedule(cfg, grid), observer=observe, addresses=addresses,
            ranks=ranks, start=start, checkpoint_dir=ckpt_dir if s.checkpoint_every else None,
            checkpoint_every=s.checkpoint_every, timeout=cfg.workers.timeout, config_hash=h)
        if rank not in (None, 0):
            return None
    runtime = time.perf_counter() - t_start

    lo, hi = summary.credible_interval(0.95)
    mmse = summary.mean
    map_x = summary.map if summary.map is not None else mmse
    write_f64(out / "mmse.f64", mmse, config_hash=h)
    write_f64(out / "map.f64", map_x, config_hash=h, map_iteration=summary.map_t)
    write_f64(out / "ci_low.f64", lo, config_hash=h, probability=0.025)
    write_f64(out / "ci_high.f64", hi, config_hash=h, probability=0.975)
    write_pgm16(out / "mmse.pgm", mmse)
    write_pgm16(out / "map.pgm", map_x)
    write_pgm16(out / "ci_width.pgm", hi - lo)
    post_times = times[-(s.iterations - s.burn_in):] if times else []
    values = metrics(truth, mmse, map_x, post_times or times, runtime)
    write_metrics(out / "metrics.json", values,
                  {"config_hash": h, "workers": K, "transport": transport,
                   "iterations": s.iterations, "burn_in": s.burn_in,
                   "mean_ci_width": float(np.mean(hi - lo))})
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "potential"])
        for t in sorted(potentials):
            w.writerow([t, repr(potentials[t])])
    return RunResult(summary, values, [potentials[t] for t in sorted(potentials)], final)


@dataclass
class OracleReport:
    grid: tuple
    transport: str
    passed: bool
    first_divergence: tuple | None
    plain_serial_identical: bool

    def line(self) -> str:
        g = f"{self.grid[0]}x{self.grid[1]}"
        if self.passed:
            return f"PASS grid={g} transport={self.transport}"
        t, variable, index = self.first_divergence
        return (f"FAIL grid={g} transport={self.transport} first divergent iteration t={t} "
                f"variable={variable} index={index}")


def _state_fields(state: ChainState):
    yield "x", state.x
    for i in range(len(state.v)):
        yield f"v{i + 1}", state.v[i]
        yield f"z{i + 1}", state.z[i]
        yield f"u{i + 1}", state.u[i]


def _first_divergence(ref: list, got: list) -> tuple | None:
    """``(t, variable, index)`` of the first update whose output differs, else ``None``.

    ``t`` counts iterations from 0, so a difference in the state after the
    first sweep is reported at ``t = 0``.
    """
    for a, b in zip(ref, got):
        for (name, va), (_, vb) in zip(_state_fields(a), _state_fields(b)):
            if va.shape != vb.shape:
                return max(a.t - 1, 0), name, -1
            diff = np.flatnonzero(va.view(np.uint64) != vb.view(np.uint64))
            if diff.size:
                return max(a.t - 1, 0), name, int(diff[0])
    if len(ref) != len(got):
        return min(len(ref), len(got)) - 1, "t", -1
    return None


def oracle_check(cfg: ExperimentConfig, aggregation: str = "fused") -> list[OracleReport]:
    """Compare distributed trajectories against the serial chain, bit for bit.

    Uses the observations in the output directory when present, otherwise a
    synthetic problem of ``[oracle] size``.
    """
    o = cfg.oracle
    y_path = cfg.out_dir / "y.f64"
    if y_path.exists():
        y = read_f64(y_path)
    else:
        truth = load_truth(cfg.data.truth, o.size)
        y = generate_observations(truth, cfg.kernel(), cfg.data.xmax, cfg.data.seed)[1]
    reports = []
    for grid_text in o.grids.split(","):
        grid = parse_grid(grid_text)
        ds = deconv_spec(cfg, y.shape[0], y.shape[1], grid)
        spec, parts = build_problem(ds, y)
        ref = list(run_serial(spec, o.iterations, cfg.sampler.seed, partitions=parts))
        plain = list(run_serial(spec, o.iterations, cfg.sampler.seed))
        for transport in [t.strip() for t in o.transports.split(",") if t.strip()]:
            got: list = []
            addresses = free_addresses(ds.n_workers) if transport == "tcp" else None
            run_distributed(spec, parts, o.iterations, cfg.sampler.seed, transport=transport,
                            schedule=_schedule(cfg, grid), observer=got.append,
                            aggregation=aggregation, addresses=addresses,
                            timeout=cfg.workers.timeout, config_hash=cfg.hash())
            div = _first_divergence(ref, got)
            reports.append(OracleReport(grid, transport, div is None, div,
                                        _first_divergence(plain, got) is None))
    return reports


def _bench_observations(cfg: ExperimentConfig) -> np.ndarray:
    y_path = cfg.out_dir / "y.f64"
    if y_path.exists():
        return read_f64(y_path)
    truth = load_truth(cfg.data.truth, cfg.data.size)
    return generate_observations(truth, cfg.kernel(), cfg.data.xmax, cfg.data.seed)[1]


def time_iterations(cfg: ExperimentConfig, y: np.ndarray, grid, n_iter: int) -> np.ndarray:
    """Wall times between consecutive sweeps of an ``n_iter`` chain on ``grid``.

    Serial when the grid has one tile, in-process workers otherwise.
    """
    ds = deconv_spec(cfg, y.shape[0], y.shape[1], grid)
    spec, parts = build_problem(ds, y)
    stamps = [time.perf_counter()]
    if ds.n_workers == 1:
        for _state in run_serial(spec, n_iter, cfg.sampler.seed):
            stamps.append(time.perf_counter())
        stamps = stamps[1:]
    else:
        # setup and the initial halo exchange are not part of a sweep
        stamps = []
        run_distributed(spec, parts, n_iter, cfg.sampler.seed, transport="inproc",
                        schedule=_schedule(cfg, grid), gather=False,
                        on_step=lambda t: stamps.append(time.perf_counter()))
    return np.diff(stamps)


def bench(cfg: ExperimentConfig, path=None) -> list[dict]:
    """Per-iteration timings for each worker grid, relative to the first grid; writes a CSV."""
    b = cfg.bench
    y = _bench_observations(cfg)
    rows = []
    base = None
    for grid_text in b.grids.split(","):
        grid = parse_grid(grid_text)
        times = np.concatenate([time_iterations(cfg, y, grid, b.iterations)
                                for _ in range(b.repeats)])
        mean, std = float(times.mean()), float(times.std())
        base = mean if base is None else base
        K = grid[0] * grid[1]
        rows.append({"grid": f"{grid[0]}x{grid[1]}", "K": K, "iterations": b.iterations,
                     "time_per_iter_mean": mean, "time_per_iter_std": std,
                     "speedup": base / mean, "efficiency": base / mean / K})
    path = Path(path) if path else cfg.out_dir / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
