"""Split Gibbs sampler over a hypergraph partition.

One iteration updates, in order,

1. the image ``x`` by a proximal Langevin step whose drift collects the adjoint
   of every operator applied to the coupling gradients,
2. ``v_i = D_i x`` for every operator,
3. each splitting variable ``z_i`` by a proximal Langevin step,
4. each auxiliary variable ``u_i`` by an exact Gaussian draw.

The serial chain works on global vectors. The distributed chain runs one
worker per rank; workers exchange halo values of ``x`` before applying their
rows and adjoint partial sums after applying their transposed rows. Noise is
keyed by global indices, so both chains draw identical noise, and with the
same adjoint summation order they produce identical trajectories.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteState, ProtocolViolation, TransportFailure
from .kernels import (AxdaParams, Quadratic, Term, ZeroTerm, grad_phi, psgla_step,
                      psgla_z_step, sample_u)
from .linops import apply_adjoint, local_slice
from .rng import TAG_U, TAG_X, TAG_Z, NoiseSource
from .transport import (ADJOINT, CONTROL, GATHER, HALO, DirectSchedule, Endpoint, InProcHub,
                        TcpBackend)


@dataclass(eq=False)
class ProblemSpec:
    """A target ``exp(-f(x) - h(x) - sum_i g_i(D_i x))`` and its sampler settings.

    Attributes
    ----------
    operators : list of LinearOperator
        One per splitting term, all acting on the same vertex space.
    g : list of Term
        Nonsmooth term applied to each operator output.
    params : AxdaParams
    f : Term
        Nonsmooth term on ``x`` handled by its prox.
    h : Quadratic or None
        Smooth term on ``x`` handled by its gradient.
    x0 : ndarray, optional
        Initial image; zeros when omitted.
    """

    operators: list
    g: list
    params: AxdaParams
    f: Term = field(default_factory=ZeroTerm)
    h: Quadratic | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.operators) == len(self.g) == len(self.params.alpha)):
            raise ValueError("need one term and one tolerance per operator")
        n = {op.shape[1] for op in self.operators}
        if len(n) != 1:
            raise ValueError("operators act on different vertex spaces")

    @property
    def n_scalars(self) -> int:
        return self.operators[0].shape[1]


@dataclass(eq=False)
class ChainState:
    """Global (or per-worker local) state after ``t`` iterations."""

    t: int
    x: np.ndarray
    v: list
    z: list
    u: list

    def arrays(self) -> list[np.ndarray]:
        out = [self.x]
        for v, z, u in zip(self.v, self.z, self.u):
            out += [v, z, u]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate(self.arrays())

    def copy(self) -> ChainState:
        return ChainState(self.t, self.x.copy(), [a.copy() for a in self.v],
                          [a.copy() for a in self.z], [a.copy() for a in self.u])

    def equals(self, other: ChainState) -> bool:
        """Bitwise equality of every component."""
        return self.t == other.t and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays()))


WorkerState = ChainState


def initial_state(spec: ProblemSpec) -> ChainState:
    """``x0`` from the spec, ``v = z = D x0`` and ``u = 0``."""
    x = np.zeros(spec.n_scalars) if spec.x0 is None else np.array(spec.x0, dtype=np.float64).ravel()
    v = [op.apply(x) for op in spec.operators]
    return ChainState(0, x, v, [a.copy() for a in v], [np.zeros_like(a) for a in v])


def _check_finite(t: int, where: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteState(f"non-finite {where} at iteration {t}")


def potential(spec: ProblemSpec, x: np.ndarray, v=None, z=None, u=None,
              density: str = "target") -> float:
    """Negative log-density, ``+inf`` outside the support.

    ``density="target"`` evaluates ``f + h + sum g_i(D_i x)``;
    ``density="augmented"`` replaces ``g_i(D_i x)`` by ``g_i(z_i)`` plus both
    coupling penalties.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    total = spec.f.value(x)
    if spec.h is not None:
        total += spec.h.value(x)
    if v is None:
        v = [op.apply(x) for op in spec.operators]
    p = spec.params
    for i, g in enumerate(spec.g):
        if density == "target":
            total += g.value(v[i])
        elif density == "augmented":
            r = v[i] - z[i] + u[i]
            total += g.value(z[i]) + float(r @ r) / (2 * p.alpha[i] ** 2) \
                + float(u[i] @ u[i]) / (2 * p.beta[i] ** 2)
        else:
            raise ValueError(f"unknown density {density!r}")
        if math.isinf(total):
            return math.inf
    return float(total)


# ---------------------------------------------------------------------------
# distribution plan
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class WorkerPlan:
    """Everything worker ``rank`` needs, derived from the partitions of all operators.

    Halo strips of the different operators are fused: ``halo_union[k2]`` is
    the sorted union over operators of the scalars received from ``k2`` and
    ``send_union[k2]`` the owned scalars sent to ``k2``.
    """

    rank: int
    locals: list
    vertex_index: np.ndarray
    halo_union: dict
    halo_pos: list
    send_union: dict
    send_pos: dict
    send_pos_op: list
    f: Term
    h: Quadratic | None
    g: list

    @property
    def recv_from(self) -> list[int]:
        return sorted(self.halo_union)

    @property
    def send_to(self) -> list[int]:
        return sorted(self.send_union)


def make_plans(spec: ProblemSpec, partitions) -> list[WorkerPlan]:
    """Per-worker plans for operators distributed by ``partitions`` (one per operator)."""
    partitions = list(partitions)
    if len(partitions) != len(spec.operators):
        raise ValueError("need one partition per operator")
    K = partitions[0].n_workers
    for p in partitions[1:]:
        if p.n_workers != K or not np.array_equal(p.vertex_owner, partitions[0].vertex_owner):
            raise ValueError("all operators must share the vertex partition")
    locs = [[local_slice(op, p, k) for op, p in zip(spec.operators, partitions)] for k in range(K)]
    plans = []
    for k in range(K):
        vi = locs[k][0].vertex_index
        union = {}
        for loc in locs[k]:
            for k2, idx in loc.halo_index.items():
                union[k2] = idx if k2 not in union else np.union1d(union[k2], idx)
        halo_pos = [{k2: np.searchsorted(union[k2], idx) for k2, idx in loc.halo_index.items()}
                    for loc in locs[k]]
        g = [gi.restrict(loc.edge_index) for gi, loc in zip(spec.g, locs[k])]
        plans.append(WorkerPlan(k, locs[k], vi, union, halo_pos, {}, {}, [],
                                spec.f.restrict(vi), None if spec.h is None else spec.h.restrict(vi), g))
    for k, wp in enumerate(plans):
        for k2, other in enumerate(plans):
            if k in other.halo_union:
                wp.send_union[k2] = other.halo_union[k]
                wp.send_pos[k2] = _positions_in(wp.vertex_index, other.halo_union[k])
        wp.send_pos_op = [
            {k2: _positions_in(wp.vertex_index, plans[k2].locals[i].halo_index[k])
             for k2 in range(K) if k in plans[k2].locals[i].halo_index}
            for i in range(len(spec.operators))]
    return plans


def _positions_in(sorted_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_ids, ids)
    if np.any(pos >= sorted_ids.size) or not np.array_equal(sorted_ids[pos], ids):
        raise ValueError("requested scalars are not owned by this worker")
    return pos


def make_flows(plans: list[WorkerPlan]) -> dict:
    """Flow tables of the fused and per-operator exchanges."""
    halo = {(k2, wp.rank): int(idx.size) for wp in plans for k2, idx in wp.halo_union.items()}
    flows = {(HALO, 0): halo, (ADJOINT, 0): {(d, o): n for (o, d), n in halo.items()}}
    for i in range(len(plans[0].locals)):
        flows[(ADJOINT, i + 1)] = {(wp.rank, k2): int(idx.size) for wp in plans
                                   for k2, idx in wp.locals[i].halo_index.items()}
    return flows


def fuse_partials(wp: WorkerPlan, partials: list) -> dict:
    """Sum the per-operator adjoint partials bound for each neighbour (operator order)."""
    out = {k2: np.zeros(idx.size) for k2, idx in wp.halo_union.items()}
    for i, part in enumerate(partials):
        for k2, vals in part.items():
            out[k2][wp.halo_pos[i][k2]] += vals
    return out


def aggregate(wp: WorkerPlan, owns: list, incoming: dict) -> np.ndarray:
    """Adjoint drift of the owned scalars: local terms first, then neighbours by rank."""
    delta = np.zeros(wp.vertex_index.size)
    for own in owns:
        delta += own
    for k2 in sorted(incoming):
        delta[wp.send_pos[k2]] += incoming[k2]
    return delta


def aggregate_interleaved(wp: WorkerPlan, owns: list, incoming_by_op: list) -> np.ndarray:
    """Alternative summation order (per operator, local then neighbours).

    Mathematically equal to :func:`aggregate`; exists so that tests can check
    that the equivalence check detects a changed floating-point order.
    """
    delta = np.zeros(wp.vertex_index.size)
    for i, own in enumerate(owns):
        delta += own
        for k2 in sorted(incoming_by_op[i]):
            delta[wp.send_pos_op[i][k2]] += incoming_by_op[i][k2]
    return delta


class BlockwiseAdjoint:
    """``sum_i D_i^T d_i`` summed in the order a distributed run uses."""

    def __init__(self, plans: list[WorkerPlan], n_scalars: int):
        self.plans, self.n_scalars = plans, n_scalars

    def __call__(self, d: list) -> np.ndarray:
        owns, fused = [], []
        for wp in self.plans:
            res = [loc.adjoint(di[loc.edge_index]) for loc, di in zip(wp.locals, d)]
            owns.append([r[0] for r in res])
            fused.append(fuse_partials(wp, [r[1] for r in res]))
        delta = np.empty(self.n_scalars)
        for k, wp in enumerate(self.plans):
            incoming = {k2: fused[k2][k] for k2 in wp.send_to}
            delta[wp.vertex_index] = aggregate(wp, owns[k], incoming)
        return delta


def global_adjoint(operators):
    def adjoint(d: list) -> np.ndarray:
        delta = np.zeros(operators[0].shape[1])
        for op, di in zip(operators, d):
            delta += apply_adjoint(op, di)
        return delta
    return adjoint


# ---------------------------------------------------------------------------
# serial chain
# ---------------------------------------------------------------------------


def serial_step(spec: ProblemSpec, state: ChainState, noise: NoiseSource, adjoint) -> ChainState:
    """One full sweep on global vectors; ``adjoint`` maps coupling gradients to the drift."""
    p, t = spec.params, state.t
    d = [grad_phi(v, z, u, a) for v, z, u, a in zip(state.v, state.z, state.u, p.alpha)]
    _check_finite(t, "coupling gradient", *d)
    delta = adjoint(d)
    n = spec.n_scalars
    w = noise.normal(TAG_X, 0, np.arange(n), t)
    gh = None if spec.h is None else spec.h.grad(state.x)
    x = psgla_step(state.x, gh, delta, w, p.gamma, spec.f.prox)
    _check_finite(t, "image", x)
    v, z, u = [], [], []
    for i, op in enumerate(spec.operators):
        idx = np.arange(op.shape[0])
        vi = op.apply(x)
        zi = psgla_z_step(state.z[i], vi, state.u[i], p.alpha[i], p.eta[i],
                          noise.normal(TAG_Z, i, idx, t), spec.g[i].prox)
        ui = sample_u(vi, zi, p.alpha[i], p.beta[i], noise.normal(TAG_U, i, idx, t))
        _check_finite(t, f"splitting variables of operator {i}", zi, ui)
        v.append(vi)
        z.append(zi)
        u.append(ui)
    return ChainState(t + 1, x, v, z, u)


def run_serial(spec: ProblemSpec, n_iter: int, seed: int, observer=None, partitions=None,
               noise: NoiseSource | None = None, start: ChainState | None = None):
    """Yield the chain states ``t = start.t, ..., n_iter`` on one process.

    Parameters
    ----------
    partitions : list of HypergraphPartition, optional
        When given, the adjoint drift is summed blockwise in the order a
        distributed run over these partitions uses, which makes the two
        chains bitwise identical. Without it the global transpose is used,
        which coincides with a single-worker run.
    observer : callable, optional
        Called with each state as it is produced.
    """
    noise = noise if noise is not None else NoiseSource(seed)
    if partitions is not None:
        adjoint = BlockwiseAdjoint(make_plans(spec, partitions), spec.n_scalars)
    else:
        adjoint = global_adjoint(spec.operators)
    state = start.copy() if start is not None else initial_state(spec)
    if observer:
        observer(state)
    yield state
    while state.t < n_iter:
        state = serial_step(spec, state, noise, adjoint)
        if observer:
            observer(state)
        yield state


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"DSPK"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sHQIIIQ")


def save_snapshot(path, state: ChainState, n_workers: int = 1, rank: int = 0) -> None:
    """Write ``state`` as a header followed by little-endian float64 arrays."""
    arrays = state.arrays()
    sizes = np.array([a.size for a in arrays], dtype="<u8")
    payload = np.concatenate(arrays).astype("<f8")
    header = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, state.t, n_workers, rank,
                               len(state.v), payload.size)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(sizes.tobytes())
        fh.write(payload.tobytes())
    tmp.replace(path)


def load_snapshot(path) -> tuple[ChainState, int, int]:
    """Read a snapshot; returns ``(state, n_workers, rank)``."""
    raw = Path(path).read_bytes()
    magic, version, t, K, k, n_ops, n_values = _SNAP_HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
        raise ValueError(f"{path} is not a snapshot")
    off = _SNAP_HEADER.size
    sizes = np.frombuffer(raw, dtype="<u8", count=1 + 3 * n_ops, offset=off).astype(np.int64)
    off += sizes.size * 8
    payload = np.frombuffer(raw, dtype="<f8", count=n_values, offset=off).astype(np.float64)
    parts = np.split(payload, np.cumsum(sizes)[:-1])
    state = ChainState(int(t), parts[0], parts[1::3], parts[2::3], parts[3::3])
    return state, int(K), int(k)


def snapshot_path(directory, t: int, rank: int) -> Path:
    return Path(directory) / f"snapshot_t{t:08d}_rank{rank}.bin"


# ---------------------------------------------------------------------------
# distributed chain
# ---------------------------------------------------------------------------


class Gatherer:
    """Assembles global states on rank 0 from per-worker states.

    Ranks other than 0 send their state as one control frame per iteration.
    """

    def __init__(self, spec: ProblemSpec, plans: list[WorkerPlan], endpoint: Endpoint, observer):
        self.spec, self.plans, self.endpoint, self.observer = spec, plans, endpoint, observer
        self.last: ChainState | None = None

    def post(self, local: ChainState) -> None:
        ep = self.endpoint
        if ep.rank != 0:
            ep.send(0, CONTROL, GATHER, local.t, local.flat())
            return
        n_ops = len(self.spec.operators)
        glob = ChainState(local.t, np.empty(self.spec.n_scalars),
                          [np.empty(op.shape[0]) for op in self.spec.operators],
                          [np.empty(op.shape[0]) for op in self.spec.operators],
                          [np.empty(op.shape[0]) for op in self.spec.operators])
        for wp in self.plans:
            if wp.rank == 0:
                part = local
            else:
                flat = ep.recv(wp.rank, CONTROL, GATHER, local.t)
                sizes = [wp.vertex_index.size]
                for loc in wp.locals:
                    sizes += [loc.edge_index.size] * 3
                if flat.size != sum(sizes):
                    raise ProtocolViolation(f"gathered state of rank {wp.rank} has the wrong size")
                arrs = np.split(flat, np.cumsum(sizes)[:-1])
                part = ChainState(local.t, arrs[0], arrs[1::3], arrs[2::3], arrs[3::3])
            glob.x[wp.vertex_index] = part.x
            for i in range(n_ops):
                ei = wp.locals[i].edge_index
                glob.v[i][ei] = part.v[i]
                glob.z[i][ei] = part.z[i]
                glob.u[i][ei] = part.u[i]
        self.last = glob
        if self.observer:
            self.observer(glob)


def _split_halo(wp: WorkerPlan, i: int, received: dict) -> dict:
    return {k2: received[k2][pos] for k2, pos in wp.halo_pos[i].items()}


def worker_loop(spec: ProblemSpec, plans: list[WorkerPlan], rank: int, endpoint: Endpoint,
                n_iter: int, noise: NoiseSource, gatherer: Gatherer | None = None,
                start: ChainState | None = None, aggregation: str = "fused",
                checkpoint_dir=None, checkpoint_every: int = 0, on_step=None) -> ChainState:
    """Run worker ``rank`` until iteration ``n_iter``; returns its final local state.

    ``on_step`` is called with the new iteration count after every sweep.
    """
    wp = plans[rank]
    p = spec.params
    K = len(plans)
    if start is None:
        x = np.array(spec.x0, dtype=np.float64).ravel()[wp.vertex_index] if spec.x0 is not None \
            else np.zeros(wp.vertex_index.size)
        recv = endpoint.halo_exchange(0, 0, {k2: x[pos] for k2, pos in wp.send_pos.items()})
        v = [loc.apply(x, _split_halo(wp, i, recv)) for i, loc in enumerate(wp.locals)]
        state = ChainState(0, x, v, [a.copy() for a in v], [np.zeros_like(a) for a in v])
    else:
        state = start.copy()
    if gatherer:
        gatherer.post(state)
    while state.t < n_iter:
        t = state.t
        d = [grad_phi(v, z, u, a) for v, z, u, a in zip(state.v, state.z, state.u, p.alpha)]
        _check_finite(t, "coupling gradient", *d)
        res = [loc.adjoint(di) for loc, di in zip(wp.locals, d)]
        owns = [r[0] for r in res]
        if aggregation == "fused":
            incoming = endpoint.adjoint_exchange(t, 0, fuse_partials(wp, [r[1] for r in res]))
            delta = aggregate(wp, owns, incoming)
        elif aggregation == "interleaved":
            incoming = [endpoint.adjoint_exchange(t, i + 1, r[1]) for i, r in enumerate(res)]
            delta = aggregate_interleaved(wp, owns, incoming)
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        w = noise.normal(TAG_X, 0, wp.vertex_index, t)
        gh = None if wp.h is None else wp.h.grad(state.x)
        x = psgla_step(state.x, gh, delta, w, p.gamma, wp.f.prox)
        _check_finite(t, "image", x)
        recv = endpoint.halo_exchange(t + 1, 0, {k2: x[pos] for k2, pos in wp.send_pos.items()})
        v, z, u = [], [], []
        for i, loc in enumerate(wp.locals):
            vi = loc.apply(x, _split_halo(wp, i, recv))
            zi = psgla_z_step(state.z[i], vi, state.u[i], p.alpha[i], p.eta[i],
                              noise.normal(TAG_Z, i, loc.edge_index, t), wp.g[i].prox)
            ui = sample_u(vi, zi, p.alpha[i], p.beta[i], noise.normal(TAG_U, i, loc.edge_index, t))
            _check_finite(t, f"splitting variables of operator {i}", zi, ui)
            v.append(vi)
            z.append(zi)
            u.append(ui)
        state = ChainState(t + 1, x, v, z, u)
        if gatherer:
            gatherer.post(state)
        if on_step:
            on_step(state.t)
        if checkpoint_dir is not None and checkpoint_every and state.t % checkpoint_every == 0:
            save_snapshot(snapshot_path(checkpoint_dir, state.t, rank), state, K, rank)
    return state


def run_distributed(spec: ProblemSpec, partitions, n_iter: int, seed: int, *,
                    transport: str = "inproc", schedule=None, observer=None,
                    gather: bool = True, aggregation: str = "fused",
                    addresses=None, ranks=None, start=None, checkpoint_dir=None,
                    checkpoint_every: int = 0, timeout: float = 30.0, delay=None,
                    config_hash: str = "0" * 16, on_step=None,
                    noise: NoiseSource | None = None) -> ChainState | None:
    """Run the distributed chain with one worker per partition block.

    Parameters
    ----------
    transport : {"inproc", "tcp"}
        ``inproc`` runs every rank as a thread of this process. ``tcp`` runs
        the ranks listed in ``ranks`` (all by default) over sockets bound to
        ``addresses``; other ranks are expected in other processes.
    schedule : DirectSchedule or GridSchedule, optional
    observer : callable, optional
        Called on rank 0 with every gathered global state.
    start : list of ChainState, optional
        Per-rank local states to resume from (see :func:`load_snapshot`).
    on_step : callable, optional
        Called by rank 0 with the iteration count after each of its sweeps.
    noise : NoiseSource, optional
        Replaces the seeded source, e.g. by :class:`ZeroNoise`.

    Returns
    -------
    ChainState or None
        The last gathered global state when rank 0 runs here and ``gather`` is set.
    """
    plans = make_plans(spec, partitions)
    flows = make_flows(plans)
    K = len(plans)
    schedule = schedule or DirectSchedule()
    ranks = list(range(K)) if ranks is None else list(ranks)
    noise = noise if noise is not None else NoiseSource(seed)
    if transport == "inproc":
        hub = InProcHub(K, delay=delay)
        backends = {k: hub.backend(k) for k in ranks}
    elif transport == "tcp":
        if addresses is None:
            raise ValueError("tcp transport needs one address per rank")
        backends = {k: TcpBackend(k, addresses, timeout=timeout) for k in ranks}
    else:
        raise ValueError(f"unknown transport {transport!r}")
    endpoints = {k: Endpoint(k, K, backends[k], flows, schedule, timeout) for k in ranks}
    gatherers = {k: Gatherer(spec, plans, endpoints[k], observer) if gather else None for k in ranks}
    errors: dict[int, BaseException] = {}

    def target(k):
        try:
            endpoints[k].rollcall(config_hash)
            worker_loop(spec, plans, k, endpoints[k], n_iter, noise, gatherers[k],
                        None if start is None else start[k], aggregation,
                        checkpoint_dir, checkpoint_every, on_step if k == 0 else None)
            endpoints[k].barrier(n_iter)
        except BaseException as exc:
            errors[k] = exc
            for ep in endpoints.values():
                if transport == "inproc":
                    ep.backend.abort(exc)
                else:
                    ep.backend.mailbox.fail(exc)

    try:
        if len(ranks) == 1:
            target(ranks[0])
        else:
            threads = [threading.Thread(target=target, args=(k,), name=f"worker-{k}") for k in ranks]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
    finally:
        for ep in endpoints.values():
            ep.close()
    if errors:
        root = [e for e in errors.values() if not isinstance(e, TransportFailure)]
        raise (root or list(errors.values()))[0]
    return gatherers[0].last if 0 in gatherers and gatherers[0] is not None else None
