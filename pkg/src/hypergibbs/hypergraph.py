"""Hypergraph view of a block-sparse operator and its distribution over workers.

An operator ``D`` with block rows ``m`` (hyperedges) and block columns ``n``
(vertices) is described by the set of nonzero blocks ``(m, n)``. Hyperedge ``m``
is the set of vertices it touches. Workers own vertices and hyperedges; a
hyperedge owned by worker ``k`` that touches a vertex owned by ``k' != k`` makes
``k`` receive that vertex value (a halo) and send back an adjoint partial sum.

All indices are 0-based: vertices ``0..N-1``, hyperedges ``0..M-1`` and workers
``0..K-1``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyHyperedgeIntersection, InvalidOwnerMap


@dataclass(frozen=True, eq=False)
class OperatorStructure:
    """Block sparsity pattern of a linear operator.

    Attributes
    ----------
    row_sizes : ndarray of int, shape (M,)
        Scalar dimension of each hyperedge block.
    col_sizes : ndarray of int, shape (N,)
        Scalar dimension of each vertex block.
    rows, cols : ndarray of int
        Block coordinates of the nonzeros, sorted by ``(row, col)`` without repeats.
    """

    row_sizes: np.ndarray
    col_sizes: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.row_sizes.size)

    @property
    def n_vertices(self) -> int:
        return int(self.col_sizes.size)

    @classmethod
    def from_pairs(cls, pairs, n_edges: int, n_vertices: int,
                   row_sizes=None, col_sizes=None) -> OperatorStructure:
        pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs,
                           dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_edges
                           or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_vertices):
            raise ValueError("nonzero block outside the operator shape")
        uniq = np.unique(pairs, axis=0) if pairs.size else pairs
        rs = np.ones(n_edges, np.int64) if row_sizes is None else np.asarray(row_sizes, np.int64)
        cs = np.ones(n_vertices, np.int64) if col_sizes is None else np.asarray(col_sizes, np.int64)
        return cls(rs, cs, np.ascontiguousarray(uniq[:, 0]), np.ascontiguousarray(uniq[:, 1]))

    def hyperedge(self, m: int) -> np.ndarray:
        """Vertices touched by hyperedge ``m``."""
        lo, hi = np.searchsorted(self.rows, [m, m + 1])
        return self.cols[lo:hi]

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def violations(self) -> list[str]:
        """Structural problems: empty hyperedges and vertices no hyperedge touches."""
        out = []
        empty = np.setdiff1d(np.arange(self.n_edges), self.rows)
        if empty.size:
            out.append(f"empty hyperedge {int(empty[0])}")
        orphan = np.setdiff1d(np.arange(self.n_vertices), self.cols)
        if orphan.size:
            out.append(f"vertex {int(orphan[0])} is in no hyperedge")
        return out


@dataclass(frozen=True, eq=False)
class LocalMap:
    """Ordering of the vertices and hyperedges a worker stores.

    Vertices are the owned ones in ascending order followed by one halo strip
    per sending neighbour (ascending rank, ascending index inside a strip).
    Hyperedges are the purely local ones followed by the ones that need halos,
    each group ascending.
    """

    vertices: np.ndarray
    n_own_vertices: int
    halo_ranges: dict
    edges: np.ndarray
    n_local_edges: int

    def vertex_position(self, global_ids) -> np.ndarray:
        return _positions(self.vertices, global_ids)

    def edge_position(self, global_ids) -> np.ndarray:
        return _positions(self.edges, global_ids)


def _positions(order: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    lookup = {int(g): p for p, g in enumerate(order.tolist())}
    try:
        return np.array([lookup[int(g)] for g in ids.ravel()], dtype=np.int64).reshape(ids.shape)
    except KeyError as exc:
        raise KeyError(f"index {exc.args[0]} is not stored by this worker") from None


@dataclass(frozen=True, eq=False)
class HypergraphPartition:
    """Assignment of vertices and hyperedges to ``n_workers`` workers.

    Attributes
    ----------
    owned_vertices, owned_edges : tuple of ndarray
        Per worker, the vertices and hyperedges it owns (ascending).
    vertex_owner, edge_owner : ndarray
        The same information as owner arrays.
    local_edges : tuple of ndarray
        Per worker, owned hyperedges touching only owned vertices.
    recv_edges : dict
        ``(k, k2) -> hyperedges`` owned by ``k`` that touch a vertex of ``k2``.
    halo_vertices : dict
        ``(k, k2) -> vertices`` of ``k2`` that ``k`` needs.
    edge_workers_ptr, edge_workers : ndarray
        CSR listing, per hyperedge, the non-owner workers holding its vertices.
    recv_from, send_to : tuple of ndarray
        Per worker, the ranks it receives halos from and sends halos to.
    """

    n_workers: int
    vertex_owner: np.ndarray
    edge_owner: np.ndarray
    owned_vertices: tuple
    owned_edges: tuple
    local_edges: tuple
    recv_edges: dict
    halo_vertices: dict
    edge_workers_ptr: np.ndarray
    edge_workers: np.ndarray
    recv_from: tuple
    send_to: tuple
    local_maps: tuple = field(default=())

    def remote_workers(self, m: int) -> np.ndarray:
        return self.edge_workers[self.edge_workers_ptr[m]:self.edge_workers_ptr[m + 1]]

    def halo_edges(self, k: int) -> np.ndarray:
        """Owned hyperedges of ``k`` that need at least one halo value."""
        parts = [e for (a, _), e in self.recv_edges.items() if a == k]
        if not parts:
            return np.zeros(0, np.int64)
        return np.unique(np.concatenate(parts))

    def to_json(self) -> str:
        return json.dumps({
            "K": self.n_workers,
            "vertex_owner": self.vertex_owner.tolist(),
            "edge_owner": self.edge_owner.tolist(),
        })


def _group(keys: np.ndarray, values: np.ndarray) -> dict:
    """Split ``values`` by ``keys``; each group sorted and unique."""
    if keys.size == 0:
        return {}
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    cuts = np.flatnonzero(np.diff(keys)) + 1
    out = {}
    for ks, vs in zip(np.split(keys, cuts), np.split(values, cuts)):
        out[int(ks[0])] = np.unique(vs)
    return out


def build_partition(structure: OperatorStructure, n_workers: int,
                    vertex_owner, edge_owner) -> HypergraphPartition:
    """Derive all communication sets from owner maps of vertices and hyperedges.

    Raises
    ------
    InvalidOwnerMap
        If an owner array has the wrong length or values outside ``[0, n_workers)``.
    EmptyHyperedgeIntersection
        If some hyperedge touches no vertex of its owner.
    """
    K = int(n_workers)
    if K < 1:
        raise InvalidOwnerMap("need at least one worker")
    vo = np.asarray(vertex_owner, dtype=np.int64).ravel()
    eo = np.asarray(edge_owner, dtype=np.int64).ravel()
    M, N = structure.n_edges, structure.n_vertices
    if vo.size != N:
        raise InvalidOwnerMap(f"vertex owner map has {vo.size} entries, expected {N}")
    if eo.size != M:
        raise InvalidOwnerMap(f"hyperedge owner map has {eo.size} entries, expected {M}")
    for name, arr in (("vertex", vo), ("hyperedge", eo)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            bad = int(np.flatnonzero((arr < 0) | (arr >= K))[0])
            raise InvalidOwnerMap(f"{name} {bad} assigned to worker {int(arr[bad])} outside [0, {K})")

    r, c = structure.rows, structure.cols
    w = vo[c]
    km = eo[r]
    hit = np.zeros(M, dtype=bool)
    hit[r[w == km]] = True
    if not hit.all():
        m = int(np.flatnonzero(~hit)[0])
        raise EmptyHyperedgeIntersection(
            f"hyperedge {m} shares no vertex with its owner {int(eo[m])}")

    remote = w != km
    rr, wr, cr, kr = r[remote], w[remote], c[remote], km[remote]

    # workers other than the owner holding vertices of each hyperedge
    if rr.size:
        ew = np.unique(rr * K + wr)
        ew_m, ew_w = ew // K, ew % K
    else:
        ew_m = ew_w = np.zeros(0, np.int64)
    ptr = np.zeros(M + 1, dtype=np.int64)
    np.add.at(ptr, ew_m + 1, 1)
    ptr = np.cumsum(ptr)

    has_remote = np.zeros(M, dtype=bool)
    has_remote[ew_m] = True
    owned_vertices = tuple(np.flatnonzero(vo == k) for k in range(K))
    owned_edges = tuple(np.flatnonzero(eo == k) for k in range(K))
    local_edges = tuple(np.flatnonzero((eo == k) & ~has_remote) for k in range(K))

    pair_key = eo[ew_m] * K + ew_w
    recv_edges = {(int(key) // K, int(key) % K): e for key, e in _group(pair_key, ew_m).items()}
    halo_vertices = {(int(key) // K, int(key) % K): v for key, v in _group(kr * K + wr, cr).items()}

    recv_from = tuple(np.array(sorted(b for (a, b) in halo_vertices if a == k), dtype=np.int64)
                      for k in range(K))
    send_to = tuple(np.array(sorted(a for (a, b) in halo_vertices if b == k), dtype=np.int64)
                    for k in range(K))

    part = HypergraphPartition(
        n_workers=K, vertex_owner=vo, edge_owner=eo,
        owned_vertices=owned_vertices, owned_edges=owned_edges,
        local_edges=local_edges, recv_edges=recv_edges, halo_vertices=halo_vertices,
        edge_workers_ptr=ptr, edge_workers=ew_w, recv_from=recv_from, send_to=send_to)
    return dataclasses.replace(part, local_maps=tuple(_local_map(part, k) for k in range(K)))


def _local_map(part: HypergraphPartition, k: int) -> LocalMap:
    strips = [part.owned_vertices[k]]
    ranges = {}
    start = part.owned_vertices[k].size
    for k2 in part.recv_from[k].tolist():
        strip = part.halo_vertices[(k, k2)]
        ranges[k2] = (start, start + strip.size)
        start += strip.size
        strips.append(strip)
    local = part.local_edges[k]
    edges = np.concatenate([local, part.halo_edges(k)]).astype(np.int64)
    return LocalMap(np.concatenate(strips).astype(np.int64), int(part.owned_vertices[k].size),
                    ranges, edges, int(local.size))


def grid_partition_2d(height: int, width: int, grid_rows: int, grid_cols: int) -> np.ndarray:
    """Owner of each pixel (row-major) for a ``grid_rows x grid_cols`` tiling.

    Pixel ``(r, c)`` goes to tile ``(r * grid_rows // height, c * grid_cols // width)``,
    flattened row-major into a worker rank.
    """
    if grid_rows < 1 or grid_cols < 1 or grid_rows > height or grid_cols > width:
        raise InvalidOwnerMap(f"cannot tile a {height}x{width} image with a {grid_rows}x{grid_cols} grid")
    rows = np.arange(height) * grid_rows // height
    cols = np.arange(width) * grid_cols // width
    return (rows[:, None] * grid_cols + cols[None, :]).ravel().astype(np.int64)


def partition_from_json(text: str, structure: OperatorStructure) -> HypergraphPartition:
    doc = json.loads(text)
    return build_partition(structure, doc["K"], doc["vertex_owner"], doc["edge_owner"])


def validate_partition(part: HypergraphPartition, structure: OperatorStructure) -> list[str]:
    """Check every partition invariant with plain set logic.

    Returns a list of human-readable violations, empty when the partition is
    consistent with ``structure``.
    """
    out: list[str] = []
    K = part.n_workers
    N, M = structure.n_vertices, structure.n_edges
    edges_of: dict[int, set] = {}
    for m, n in zip(structure.rows.tolist(), structure.cols.tolist()):
        edges_of.setdefault(m, set()).add(n)

    def check_cover(sets, total, what):
        seen: dict[int, int] = {}
        for k, s in enumerate(sets):
            for x in np.asarray(s).tolist():
                if x in seen or not 0 <= x < total:
                    out.append(f"{what} sets are not a partition: {what} {x}")
                    return
                seen[x] = k
        missing = set(range(total)) - set(seen)
        if missing:
            out.append(f"{what} sets are not a partition: {what} {min(missing)} unassigned")
        return seen

    vowner = check_cover(part.owned_vertices, N, "vertex")
    eowner = check_cover(part.owned_edges, M, "hyperedge")
    if vowner is None or eowner is None:
        return out
    if any(part.vertex_owner[n] != k for n, k in vowner.items()):
        out.append("vertex owner array disagrees with owned vertex sets")
    if any(part.edge_owner[m] != k for m, k in eowner.items()):
        out.append("hyperedge owner array disagrees with owned hyperedge sets")

    expected_recv: dict[tuple, set] = {}
    expected_halo: dict[tuple, set] = {}
    for m in range(M):
        km = eowner[m]
        verts = edges_of.get(m, set())
        if not any(vowner[n] == km for n in verts):
            out.append(f"hyperedge {m} shares no vertex with its owner {km}")
        remote = {vowner[n] for n in verts} - {km}
        listed = set(part.remote_workers(m).tolist())
        if listed != remote:
            out.append(f"remote worker list of hyperedge {m} is wrong")
        for n in verts:
            if vowner[n] != km:
                expected_recv.setdefault((km, vowner[n]), set()).add(m)
                expected_halo.setdefault((km, vowner[n]), set()).add(n)

    for k in range(K):
        local = set(part.local_edges[k].tolist())
        halo = set()
        for (a, _), e in part.recv_edges.items():
            if a == k:
                halo |= set(e.tolist())
        owned = set(part.owned_edges[k].tolist())
        if local & halo or local | halo != owned:
            out.append(f"owned hyperedges of worker {k} are not local + halo hyperedges")
        for m in local:
            if part.remote_workers(m).size:
                out.append(f"hyperedge {m} is listed as local but needs halos")
    got_recv = {key: set(v.tolist()) for key, v in part.recv_edges.items() if len(v)}
    if got_recv != expected_recv:
        out.append("halo hyperedge sets disagree with the structure")
    got_halo = {key: set(v.tolist()) for key, v in part.halo_vertices.items() if len(v)}
    if got_halo != expected_halo:
        out.append("halo vertex sets disagree with the structure")
    for (a, b), verts in got_halo.items():
        if any(vowner[n] != b for n in verts):
            out.append(f"halo from worker {b} to {a} contains vertices {b} does not own")

    for k in range(K):
        rf = set(part.recv_from[k].tolist())
        st = set(part.send_to[k].tolist())
        if rf != {b for (a, b) in expected_halo if a == k}:
            out.append(f"receive set of worker {k} is wrong")
        if st != {a for (a, b) in expected_halo if b == k}:
            out.append(f"send set of worker {k} is wrong")
        for b in rf:
            if k not in set(part.send_to[b].tolist()):
                out.append(f"worker {k} receives from {b} but {b} does not send to {k}")

    for k, lm in enumerate(part.local_maps):
        if len(set(lm.vertices.tolist())) != lm.vertices.size:
            out.append(f"local vertex map of worker {k} is not injective")
        if len(set(lm.edges.tolist())) != lm.edges.size:
            out.append(f"local hyperedge map of worker {k} is not injective")
        if set(lm.edges.tolist()) != set(part.owned_edges[k].tolist()):
            out.append(f"local hyperedge map of worker {k} does not cover its hyperedges")
    return out
