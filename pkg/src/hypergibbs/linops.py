"""Block-sparse linear operators with global and worker-local application.

Every operator is stored as a scalar CSR matrix whose entries are sorted by
``(row, column)``. The transpose is stored the same way, sorted by
``(column, row)``. Matrix-vector products accumulate in that fixed order, so a
worker applying its slice of the rows reproduces the global rows bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DimensionMismatch, MissingHalo
from .hypergraph import HypergraphPartition, OperatorStructure


@njit(nogil=True, cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    for i in range(out.size):
        acc = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            acc += data[jj] * x[indices[jj]]
        out[i] = acc


@dataclass(frozen=True, eq=False)
class Csr:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    n_cols: int

    @property
    def n_rows(self) -> int:
        return self.indptr.size - 1

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_rows, dtype=np.float64)
        _csr_matvec(self.indptr, self.indices, self.data, x, out)
        return out

    def transpose(self) -> Csr:
        """Transpose with entries of each new row in ascending old-row order."""
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        return _csr_from_sorted(self.indices, rows, self.data, self.n_cols, self.n_rows,
                                presorted=False)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.data)
        return out


def _csr_from_sorted(rows, cols, vals, n_rows, n_cols, presorted=True) -> Csr:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if not presorted:
        # stable on rows keeps the incoming column order inside each row
        order = np.argsort(rows, kind="stable")
        rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return Csr(np.cumsum(indptr), np.ascontiguousarray(cols), np.ascontiguousarray(vals), int(n_cols))


def _offsets(sizes: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def expand_blocks(block_ids, offsets: np.ndarray) -> np.ndarray:
    """Scalar indices of the given blocks, concatenated in the given order."""
    block_ids = np.asarray(block_ids, dtype=np.int64)
    starts = offsets[block_ids]
    lens = offsets[block_ids + 1] - starts
    if lens.size and np.all(lens == 1):
        return starts.copy()
    total = int(lens.sum())
    base = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return base + np.arange(total, dtype=np.int64)


class LinearOperator:
    """Scalar CSR operator together with its hyperedge/vertex block structure.

    Subclasses call ``_setup`` with scalar COO triplets. Entries are kept even
    when their value is zero, so the block structure may declare a coupling
    that is numerically silent (used for trailing-boundary finite differences).
    """

    #: analytic upper bound on the squared operator norm, if one is known
    norm_sq_cap: float | None = None

    def _setup(self, row_sizes, col_sizes, rows, cols, vals):
        row_sizes = np.asarray(row_sizes, dtype=np.int64)
        col_sizes = np.asarray(col_sizes, dtype=np.int64)
        self.row_offsets = _offsets(row_sizes)
        self.col_offsets = _offsets(col_sizes)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                raise ValueError("duplicate scalar entry in operator")
        n_rows, n_cols = int(self.row_offsets[-1]), int(self.col_offsets[-1])
        self.csr = _csr_from_sorted(rows, cols, vals, n_rows, n_cols)
        self.csr_t = self.csr.transpose()
        brow = np.searchsorted(self.row_offsets, rows, side="right") - 1
        bcol = np.searchsorted(self.col_offsets, cols, side="right") - 1
        key = np.unique(brow * col_sizes.size + bcol)
        self.structure = OperatorStructure(row_sizes, col_sizes,
                                           key // col_sizes.size, key % col_sizes.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.n_rows, self.csr.n_cols

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply(self, x)

    def apply_adjoint(self, d: np.ndarray) -> np.ndarray:
        return apply_adjoint(self, d)

    def to_dense(self) -> np.ndarray:
        return self.csr.to_dense()


class BlockSparseOperator(LinearOperator):
    """Operator given by explicit dense blocks ``{(m, n): D_mn}``.

    Parameters
    ----------
    blocks : dict
        Maps ``(m, n)`` to a 2-D array of shape ``(row_sizes[m], col_sizes[n])``.
    row_sizes, col_sizes : sequence of int, optional
        Inferred from the blocks when omitted; every row and column must then
        appear in at least one block.
    """

    def __init__(self, blocks: dict, row_sizes=None, col_sizes=None,
                 n_edges: int | None = None, n_vertices: int | None = None):
        blocks = {(int(m), int(n)): np.atleast_2d(np.asarray(b, dtype=np.float64))
                  for (m, n), b in blocks.items()}
        if row_sizes is None:
            M = n_edges if n_edges is not None else 1 + max(m for m, _ in blocks)
            row_sizes = np.zeros(M, np.int64)
            for (m, _), b in blocks.items():
                row_sizes[m] = b.shape[0]
        if col_sizes is None:
            N = n_vertices if n_vertices is not None else 1 + max(n for _, n in blocks)
            col_sizes = np.zeros(N, np.int64)
            for (_, n), b in blocks.items():
                col_sizes[n] = b.shape[1]
        row_sizes = np.asarray(row_sizes, np.int64)
        col_sizes = np.asarray(col_sizes, np.int64)
        if np.any(row_sizes < 1) or np.any(col_sizes < 1):
            raise ValueError("every block row and column needs a positive size")
        ro, co = _offsets(row_sizes), _offsets(col_sizes)
        rows, cols, vals = [], [], []
        for (m, n), b in blocks.items():
            if b.shape != (row_sizes[m], col_sizes[n]):
                raise DimensionMismatch(f"block ({m}, {n}) has shape {b.shape}")
            rr, cc = np.meshgrid(np.arange(b.shape[0]), np.arange(b.shape[1]), indexing="ij")
            rows.append(ro[m] + rr.ravel())
            cols.append(co[n] + cc.ravel())
            vals.append(b.ravel())
        self._setup(row_sizes, col_sizes, np.concatenate(rows), np.concatenate(cols),
                    np.concatenate(vals))


class Conv2DOperator(LinearOperator):
    """Zero-padded 2-D convolution with output the same size as the input.

    Each pixel is one vertex and one hyperedge; hyperedge ``m`` touches the
    pixels under the kernel footprint centred at ``m``.
    """

    def __init__(self, height: int, width: int, kernel):
        kernel = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
        L1, L2 = kernel.shape
        if L1 % 2 == 0 or L2 % 2 == 0:
            raise ValueError(f"kernel dimensions must be odd, got {kernel.shape}")
        self.height, self.width, self.kernel = int(height), int(width), kernel
        h1, h2 = L1 // 2, L2 // 2
        r, c = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        r, c = r.ravel(), c.ravel()
        rows, cols, vals = [], [], []
        for a in range(L1):
            for b in range(L2):
                rr = r - (a - h1)
                cc = c - (b - h2)
                ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
                rows.append((r * width + c)[ok])
                cols.append((rr * width + cc)[ok])
                vals.append(np.full(int(ok.sum()), kernel[a, b]))
        n = height * width
        self._setup(np.ones(n, np.int64), np.ones(n, np.int64), np.concatenate(rows),
                    np.concatenate(cols), np.concatenate(vals))
        # Young's inequality bounds the norm by the l1 norm of the kernel
        self.norm_sq_cap = float(np.abs(kernel).sum() ** 2)

    @property
    def half_widths(self) -> tuple[int, int]:
        return self.kernel.shape[0] // 2, self.kernel.shape[1] // 2


class Grad2DOperator(LinearOperator):
    """Forward differences, zero at the trailing boundary.

    Hyperedge ``m`` is pixel ``m`` with a 2-vector output ``(vertical,
    horizontal)``, stored contiguously. At the last row (column) the vertical
    (horizontal) difference is an explicit zero coupling to the pixel itself.
    """

    norm_sq_cap = 8.0

    def __init__(self, height: int, width: int):
        self.height, self.width = int(height), int(width)
        n = height * width
        r, c = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        r, c = r.ravel(), c.ravel()
        m = r * width + c
        rows, cols, vals = [], [], []
        for comp, inside, step in ((0, r < height - 1, width), (1, c < width - 1, 1)):
            out_row = 2 * m + comp
            rows += [out_row[inside], out_row[inside], out_row[~inside]]
            cols += [m[inside], m[inside] + step, m[~inside]]
            vals += [np.full(int(inside.sum()), -1.0), np.full(int(inside.sum()), 1.0),
                     np.zeros(int((~inside).sum()))]
        self._setup(np.full(n, 2, np.int64), np.ones(n, np.int64), np.concatenate(rows),
                    np.concatenate(cols), np.concatenate(vals))

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vertical and horizontal difference images from an output vector."""
        v = np.asarray(v).reshape(self.height, self.width, 2)
        return v[..., 0], v[..., 1]


def _check(vec, n, what):
    vec = np.ascontiguousarray(vec, dtype=np.float64).ravel()
    if vec.size != n:
        raise DimensionMismatch(f"{what} has length {vec.size}, expected {n}")
    return vec


def apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    """``D x`` as a flat vector of length ``sum(row_sizes)``."""
    return op.csr.matvec(_check(x, op.csr.n_cols, "input"))


def apply_adjoint(op: LinearOperator, d: np.ndarray) -> np.ndarray:
    """``D^T d`` as a flat vector of length ``sum(col_sizes)``."""
    return op.csr_t.matvec(_check(d, op.csr.n_rows, "input"))


def operator_norm_sq(op: LinearOperator, iterations: int = 100, seed: int = 0,
                     safety: float = 1.05) -> float:
    """Upper estimate of ``||D||^2`` by power iteration, inflated by ``safety``.

    The estimate is capped by the operator's analytic bound when it has one
    (8 for forward differences, the squared kernel l1 norm for convolutions).
    """
    x = np.random.default_rng(seed).standard_normal(op.csr.n_cols)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iterations):
        y = apply_adjoint(op, apply(op, x))
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            est = 0.0
            break
        est = float(x @ y)
        x = y / nrm
    est *= safety
    if op.norm_sq_cap is not None:
        est = min(est, op.norm_sq_cap)
    return est


@dataclass(frozen=True, eq=False)
class LocalOperator:
    """The rows of an operator owned by one worker, with remapped columns.

    Columns index the worker's extended vector: owned vertex scalars first,
    then one halo strip per neighbour in ascending rank.

    Attributes
    ----------
    vertex_index : ndarray
        Global scalar indices of the owned vertices.
    edge_index : ndarray
        Global scalar indices of the local rows, in local order.
    halo_index : dict
        ``k2 -> global scalar indices`` of the halo strip received from ``k2``.
    """

    rank: int
    vertex_index: np.ndarray
    edge_index: np.ndarray
    halo_index: dict
    halo_slices: dict
    fwd: Csr
    adj: Csr

    @property
    def n_own(self) -> int:
        return self.vertex_index.size

    @property
    def neighbours(self) -> list[int]:
        return sorted(self.halo_index)

    def apply(self, x_own: np.ndarray, x_halo: dict) -> np.ndarray:
        return apply_local(self, x_own, x_halo)

    def adjoint(self, d: np.ndarray):
        return adjoint_local(self, d)


def local_slice(op: LinearOperator, part: HypergraphPartition, k: int) -> LocalOperator:
    """Restrict ``op`` to the hyperedges of worker ``k`` in its local order."""
    lm = part.local_maps[k]
    ext_vertices = expand_blocks(lm.vertices, op.col_offsets)
    edge_index = expand_blocks(lm.edges, op.row_offsets)
    colmap = np.full(op.csr.n_cols, -1, dtype=np.int64)
    colmap[ext_vertices] = np.arange(ext_vertices.size)

    starts = op.csr.indptr[edge_index]
    lens = op.csr.indptr[edge_index + 1] - starts
    # entry positions in the global CSR, row by row in local order
    take = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens) \
        + np.arange(int(lens.sum()), dtype=np.int64)
    cols = colmap[op.csr.indices[take]]
    if np.any(cols < 0):
        raise MissingHalo(f"worker {k} rows touch vertices outside its halo")
    fwd = Csr(np.concatenate([[0], np.cumsum(lens)]).astype(np.int64), cols,
              op.csr.data[take].copy(), int(ext_vertices.size))

    n_own = int(op.structure.col_sizes[lm.vertices[:lm.n_own_vertices]].sum())
    halo_index, halo_slices = {}, {}
    pos = n_own
    for k2 in part.recv_from[k].tolist():
        strip = expand_blocks(part.halo_vertices[(k, k2)], op.col_offsets)
        halo_index[k2] = strip
        halo_slices[k2] = slice(pos, pos + strip.size)
        pos += strip.size
    return LocalOperator(k, ext_vertices[:n_own].copy(), edge_index, halo_index, halo_slices,
                         fwd, fwd.transpose())


def apply_local(loc: LocalOperator, x_own: np.ndarray, x_halo: dict) -> np.ndarray:
    """Local rows of ``D x`` from owned values and received halo strips.

    Raises
    ------
    MissingHalo
        If a required strip is absent or has the wrong length.
    """
    x_own = _check(x_own, loc.n_own, "owned vector")
    parts = [x_own]
    for k2 in loc.neighbours:
        if k2 not in x_halo:
            raise MissingHalo(f"worker {loc.rank} needs a halo from worker {k2}")
        strip = np.asarray(x_halo[k2], dtype=np.float64).ravel()
        if strip.size != loc.halo_index[k2].size:
            raise MissingHalo(f"halo from worker {k2} has {strip.size} values, "
                              f"expected {loc.halo_index[k2].size}")
        parts.append(strip)
    return loc.fwd.matvec(np.concatenate(parts))


def adjoint_local(loc: LocalOperator, d: np.ndarray):
    """Adjoint of the local rows.

    Returns
    -------
    own : ndarray
        Contribution to the owned vertices.
    partial : dict
        ``k2 -> partial sums`` on the halo strip from ``k2``, to be sent back to it.
    """
    d = _check(d, loc.edge_index.size, "local hyperedge vector")
    ext = loc.adj.matvec(d)
    return ext[:loc.n_own], {k2: ext[s] for k2, s in loc.halo_slices.items()}


def load_kernel(path) -> np.ndarray:
    """Read a whitespace-separated kernel matrix from a text file."""
    kernel = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd, got {kernel.shape}")
    return kernel


def block_sparse_from_json(text: str) -> BlockSparseOperator:
    """Build an operator from ``[{"m": .., "n": .., "block": [[..]]}, ..]``.

    A mapping with a ``"blocks"`` list and optional ``"row_sizes"``,
    ``"col_sizes"`` is accepted too.
    """
    doc = json.loads(text)
    if isinstance(doc, dict):
        entries, rs, cs = doc["blocks"], doc.get("row_sizes"), doc.get("col_sizes")
    else:
        entries, rs, cs = doc, None, None
    blocks = {(e["m"], e["n"]): e["block"] for e in entries}
    return BlockSparseOperator(blocks, row_sizes=rs, col_sizes=cs)
