import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from conftest import random_block_sparse, random_owners
from hypergibbs.deconv import gaussian_kernel
from hypergibbs.errors import DimensionMismatch, MissingHalo
from hypergibbs.hypergraph import build_partition, grid_partition_2d
from hypergibbs.linops import (BlockSparseOperator, Conv2DOperator, Grad2DOperator, apply,
                               apply_adjoint, apply_local, adjoint_local, block_sparse_from_json,
                               load_kernel, local_slice, operator_norm_sq)


def _rel_gap(op, rng):
    x = rng.standard_normal(op.shape[1])
    d = rng.standard_normal(op.shape[0])
    lhs, rhs = apply(op, x) @ d, x @ apply_adjoint(op, d)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def test_conv_row_example():
    op = Conv2DOperator(1, 4, np.array([[1, 2, 1]]) / 4)
    assert apply(op, np.array([1.0, 2, 3, 4])).tolist() == [1.0, 2.0, 3.0, 2.75]


def test_grad_example():
    op = Grad2DOperator(2, 2)
    vert, horiz = op.split(apply(op, np.array([1.0, 2, 3, 4])))
    assert vert.tolist() == [[2, 2], [0, 0]]
    assert horiz.tolist() == [[1, 0], [1, 0]]


def test_identity_block_sparse():
    op = BlockSparseOperator({(m, m): [[1.0]] for m in range(5)})
    x = np.arange(5.0)
    assert np.array_equal(apply(op, x), x)
    assert operator_norm_sq(op) == pytest.approx(1.05)


def test_grad_adjoint_of_zero():
    op = Grad2DOperator(5, 4)
    assert np.array_equal(apply_adjoint(op, np.zeros(40)), np.zeros(20))


def test_conv_matches_independent_dense_oracle():
    rng = np.random.default_rng(0)
    kernel = rng.random((3, 5))
    op = Conv2DOperator(8, 8, kernel)
    dense = np.empty((64, 64))
    for j in range(64):
        e = np.zeros(64)
        e[j] = 1
        dense[:, j] = ndimage.convolve(e.reshape(8, 8), kernel, mode="constant").ravel()
    assert np.allclose(op.to_dense(), dense, atol=1e-15)
    d = rng.standard_normal(64)
    assert np.allclose(apply_adjoint(op, d), dense.T @ d, atol=1e-13)


def test_symmetric_kernel_adjoint_is_flipped_convolution():
    kernel = gaussian_kernel(5)
    op = Conv2DOperator(8, 8, kernel)
    d = np.random.default_rng(1).standard_normal((8, 8))
    flipped = ndimage.convolve(d, kernel[::-1, ::-1], mode="constant")
    assert np.allclose(apply_adjoint(op, d.ravel()), flipped.ravel(), atol=1e-13)


def test_delta_image_reproduces_kernel():
    kernel = np.arange(15.0).reshape(3, 5)
    op = Conv2DOperator(9, 9, kernel)
    delta = np.zeros((9, 9))
    delta[4, 4] = 1
    assert np.array_equal(apply(op, delta.ravel()).reshape(9, 9)[3:6, 2:7], kernel)


@given(st.integers(0, 2**32 - 1))
def test_adjoint_identity_all_operator_types(seed):
    rng = np.random.default_rng(seed)
    ops = [Conv2DOperator(7, 6, rng.random((3, 3))), Grad2DOperator(6, 7),
           random_block_sparse(rng, 9, 8, max_block=3)]
    for op in ops:
        assert _rel_gap(op, rng) < 1e-10


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_local_forward_and_adjoint_match_global(seed, K):
    rng = np.random.default_rng(seed)
    op = random_block_sparse(rng, 14, 12, max_block=3)
    vo, eo = random_owners(rng, op.structure, K)
    part = build_partition(op.structure, K, vo, eo)
    x = rng.standard_normal(op.shape[1])
    d = rng.standard_normal(op.shape[0])
    v = np.empty(op.shape[0])
    delta = np.zeros(op.shape[1])
    partials = []
    for k in range(K):
        loc = local_slice(op, part, k)
        halo = {k2: x[idx] for k2, idx in loc.halo_index.items()}
        v[loc.edge_index] = apply_local(loc, x[loc.vertex_index], halo)
        own, out = adjoint_local(loc, d[loc.edge_index])
        delta[loc.vertex_index] += own
        partials.append((loc, out))
        # local adjoint identity on the extended vector of worker k
        ext = np.concatenate([x[loc.vertex_index]] + [halo[k2] for k2 in loc.neighbours])
        lhs = loc.fwd.matvec(ext) @ d[loc.edge_index]
        rhs = ext @ loc.adj.matvec(d[loc.edge_index])
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1e-300)
    for loc, out in partials:
        for k2, vals in out.items():
            delta[loc.halo_index[k2]] += vals
    assert np.array_equal(v, apply(op, x))
    assert np.allclose(delta, apply_adjoint(op, d), rtol=1e-12, atol=1e-12)


def test_one_dimensional_local_apply_example(toy_operator):
    part = build_partition(toy_operator.structure, 2, [0, 0, 1, 1], [0, 0, 1, 1])
    loc = local_slice(toy_operator, part, 0)
    assert apply_local(loc, np.array([1.0, 2.0]), {1: np.array([3.0])}).tolist() == [3.0, 5.0]
    own, out = adjoint_local(loc, np.array([1.0, 1.0]))
    assert own.tolist() == [1.0, 2.0]
    assert {k: v.tolist() for k, v in out.items()} == {1: [1.0]}
    zero_own, zero_out = adjoint_local(loc, np.zeros(2))
    assert not zero_own.any() and not zero_out[1].any()


def test_worker_without_halo_equals_restricted_apply(toy_operator):
    part = build_partition(toy_operator.structure, 2, [0, 0, 1, 1], [0, 0, 1, 1])
    loc = local_slice(toy_operator, part, 1)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert loc.neighbours == []
    assert np.array_equal(apply_local(loc, x[2:], {}), apply(toy_operator, x)[2:])


def test_missing_halo_is_an_error(toy_operator):
    part = build_partition(toy_operator.structure, 2, [0, 0, 1, 1], [0, 0, 1, 1])
    loc = local_slice(toy_operator, part, 0)
    with pytest.raises(MissingHalo):
        apply_local(loc, np.ones(2), {})
    with pytest.raises(MissingHalo):
        apply_local(loc, np.ones(2), {1: np.ones(2)})


def test_dimension_mismatch():
    op = Grad2DOperator(3, 3)
    with pytest.raises(DimensionMismatch):
        apply(op, np.ones(8))
    with pytest.raises(DimensionMismatch):
        apply_adjoint(op, np.ones(9))


def test_grid_tile_application_equals_global_slice():
    H, W = 20, 18
    op = Conv2DOperator(H, W, gaussian_kernel(5))
    owner = grid_partition_2d(H, W, 2, 3)
    part = build_partition(op.structure, 6, owner, owner)
    x = np.random.default_rng(2).random(H * W)
    ref = apply(op, x)
    for k in range(6):
        loc = local_slice(op, part, k)
        v = apply_local(loc, x[loc.vertex_index], {k2: x[i] for k2, i in loc.halo_index.items()})
        assert np.array_equal(v, ref[loc.edge_index])


def test_norm_bounds():
    assert operator_norm_sq(Grad2DOperator(16, 16)) <= 8.0
    est = operator_norm_sq(Grad2DOperator(16, 16), safety=1.0)
    assert 7.0 < est <= 8.0
    assert operator_norm_sq(Conv2DOperator(16, 16, gaussian_kernel(5))) <= 1.0


def test_norm_estimate_bounds_true_norm():
    op = random_block_sparse(np.random.default_rng(4), 10, 10)
    true = np.linalg.norm(op.to_dense(), 2) ** 2
    assert true <= operator_norm_sq(op) <= 1.06 * true


def test_load_kernel(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("0 1 0\n1 4 1\n0 1 0\n")
    assert load_kernel(path).tolist() == [[0, 1, 0], [1, 4, 1], [0, 1, 0]]
    path.write_text("1 1\n1 1\n")
    with pytest.raises(ValueError):
        load_kernel(path)


def test_block_sparse_from_json():
    doc = [{"m": 0, "n": 0, "block": [[1, 2]]}, {"m": 1, "n": 1, "block": [[3], [4]]}]
    op = block_sparse_from_json(json.dumps(doc))
    assert op.shape == (3, 3)
    assert op.to_dense().tolist() == [[1, 2, 0], [0, 0, 3], [0, 0, 4]]
    with pytest.raises(DimensionMismatch):
        BlockSparseOperator({(0, 0): [[1, 2]], (0, 1): [[1]], (1, 0): [[1, 2, 3]]})
