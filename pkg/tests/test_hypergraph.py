import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_block_sparse, random_owners, toy_conv_blocks
from hypergibbs.errors import EmptyHyperedgeIntersection, InvalidOwnerMap
from hypergibbs.hypergraph import (OperatorStructure, build_partition, grid_partition_2d,
                                   partition_from_json, validate_partition)
from hypergibbs.linops import Conv2DOperator


def toy_structure():
    return OperatorStructure.from_pairs(list(toy_conv_blocks()), 4, 4)


def toy_partition():
    return build_partition(toy_structure(), 2, [0, 0, 1, 1], [0, 0, 1, 1])


def test_one_dimensional_convolution_sets():
    p = toy_partition()
    assert p.local_edges[0].tolist() == [0]
    assert {k: v.tolist() for k, v in p.recv_edges.items()} == {(0, 1): [1]}
    assert {k: v.tolist() for k, v in p.halo_vertices.items()} == {(0, 1): [2]}
    assert p.recv_from[0].tolist() == [1] and p.recv_from[1].tolist() == []
    assert p.send_to[1].tolist() == [0] and p.send_to[0].tolist() == []
    assert p.local_edges[1].tolist() == [2, 3]
    assert p.halo_edges(1).tolist() == []
    assert p.remote_workers(1).tolist() == [1]
    assert p.remote_workers(2).tolist() == [] and p.remote_workers(3).tolist() == []
    assert validate_partition(p, toy_structure()) == []


def test_local_maps_put_owned_vertices_first_then_halo_strips():
    lm = toy_partition().local_maps[0]
    assert lm.vertices.tolist() == [0, 1, 2]
    assert lm.n_own_vertices == 2 and lm.halo_ranges == {1: (2, 3)}
    assert lm.edges.tolist() == [0, 1] and lm.n_local_edges == 1
    assert lm.vertex_position([2, 0]).tolist() == [2, 0]
    with pytest.raises(KeyError):
        lm.vertex_position([3])


@pytest.mark.parametrize("K", [1, 2, 3, 5])
def test_diagonal_operator_needs_no_communication(K):
    s = OperatorStructure.from_pairs([(m, m) for m in range(7)], 7, 7)
    owner = np.arange(7) % K
    p = build_partition(s, K, owner, owner)
    for k in range(K):
        assert p.local_edges[k].tolist() == p.owned_edges[k].tolist()
        assert p.recv_from[k].size == 0 and p.send_to[k].size == 0
    assert validate_partition(p, s) == []


def test_single_worker_owns_everything_locally():
    s = toy_structure()
    p = build_partition(s, 1, np.zeros(4), np.zeros(4))
    assert p.local_edges[0].tolist() == [0, 1, 2, 3]
    assert p.recv_edges == {} and p.halo_vertices == {}
    assert p.recv_from[0].size == 0 and p.send_to[0].size == 0


def test_owner_outside_range_is_rejected():
    with pytest.raises(InvalidOwnerMap):
        build_partition(toy_structure(), 2, [0, 0, 2, 1], [0, 0, 1, 1])
    with pytest.raises(InvalidOwnerMap):
        build_partition(toy_structure(), 2, [0, 0, 1], [0, 0, 1, 1])


def test_hyperedge_without_owner_vertex_is_rejected():
    # hyperedge 3 touches only vertex 3, which worker 0 does not own
    with pytest.raises(EmptyHyperedgeIntersection):
        build_partition(toy_structure(), 2, [0, 0, 1, 1], [0, 0, 1, 0])


def test_vertex_assigned_twice_is_reported():
    p = toy_partition()
    bad = dataclasses.replace(p, owned_vertices=(np.array([0, 1, 3]), np.array([2, 3])))
    assert "vertex sets are not a partition: vertex 3" in validate_partition(bad, toy_structure())


def test_emptied_halo_hyperedges_are_reported():
    p = toy_partition()
    bad = dataclasses.replace(p, recv_edges={(0, 1): np.zeros(0, np.int64)})
    msgs = validate_partition(bad, toy_structure())
    assert "owned hyperedges of worker 0 are not local + halo hyperedges" in msgs


def test_structure_violations():
    s = OperatorStructure.from_pairs([(0, 0), (2, 1)], 3, 3)
    assert s.violations() == ["empty hyperedge 1", "vertex 2 is in no hyperedge"]
    assert toy_structure().violations() == []


def test_grid_partition_even_split():
    owner = grid_partition_2d(4, 4, 2, 2).reshape(4, 4)
    assert np.flatnonzero(owner.ravel() == 0).tolist() == [0, 1, 4, 5]
    assert owner.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


def test_grid_partition_uneven_rows():
    owner = grid_partition_2d(5, 4, 2, 2).reshape(5, 4)
    assert owner[:, 0].tolist() == [0, 0, 0, 2, 2]


def test_grid_partition_single_tile():
    assert np.all(grid_partition_2d(4, 4, 1, 1) == 0)
    with pytest.raises(InvalidOwnerMap):
        grid_partition_2d(2, 2, 3, 1)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6), st.integers(1, 6))
def test_grid_tiles_differ_by_at_most_one(h, w, r, c):
    r, c = min(r, h), min(c, w)
    owner = grid_partition_2d(h, w, r, c).reshape(h, w)
    rows = [np.sum(owner[:, 0] // c == i) for i in range(r)]
    cols = [np.sum(owner[0, :] % c == j) for j in range(c)]
    assert max(rows) - min(rows) <= 1 and max(cols) - min(cols) <= 1


def test_json_round_trip():
    p = toy_partition()
    doc = json.loads(p.to_json())
    assert doc == {"K": 2, "vertex_owner": [0, 0, 1, 1], "edge_owner": [0, 0, 1, 1]}
    q = partition_from_json(p.to_json(), toy_structure())
    assert {k: v.tolist() for k, v in q.halo_vertices.items()} == {(0, 1): [2]}


@given(st.integers(0, 2**32 - 1), st.integers(1, 24), st.integers(1, 24), st.integers(1, 8))
def test_random_partitions_validate(seed, M, N, K):
    rng = np.random.default_rng(seed)
    s = random_block_sparse(rng, M, N).structure
    vo, eo = random_owners(rng, s, K)
    p = build_partition(s, K, vo, eo)
    assert validate_partition(p, s) == []


@given(st.integers(0, 2**32 - 1), st.integers(1, 24), st.integers(1, 24), st.integers(1, 8))
def test_communication_symmetry(seed, M, N, K):
    rng = np.random.default_rng(seed)
    s = random_block_sparse(rng, M, N).structure
    vo, eo = random_owners(rng, s, K)
    p = build_partition(s, K, vo, eo)
    for k in range(K):
        sent = sum(p.halo_vertices[(k, k2)].size for k2 in p.recv_from[k].tolist())
        remote = {int(n) for m in p.halo_edges(k).tolist() for n in s.hyperedge(m) if vo[n] != k}
        assert sent == len(remote)
        for k2 in p.recv_from[k].tolist():
            assert k in p.send_to[k2].tolist()


@pytest.mark.parametrize("L,grid", [(3, (2, 2)), (7, (2, 2)), (5, (3, 2))])
def test_convolution_halo_is_a_thin_strip(L, grid):
    H = W = 36
    op = Conv2DOperator(H, W, np.ones((L, L)) / L**2)
    owner = grid_partition_2d(H, W, *grid)
    p = build_partition(op.structure, grid[0] * grid[1], owner, owner)
    tile = max(H // grid[0], W // grid[1])
    for verts in p.halo_vertices.values():
        assert verts.size <= (L // 2) * tile
