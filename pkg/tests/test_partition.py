import itertools

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from aggmg.meshgraph import CartesianMeshSpec, ElementGraph, build_cartesian, is_connected
from aggmg.partition import AggregateHierarchy, aggregate_graph, build_hierarchy, kway_split, n_levels_for


def _cycle(n):
    return ElementGraph([[(i - 1) % n, (i + 1) % n] for i in range(n)], np.ones(n))


def _grid(n, d=2):
    g, _ = build_cartesian(CartesianMeshSpec(d, int(np.log2(n))))
    return g


def _balanced_connected_splits(graph, nodes, parts):
    """Every labelling of `nodes` into `parts` connected parts of equal size."""
    nodes = list(nodes)
    size = len(nodes) // parts
    out = []
    for labels in itertools.product(range(parts), repeat=len(nodes)):
        groups = [[u for u, lab in zip(nodes, labels) if lab == k] for k in range(parts)]
        if all(len(grp) == size and is_connected(graph, grp) for grp in groups):
            out.append(labels)
    return out


def _check_split(graph, nodes, labels, parts):
    nodes = sorted(nodes)
    groups = [[u for u, lab in zip(nodes, labels) if lab == k] for k in range(parts)]
    assert sorted(len(grp) for grp in groups) == [len(nodes) // parts] * parts
    assert all(is_connected(graph, grp) for grp in groups)


def test_cycle_into_pairs():
    g = _cycle(4)
    labels = kway_split(g, range(4), 2)
    valid = _balanced_connected_splits(g, range(4), 2)
    assert tuple(labels) in valid
    _check_split(g, range(4), labels, 2)


def test_single_node_subset():
    g = _cycle(4)
    np.testing.assert_array_equal(kway_split(g, [2], 1), [0])


def test_grid_into_four():
    g = _grid(4)
    labels = kway_split(g, range(16), 4)
    _check_split(g, range(16), labels, 4)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(0, 50))
def test_kway_split_balanced_and_connected(d, M, seed):
    g, _ = build_cartesian(CartesianMeshSpec(d, M))
    parts = 2**d
    labels = kway_split(g, range(g.n_elements), parts, seed=seed)
    _check_split(g, range(g.n_elements), labels, parts)


def test_hierarchy_4096_elements():
    g, _ = build_cartesian(CartesianMeshSpec(3, 4))
    agg = build_hierarchy(g, 3)
    assert agg.n_levels == 4 == n_levels_for(4096, 3)
    assert agg.counts[-1] == 8
    assert agg.counts == [4096, 512, 64, 8]


def test_hierarchy_one_split():
    g, _ = build_cartesian(CartesianMeshSpec(3, 1))
    agg = build_hierarchy(g, 3)
    assert agg.n_levels == 1
    np.testing.assert_array_equal(agg.levels[0], np.arange(8))


def _assert_nested(agg):
    for k in range(agg.n_levels - 1):
        fine, coarse = agg.levels[k], agg.levels[k + 1]
        # every level-k aggregate lies in exactly one level-(k+1) aggregate
        for a in np.unique(fine):
            assert len(np.unique(coarse[fine == a])) == 1


def test_hierarchy_2d_grid():
    g = _grid(4)
    agg = build_hierarchy(g, 2)
    assert agg.n_levels == 2
    np.testing.assert_array_equal(np.bincount(agg.levels[1]), [4, 4, 4, 4])
    _assert_nested(agg)
    for a in range(4):
        assert is_connected(g, np.flatnonzero(agg.levels[1] == a))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 20))
def test_hierarchy_nested_connected(d, M, seed):
    g, _ = build_cartesian(CartesianMeshSpec(d, M))
    agg = build_hierarchy(g, d, seed=seed)
    _assert_nested(agg)
    for k in range(1, agg.n_levels):
        for a in np.unique(agg.levels[k]):
            assert is_connected(g, np.flatnonzero(agg.levels[k] == a))
    assert AggregateHierarchy.from_json(agg.to_json()).counts == agg.counts


def test_hierarchy_deterministic():
    g, _ = build_cartesian(CartesianMeshSpec(3, 3))
    a, b = build_hierarchy(g, 3, seed=4), build_hierarchy(g, 3, seed=4)
    assert a.to_json() == b.to_json()


def test_aggregate_graph_singletons():
    g = _grid(4)
    q = aggregate_graph(g, np.arange(16))
    assert q == g


def test_aggregate_graph_cycle_pairs():
    q = aggregate_graph(_cycle(4), [0, 0, 1, 1])
    assert q.n_elements == 2 and q.n_edges == 1
    np.testing.assert_array_equal(q.dof_counts, [2, 2])


def test_aggregate_graph_quadrants():
    g = _grid(4)
    # lexicographic x-fastest: quadrant = (x >= 2) + 2 (y >= 2)
    labels = np.array([(e % 4 >= 2) + 2 * (e // 4 >= 2) for e in range(16)])
    q = aggregate_graph(g, labels)
    expected = _grid(2)
    assert q.adjacency == expected.adjacency
    # four elements of (p+1)^2 = 4 dofs each
    np.testing.assert_array_equal(q.dof_counts, [16, 16, 16, 16])
