import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aggmg.meshgraph import (
    CartesianMeshSpec,
    ElementGraph,
    GraphError,
    build_cartesian,
    is_connected,
    load_graph,
    write_graph,
)


def test_two_element_line():
    g, geo = build_cartesian(CartesianMeshSpec(1, 1))
    assert g.n_elements == 2
    assert g.adjacency == ((1,), (0,))
    np.testing.assert_allclose(geo.lower_corners[:, 0], [-1.0, 0.0])


def test_3d_m2_interior_degree():
    g, geo = build_cartesian(CartesianMeshSpec(3, 2))
    assert g.n_elements == 64
    interior = [e for e in range(64) if np.all((geo.index[e] > 0) & (geo.index[e] < 3))]
    assert interior
    assert all(g.degree(e) == 6 for e in interior)


def _edges_by_enumeration(n_axis, d):
    # two lattice cells share a face iff their coordinates differ by one in exactly one axis
    cells = list(itertools.product(range(n_axis), repeat=d))
    return sum(
        1 for a, b in itertools.combinations(cells, 2) if sum(abs(x - y) for x, y in zip(a, b)) == 1
    )


def test_2d_m3_handshake():
    g, _ = build_cartesian(CartesianMeshSpec(2, 3))
    assert g.n_elements == 64
    edges = _edges_by_enumeration(8, 2)
    assert edges == 112
    assert sum(g.degree(e) for e in range(64)) == 2 * edges
    assert g.n_edges == edges


@given(st.integers(1, 3), st.integers(0, 3), st.integers(0, 2))
def test_cartesian_graph_properties(d, M, p):
    spec = CartesianMeshSpec(d, M, p)
    g, geo = build_cartesian(spec)
    g.validate()
    assert g.n_elements == 2 ** (M * d)
    assert g.n_dofs == g.n_elements * (p + 1) ** d
    assert g.n_edges == _edges_by_enumeration(2**M, d)
    # corners lie on the lattice of the box [-1, 1]^d
    assert np.all(geo.lower_corners >= -1.0) and np.all(geo.lower_corners < 1.0)


def test_path_graph_file(tmp_path):
    (tmp_path / "g.txt").write_text("2\n1 1 1\n1 1 0\n")
    g = load_graph(tmp_path / "g.txt")
    assert g.n_elements == 2 and g.n_edges == 1


def test_graph_file_roundtrip(tmp_path):
    g, _ = build_cartesian(CartesianMeshSpec(2, 1, 1))
    write_graph(g, tmp_path / "g.txt")
    assert load_graph(tmp_path / "g.txt") == g


def test_one_way_edge_rejected(tmp_path):
    (tmp_path / "g.txt").write_text("3\n1 1 1\n1 2 0 2\n1 0\n")
    with pytest.raises(GraphError, match="asymmetric adjacency at element 1"):
        load_graph(tmp_path / "g.txt")


def test_malformed_file(tmp_path):
    (tmp_path / "g.txt").write_text("2\n1 3 1\n1 1 0\n")
    with pytest.raises(GraphError, match="malformed"):
        load_graph(tmp_path / "g.txt")


def test_disconnected_rejected():
    with pytest.raises(GraphError, match="disconnected"):
        ElementGraph([[], []], [1, 1])


def test_is_connected_subset():
    g, _ = build_cartesian(CartesianMeshSpec(1, 2))
    assert is_connected(g, [0, 1])
    assert not is_connected(g, [0, 2])


def test_mesh_spec_validation():
    with pytest.raises(ValueError):
        CartesianMeshSpec(4, 1)
    with pytest.raises(ValueError):
        CartesianMeshSpec(2, 1, lower=(0.0, 0.0), upper=(0.0, 1.0))
