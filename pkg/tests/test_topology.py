import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonec.topology import (
    CombinationMatrices,
    ConnectivityError,
    NetworkTopology,
    TopologyError,
    build_random_topology,
    is_connected,
    read_edge_list,
    topology_from_edges,
    uniform_weights,
    validate,
    write_edge_list,
)


def test_random_topology_has_requested_mean_degree():
    top = build_random_topology(16, 4, seed=3)
    assert top.n_nodes == 16
    assert len(top.edges()) == 32  # 16 * 4 / 2
    assert top.degrees().mean() == pytest.approx(4.0)
    assert is_connected(top.adjacency)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), deg=st.integers(1, 29), seed=st.integers(0, 2**32))
def test_random_topology_is_valid(n, deg, seed):
    deg = min(deg, n - 1)
    top = build_random_topology(n, deg, seed)
    adj = top.adjacency
    assert np.array_equal(adj, adj.T)
    assert adj.diagonal().all()
    assert is_connected(adj)
    assert validate(uniform_weights(top), top) == []


def test_same_seed_same_graph():
    a = build_random_topology(12, 3, 99)
    b = build_random_topology(12, 3, 99)
    assert np.array_equal(a.adjacency, b.adjacency)


def test_single_node():
    top = build_random_topology(1, 4, 0)
    assert top.neighborhoods == ((0,),)
    w = uniform_weights(top)
    assert w.a[0, 0] == 1.0


def test_bad_degree():
    with pytest.raises(TopologyError):
        build_random_topology(5, 5, 0)


def test_disconnected_graph_rejected():
    with pytest.raises(ConnectivityError):
        topology_from_edges(4, [(0, 1), (2, 3)])


def test_asymmetric_adjacency_rejected():
    adj = np.eye(3, dtype=bool)
    adj[0, 1] = adj[1, 2] = adj[2, 1] = True
    with pytest.raises(TopologyError, match="symmetric"):
        NetworkTopology(adj)


def test_uniform_weights_on_path():
    top = topology_from_edges(3, [(0, 1), (1, 2)])
    w = uniform_weights(top)
    np.testing.assert_allclose(w.a[:, 1], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(w.a[:, 0], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(w.a.sum(axis=0), 1.0, atol=1e-15)
    assert top.neighborhoods[1] == (0, 1, 2)


def test_validate_reports_each_violation():
    top = topology_from_edges(3, [(0, 1), (1, 2)])
    a = uniform_weights(top).a.copy()
    a[2, 0] = 0.1  # non-edge
    c = uniform_weights(top).c.copy()
    c[0, 1] = -0.2
    kinds = {(v.matrix, v.kind) for v in validate(CombinationMatrices(a, c), top)}
    assert ("a", "support") in kinds
    assert ("a", "column_sum") in kinds
    assert ("c", "negative") in kinds
    assert ("c", "column_sum") in kinds


def test_validate_shape():
    top = topology_from_edges(2, [(0, 1)])
    bad = CombinationMatrices(np.ones((3, 3)), np.full((2, 2), 0.5))
    assert [v.kind for v in validate(bad, top)] == ["shape"]


def test_edge_list_roundtrip(tmp_path):
    top = build_random_topology(9, 3, 5)
    path = tmp_path / "g.txt"
    write_edge_list(top, path)
    text = path.read_text()
    assert text.startswith("# n_nodes 9\n")
    assert np.array_equal(read_edge_list(path).adjacency, top.adjacency)


def test_edge_list_rejects_zero_index(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0 1\n")
    with pytest.raises(TopologyError, match="1-based"):
        read_edge_list(path)
