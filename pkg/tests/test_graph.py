"""Tests for meshes and graph construction."""

import dataclasses

import numpy as np
import pytest

from vgnn.errors import MeshError, ShapeError
from vgnn.graph import (
    Simulation,
    assemble_features,
    batch_graphs,
    build_graph,
    make_mesh,
    node_features,
    structured_quad_mesh,
    undirected_edges,
)


def _single_quad(spacing: float = 1.0):
    coords = spacing * np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return make_mesh(coords, [[0, 1, 2, 3]], gamma_u=[1, 0, 0, 1])


def test_structured_mesh_counts():
    """Test node, side and edge counts of a 25x25 grid."""
    mesh = structured_quad_mesh(25, 25)
    graph = build_graph(mesh)
    assert mesh.n_nodes == 625
    assert mesh.elements.shape == (576, 4)
    assert graph.n_undirected_edges == 1200
    assert graph.n_edges == 2 * 1200 + 625
    assert graph.n_undirected_with_self == 1825


def test_structured_mesh_boundaries():
    """Test that gamma_u is the left column and gamma_t the right column."""
    mesh = structured_quad_mesh(3, 2, lx=2.0, ly=1.0)
    assert mesh.boundary_nodes("gamma_u").tolist() == [0, 3]
    assert mesh.boundary_nodes("gamma_t").tolist() == [2, 5]
    assert np.allclose(mesh.coords[5], [2.0, 1.0])
    with pytest.raises(KeyError):
        mesh.boundary_nodes("gamma_x")


def test_single_element_graph():
    """Test the 4-node quad: 4 sides, 8 directed edges, 4 self-loops."""
    graph = build_graph(_single_quad())
    assert graph.n_undirected_edges == 4
    assert graph.n_edges == 12
    assert graph.senders[-4:].tolist() == [0, 1, 2, 3]
    assert graph.receivers[-4:].tolist() == [0, 1, 2, 3]
    assert np.array_equal(graph.edge_features[-4:], np.zeros((4, 3)))


def test_edge_features_are_relative_offsets():
    """Test edge features (dx, dy, |d|) for sides of length 0.04."""
    graph = build_graph(_single_quad(spacing=0.04))
    for k in range(graph.n_edges - 4):
        s, r = graph.senders[k], graph.receivers[k]
        expected = _single_quad(0.04).coords[r] - _single_quad(0.04).coords[s]
        assert np.allclose(graph.edge_features[k, :2], expected)
        assert graph.edge_features[k, 2] == pytest.approx(0.04)


def test_edges_are_symmetric():
    """Test that every directed edge has its reverse."""
    graph = build_graph(structured_quad_mesh(4, 3))
    pairs = set(zip(graph.senders.tolist(), graph.receivers.tolist()))
    for s, r in pairs:
        assert (r, s) in pairs


def test_shared_sides_counted_once():
    """Test that a side shared by two elements is one undirected edge."""
    mesh = structured_quad_mesh(3, 2)
    sides = undirected_edges(mesh)
    assert len(sides) == 7
    assert [1, 4] in sides.tolist()


def test_neighbors_include_self():
    """Test neighbourhood of a corner node."""
    graph = build_graph(_single_quad())
    assert graph.neighbors(0).tolist() == [0, 1, 3]


def test_dangling_element_index():
    """Test that an element referring to a missing node is rejected."""
    with pytest.raises(MeshError):
        make_mesh(np.zeros((3, 2)), [[0, 1, 2, 5]])


def test_isolated_node_has_only_self_loop():
    """Test a mesh with an unconnected node."""
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [5.0, 5.0]])
    graph = build_graph(make_mesh(coords, [[0, 1, 2, 3]]))
    assert graph.neighbors(4).tolist() == [4]


def test_node_features_layout():
    """Test rows (u, mean u, gamma_u flag)."""
    mesh = _single_quad()
    u = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [2.0, 2.0]])
    features = node_features(mesh, Simulation(u=u, y=np.ones((4, 1))))
    assert features.shape == (4, 5)
    assert np.allclose(features[:, :2], u)
    assert np.allclose(features[:, 2:4], [1.0, 1.0])
    assert features[:, 4].tolist() == [1.0, 0.0, 0.0, 1.0]


def test_node_features_reject_nan():
    """Test that NaN displacements are rejected."""
    mesh = _single_quad()
    u = np.zeros((4, 2))
    u[2, 1] = np.nan
    with pytest.raises(ValueError):
        node_features(mesh, Simulation(u=u, y=np.ones((4, 1))))


def test_simulation_row_mismatch():
    """Test that a simulation with the wrong node count is rejected."""
    with pytest.raises(ShapeError):
        node_features(_single_quad(), Simulation(u=np.zeros((3, 2)), y=np.zeros((3, 1))))


def test_batch_graphs_offsets_indices():
    """Test the disjoint union of two graphs."""
    mesh = _single_quad()
    sim = Simulation(u=np.zeros((4, 2)), y=np.zeros((4, 1)))
    g = assemble_features(mesh, sim)
    batch = batch_graphs([g, g])
    assert batch.n_nodes == 8
    assert batch.n_edges == 24
    assert batch.senders[12:].min() == 4
    assert batch.node_features.shape == (8, 5)
    assert batch.n_undirected_edges == 8


def test_batch_graphs_empty():
    """Test that batching nothing is an error."""
    with pytest.raises(ValueError):
        batch_graphs([])


def test_incidence_sums_incoming_edges():
    """Test that the receive matrix counts in-degree and send the out-degree."""
    graph = build_graph(_single_quad())
    incidence = graph.incidence
    assert incidence.receive.shape == (4, graph.n_edges)
    in_degree = np.bincount(graph.receivers, minlength=4)
    out_degree = np.bincount(graph.senders, minlength=4)
    assert np.asarray(incidence.receive.sum(axis=1)).ravel().tolist() == in_degree.tolist()
    assert np.asarray(incidence.send.sum(axis=1)).ravel().tolist() == out_degree.tolist()


def test_incidence_is_cached_across_feature_updates():
    """Test that attaching node features keeps the matrices of the topology."""
    mesh = _single_quad()
    graph = build_graph(mesh)
    first = graph.incidence
    assert graph.incidence is first
    sim = Simulation(u=np.ones((4, 2)), y=np.zeros((4, 1)))
    assert assemble_features(mesh, sim, graph).incidence is first


def test_incidence_rebuilt_for_new_edges():
    """Test that replacing the edge arrays invalidates the cached matrices."""
    graph = build_graph(_single_quad())
    first = graph.incidence
    flipped = dataclasses.replace(graph, senders=graph.receivers, receivers=graph.senders)
    assert flipped.incidence is not first
    assert (flipped.incidence.receive != first.send).nnz == 0


def _edge_set(graph):
    return set(zip(graph.senders.tolist(), graph.receivers.tolist()))


def test_relabelled_mesh_gives_permuted_graph():
    """Test that renumbering mesh nodes permutes features and edges alike."""
    mesh = structured_quad_mesh(4, 3)
    rng = np.random.default_rng(0)
    u = rng.standard_normal((mesh.n_nodes, 2))
    perm = rng.permutation(mesh.n_nodes)
    inverse = np.argsort(perm)
    relabelled = make_mesh(
        mesh.coords[perm], inverse[mesh.elements], mesh.gamma_u[perm], mesh.gamma_t[perm]
    )
    graph = assemble_features(mesh, Simulation(u=u, y=np.zeros((mesh.n_nodes, 1))))
    moved = assemble_features(relabelled, Simulation(u=u[perm], y=np.zeros((mesh.n_nodes, 1))))

    assert np.allclose(moved.node_features, graph.node_features[perm], atol=1e-12)
    mapped = {(int(inverse[s]), int(inverse[r])) for s, r in _edge_set(graph)}
    assert _edge_set(moved) == mapped

    rows = {
        (int(s), int(r)): f
        for s, r, f in zip(moved.senders, moved.receivers, moved.edge_features)
    }
    for s, r, f in zip(graph.senders, graph.receivers, graph.edge_features):
        assert np.allclose(rows[(int(inverse[s]), int(inverse[r]))], f, atol=1e-12)


def test_edge_features_ignore_translation():
    """Test that shifting every coordinate leaves the edge features unchanged."""
    mesh = structured_quad_mesh(3, 4, lx=2.0)
    shifted = make_mesh(mesh.coords + np.array([-7.5, 12.25]), mesh.elements, mesh.gamma_u)
    graph = build_graph(mesh)
    moved = build_graph(shifted)
    assert np.array_equal(graph.senders, moved.senders)
    assert np.array_equal(graph.receivers, moved.receivers)
    assert np.allclose(graph.edge_features, moved.edge_features, atol=1e-12)


def test_mean_columns_are_constant():
    """Test that the mean displacement columns repeat one value on every row."""
    mesh = structured_quad_mesh(5, 4)
    u = np.random.default_rng(3).standard_normal((mesh.n_nodes, 2))
    features = node_features(mesh, Simulation(u=u, y=np.zeros((mesh.n_nodes, 1))))
    mean = features[:, 2:4]
    assert np.all(mean == mean[0])
    assert np.allclose(mean[0], u.mean(axis=0), atol=1e-15)
