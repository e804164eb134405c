"""Tests for dense layers and MLP blocks."""

import numpy as np
import pytest

from vgnn.errors import ShapeError
from vgnn.graph import build_graph, structured_quad_mesh
from vgnn.layers import (
    DenseParams,
    MlpBlock,
    dense,
    edge_mlp_forward,
    glorot_uniform,
    mlp_forward,
)
from vgnn.tensor import Tensor


def test_glorot_bounds():
    """Test that Glorot-uniform weights lie within the limit."""
    w = glorot_uniform(30, 20, np.random.default_rng(0))
    assert w.shape == (30, 20)
    assert np.abs(w).max() <= np.sqrt(6.0 / 50)


def test_dense_matches_numpy():
    """Test dense against x @ W^T + b."""
    rng = np.random.default_rng(1)
    layer = DenseParams.init(3, 4, rng)
    layer.b.values[:] = [1.0, 2.0, 3.0, 4.0]
    x = rng.standard_normal((5, 3))
    out = dense(Tensor(x), layer)
    assert np.allclose(out.values, x @ layer.W.values.T + layer.b.values)


def test_mlp_block_widths_and_activations():
    """Test MlpBlock construction."""
    block = MlpBlock.init([5, 8, 8, 3], np.random.default_rng(0), activate_output=False)
    assert block.in_width == 5
    assert block.out_width == 3
    assert block.activations == [True, True, False]
    assert len(block.named_parameters("enc")) == 6
    assert "enc.2.W" in block.named_parameters("enc")


def test_mlp_zero_input_zero_bias():
    """Test that zero features and zero biases give zero embeddings."""
    block = MlpBlock.init([5, 8, 8], np.random.default_rng(0))
    out = mlp_forward(block, Tensor(np.zeros((4, 5))))
    assert np.array_equal(out.values, np.zeros((4, 8)))


def test_mlp_row_permutation_equivariance():
    """Test that the MLP acts on each row independently."""
    rng = np.random.default_rng(3)
    block = MlpBlock.init([4, 6, 2], rng)
    x = rng.standard_normal((7, 4))
    perm = rng.permutation(7)
    out = mlp_forward(block, Tensor(x)).values
    out_perm = mlp_forward(block, Tensor(x[perm])).values
    assert np.allclose(out[perm], out_perm, atol=1e-12)


def test_mlp_width_mismatch():
    """Test that a wrong input width raises ShapeError."""
    block = MlpBlock.init([4, 6, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(block, Tensor(np.zeros((3, 5))))


def test_validate_detects_broken_chain():
    """Test MlpBlock.validate on inconsistent layers."""
    rng = np.random.default_rng(0)
    block = MlpBlock(
        layers=[DenseParams.init(3, 4, rng), DenseParams.init(5, 2, rng)],
        activations=[True, False],
    )
    with pytest.raises(ShapeError):
        block.validate()


def test_edge_mlp_matches_concatenated_rows():
    """Test the edge block against the plain block on [v_recv, v_send, e]."""
    rng = np.random.default_rng(4)
    graph = build_graph(structured_quad_mesh(3, 3))
    block = MlpBlock.init([7, 5, 5, 3], rng, activate_output=False)
    V = rng.standard_normal((graph.n_nodes, 2))
    E = rng.standard_normal((graph.n_edges, 3))
    rows = np.hstack([V[graph.receivers], V[graph.senders], E])
    expected = mlp_forward(block, Tensor(rows)).values
    out = edge_mlp_forward(block, Tensor(V), Tensor(E), graph).values
    assert np.allclose(out, expected, atol=1e-12)
    with pytest.raises(ShapeError):
        edge_mlp_forward(block, Tensor(V), Tensor(E[:, :2]), graph)
