"""Tests for the tensor and tape module."""

import numpy as np
import pytest

from vgnn.errors import ShapeError
from vgnn.tensor import (
    OPS,
    Tape,
    Tensor,
    active_tape,
    concat,
    edge_linear,
    forward_op,
    gather_rows,
    incidence_matrix,
    linear,
    log_normal,
    logaddexp,
    matmul,
    scatter_add,
    softplus,
    square,
    swish,
    tensor_sum,
)


def test_tensor_stores_float64_copy():
    """Test that tensors copy their input as float64."""
    source = np.array([1, 2, 3])
    t = Tensor(source)
    source[0] = 10
    assert t.values.dtype == np.float64
    assert t.values.tolist() == [1.0, 2.0, 3.0]
    assert t.shape == (3,)
    assert not t.requires_grad


def test_operators_build_values():
    """Test operator overloads including reflected forms."""
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose((a + 1).values, [[2, 3], [4, 5]])
    assert np.allclose((1 - a).values, [[0, -1], [-2, -3]])
    assert np.allclose((2 * a).values, [[2, 4], [6, 8]])
    assert np.allclose((a / 2).values, [[0.5, 1], [1.5, 2]])
    assert np.allclose((-a).values, -a.values)
    assert np.allclose((a @ a).values, a.values @ a.values)
    assert np.allclose(a.T.values, a.values.T)


def test_ndarray_on_left_returns_tensor():
    """Test that numpy arrays do not swallow Tensor operands."""
    result = np.ones(2) * Tensor([2.0, 3.0])
    assert isinstance(result, Tensor)
    assert result.values.tolist() == [2.0, 3.0]


def test_item_requires_single_value():
    """Test item() on scalar and vector tensors."""
    assert Tensor(3.5).item() == 3.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_no_recording_without_tape():
    """Test that operations outside a tape are not recorded."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert active_tape() is None
    y = square(x)
    assert y.requires_grad
    with Tape() as tape:
        assert active_tape() is tape
        square(x)
    assert len(tape.entries) == 1
    assert active_tape() is None


def test_constant_ops_not_recorded():
    """Test that operations on constants are skipped by the tape."""
    with Tape() as tape:
        square(Tensor([1.0, 2.0]))
    assert tape.entries == []


def test_backward_of_sum_of_squares():
    """Test gradient of sum(x^2) is 2x."""
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(square(x))
    grads = tape.backward(loss)
    assert np.allclose(grads[x], [2.0, -4.0, 6.0])


def test_backward_accumulates_reused_tensor():
    """Test that a tensor used twice receives the sum of both contributions."""
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(x * x + x)
    grads = tape.backward(loss)
    assert np.allclose(grads[x], [5.0])


def test_backward_rejects_non_scalar_loss():
    """Test that backward requires a scalar."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = square(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unreached_leaf_gets_zero_gradient():
    """Test that leaves outside the loss graph receive zeros."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(square(x))
    grads = tape.backward(loss, wrt=[x, unused])
    assert np.array_equal(grads[unused], np.zeros((1, 2)))


def test_broadcast_gradient_is_summed():
    """Test that a broadcast bias receives the column sums."""
    x = Tensor(np.ones((3, 2)))
    b = Tensor([0.5, -0.5], requires_grad=True)
    weights = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    with Tape() as tape:
        loss = tensor_sum((x + b) * weights)
    grads = tape.backward(loss)
    assert np.allclose(grads[b], [9.0, 12.0])


def test_matmul_shape_check():
    """Test that mismatched matmul shapes raise ShapeError."""
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_shape_check():
    """Test that incompatible elementwise shapes raise ShapeError."""
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_softplus_is_stable_for_large_inputs():
    """Test softplus at extreme arguments."""
    out = softplus(Tensor([-800.0, 0.0, 800.0])).values
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(np.log(2.0))
    assert out[2] == pytest.approx(800.0)


def test_swish_values():
    """Test swish(0) = 0 and swish(x) ~ x for large x."""
    out = swish(Tensor([0.0, 50.0])).values
    assert out[0] == 0.0
    assert out[1] == pytest.approx(50.0)


def test_logaddexp_matches_numpy():
    """Test logaddexp forward against numpy."""
    a = np.array([-1000.0, 0.0, 3.0])
    b = np.array([-1001.0, 1.0, -2.0])
    assert np.allclose(logaddexp(Tensor(a), Tensor(b)).values, np.logaddexp(a, b))


def test_gather_and_scatter():
    """Test gather_rows and scatter_add with repeated indices."""
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    index = np.array([1, 1, 0])
    with Tape() as tape:
        picked = gather_rows(a, index)
        summed = scatter_add(picked, np.array([0, 0, 1]), 2)
        loss = tensor_sum(summed)
    assert picked.values.tolist() == [[3, 4], [3, 4], [1, 2]]
    assert summed.values.tolist() == [[6, 8], [1, 2]]
    grads = tape.backward(loss)
    assert grads[a].tolist() == [[1, 1], [2, 2]]


def test_scatter_index_out_of_range():
    """Test that scatter_add rejects indices past n_rows."""
    with pytest.raises(ShapeError):
        scatter_add(Tensor(np.ones((2, 1))), np.array([0, 3]), 2)


def test_concat_splits_gradient():
    """Test that concat routes gradient slices back to each part."""
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    weights = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    with Tape() as tape:
        loss = tensor_sum(concat([a, b]) * weights)
    grads = tape.backward(loss)
    assert grads[a].tolist() == [[1.0], [4.0]]
    assert grads[b].tolist() == [[2.0, 3.0], [5.0, 6.0]]


def test_sum_along_axis():
    """Test sum with an axis and its gradient."""
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        rows = tensor_sum(x, axis=1)
        loss = tensor_sum(rows * np.array([1.0, 10.0]))
    assert rows.values.tolist() == [3.0, 12.0]
    assert tape.backward(loss)[x].tolist() == [[1, 1, 1], [10, 10, 10]]


def test_unknown_op():
    """Test that an unregistered operation name raises KeyError."""
    with pytest.raises(KeyError):
        forward_op("no_such_op", Tensor(1.0))


def test_registry_lists_rules():
    """Test that every rule used by the model is registered."""
    for name in ("add", "mul", "matmul", "swish", "softplus", "scatter_add", "concat", "sum"):
        assert name in OPS


def test_operation_outputs_are_not_copied_again():
    """Test that wrap shares its array and the constructor copies."""
    values = np.ones(3)
    assert Tensor.wrap(values).values is values
    assert Tensor(values).values is not values


def test_incidence_matrix_layout():
    """Test ones at (index[k], k) and rejection of out-of-range rows."""
    matrix = incidence_matrix(np.array([2, 0, 2]), 3).toarray()
    assert matrix.tolist() == [[0, 1, 0], [0, 0, 0], [1, 0, 1]]
    with pytest.raises(ShapeError):
        incidence_matrix(np.array([0, 3]), 3)


def test_scatter_add_is_linear():
    """Test scatter(a x + b y) = a scatter(x) + b scatter(y)."""
    rng = np.random.default_rng(0)
    index = rng.integers(0, 5, size=40)
    x = rng.standard_normal((40, 3))
    y = rng.standard_normal((40, 3))
    combined = scatter_add(Tensor(2.5 * x - 0.75 * y), index, 5).values
    separate = 2.5 * scatter_add(Tensor(x), index, 5).values - 0.75 * scatter_add(
        Tensor(y), index, 5
    ).values
    assert np.max(np.abs(combined - separate)) <= 1e-12
    expected = np.zeros((5, 3))
    for k, row in zip(index, x):
        expected[k] += row
    assert np.allclose(scatter_add(Tensor(x), index, 5).values, expected, atol=1e-12)


def test_linear_matches_matmul():
    """Test the fused layer against x @ W^T + b and its gradients."""
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    with Tape() as tape:
        out = linear(x, w, b)
        loss = tensor_sum(out)
    assert np.allclose(out.values, x.values @ w.values.T + b.values)
    grads = tape.backward(loss)
    assert np.allclose(grads[x], np.ones((4, 2)) @ w.values)
    assert np.allclose(grads[w], np.ones((2, 4)) @ x.values)
    assert grads[b].tolist() == [4.0, 4.0]
    with pytest.raises(ShapeError):
        linear(x, Tensor(np.ones((2, 4))), b)


def test_edge_linear_matches_gathered_concat():
    """Test the edge layer against the layer applied to [v_recv, v_send, e]."""
    rng = np.random.default_rng(2)
    nodes = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    edges = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    senders = np.array([0, 1, 1, 2, 3, 3])
    receivers = np.array([1, 0, 2, 1, 3, 0])
    weights = rng.standard_normal((6, 5))

    with Tape() as tape:
        fused = edge_linear(nodes, edges, w, b, senders, receivers)
        fused_loss = tensor_sum(fused * weights)
    with Tape() as reference_tape:
        rows = concat([gather_rows(nodes, receivers), gather_rows(nodes, senders), edges])
        reference = linear(rows, w, b)
        reference_loss = tensor_sum(reference * weights)

    assert np.allclose(fused.values, reference.values, atol=1e-12)
    fused_grads = tape.backward(fused_loss, wrt=[nodes, edges, w, b])
    reference_grads = reference_tape.backward(reference_loss, wrt=[nodes, edges, w, b])
    for leaf in (nodes, edges, w, b):
        assert np.allclose(fused_grads[leaf], reference_grads[leaf], atol=1e-12)


def test_edge_linear_rejects_wrong_width():
    """Test that the weight must span 2 * node width + edge width columns."""
    with pytest.raises(ShapeError):
        edge_linear(
            Tensor(np.ones((2, 2))),
            Tensor(np.ones((1, 1))),
            Tensor(np.ones((3, 4))),
            Tensor(np.zeros(3)),
            np.array([0]),
            np.array([1]),
        )


def test_log_normal_values_and_broadcast():
    """Test log N(x; mu, sigma^2) against the closed form with a row of scales."""
    x = np.array([[0.0, 1.0], [-2.0, 0.5]])
    mu = np.array([0.5, -0.5])
    sigma = np.array([[1.0, 2.0]])
    expected = -0.5 * ((x - mu) / sigma) ** 2 - 0.5 * np.log(2 * np.pi) - np.log(sigma)
    out = log_normal(Tensor(x), Tensor(mu), Tensor(sigma)).values
    assert out.shape == (2, 2)
    assert np.allclose(out, expected, atol=1e-14)
    with pytest.raises(ShapeError):
        log_normal(Tensor(x), Tensor(np.zeros(3)), Tensor(sigma))
