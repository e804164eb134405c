"""Dense tensors with tape-based reverse-mode automatic differentiation.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

Every tensor wraps a float64 numpy array. Operations are looked up by name in
the ``OPS`` registry; while a :class:`Tape` is active, each operation whose
inputs require gradients is appended to it, and :meth:`Tape.backward` replays
the entries in reverse order.

Example:
    with Tape() as tape:
        loss = tensor_sum(square(x))
    grads = tape.backward(loss, wrt=[x])
"""

import contextvars
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import expit

from vgnn.errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "vgnn_active_tape", default=None
)


class Tensor:
    """Dense real-valued tensor in double precision."""

    # Keep numpy from broadcasting over Tensor objects in mixed expressions.
    __array_ufunc__ = None

    def __init__(self, values: Any, requires_grad: bool = False, name: Optional[str] = None):
        """Initialize tensor.

        Args:
            values: Array-like data, copied into a float64 array
            requires_grad: Whether gradients should be tracked through this tensor
            name: Optional label used in diagnostics and checkpoints
        """
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, values: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Tensor sharing ``values`` instead of copying them.

        Used for fresh operation outputs that nothing else references.
        """
        tensor = cls.__new__(cls)
        tensor.values = np.asarray(values, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a constant as a tensor that does not require gradients."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


@dataclass(frozen=True)
class OpRule:
    """Forward and local-gradient rules of one named operation.

    ``forward(*values, **attrs)`` returns the output array.
    ``backward(grad, out, *values, **attrs)`` returns one gradient (or None)
    per input. ``check(*shapes, **attrs)`` raises ShapeError on bad inputs.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]
    check: Optional[Callable[..., None]] = None


OPS: Dict[str, OpRule] = {}


def register_op(
    name: str,
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]],
    check: Optional[Callable[..., None]] = None,
) -> OpRule:
    """Register an operation rule under ``name``, replacing any previous rule."""
    rule = OpRule(name=name, forward=forward, backward=backward, check=check)
    OPS[name] = rule
    return rule


@dataclass
class TapeEntry:
    """One recorded operation: its rule, input and output tensors, attributes."""

    rule: OpRule
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def leaves(self) -> List[Tensor]:
        """Trainable tensors consumed by recorded operations but produced by none."""
        produced = {id(entry.output) for entry in self.entries}
        seen = set()
        found = []
        for entry in self.entries:
            for tensor in entry.inputs:
                key = id(tensor)
                if tensor.requires_grad and key not in produced and key not in seen:
                    seen.add(key)
                    found.append(tensor)
        return found

    def backward(
        self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None
    ) -> Dict[Tensor, np.ndarray]:
        """Compute d(loss)/d(leaf) by replaying the tape in reverse.

        Args:
            loss: Scalar tensor produced on this tape
            wrt: Leaves to report; defaults to every trainable leaf on the tape.
                Leaves not connected to the loss receive zero gradient.

        Returns:
            Mapping from leaf tensor to gradient array of the same shape
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for entry in reversed(self.entries):
            grad_out = grads.pop(id(entry.output), None)
            if grad_out is None:
                continue
            input_grads = entry.rule.backward(
                grad_out,
                entry.output.values,
                *[tensor.values for tensor in entry.inputs],
                **entry.attrs,
            )
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                # Accumulated arrays may be shared between entries; never update in place.
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.asarray(grad, dtype=np.float64)

        targets = list(wrt) if wrt is not None else self.leaves()
        result: Dict[Tensor, np.ndarray] = {}
        for leaf in targets:
            grad = grads.get(id(leaf))
            result[leaf] = grad.reshape(leaf.shape) if grad is not None else np.zeros(leaf.shape)
        return result


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def forward_op(name: str, *inputs: ArrayLike, **attrs: Any) -> Tensor:
    """Apply the registered operation ``name`` and record it on the active tape."""
    rule = OPS.get(name)
    if rule is None:
        raise KeyError(f"Unknown operation: {name}")

    tensors = tuple(as_tensor(value) for value in inputs)
    if rule.check is not None:
        rule.check(*[tensor.shape for tensor in tensors], **attrs)

    out_values = rule.forward(*[tensor.values for tensor in tensors], **attrs)
    requires_grad = any(tensor.requires_grad for tensor in tensors)
    output = Tensor.wrap(out_values, requires_grad=requires_grad)

    tape = _ACTIVE_TAPE.get()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(rule=rule, inputs=tensors, output=output, attrs=dict(attrs)))
    return output


# ----------------------------------------------------------------------------
# Shape checks
# ----------------------------------------------------------------------------


def _check_broadcast(name: str) -> Callable[..., None]:
    def check(a: Tuple[int, ...], b: Tuple[int, ...], **attrs) -> None:
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise ShapeError(f"{name}: shape mismatch {a} vs {b}") from None

    return check


def _check_matmul(a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul: shape mismatch {a} vs {b}")


def _check_2d(name: str) -> Callable[..., None]:
    def check(a: Tuple[int, ...], **attrs) -> None:
        if len(a) != 2:
            raise ShapeError(f"{name}: expected a matrix, got shape {a}")

    return check


def _check_broadcast_all(name: str) -> Callable[..., None]:
    def check(*shapes: Tuple[int, ...], **attrs) -> None:
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(f"{name}: shape mismatch {' vs '.join(map(str, shapes))}") from None

    return check


def _check_linear(x: Tuple[int, ...], w: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    if len(x) != 2 or len(w) != 2 or x[1] != w[1] or b != (w[0],):
        raise ShapeError(f"linear: input {x}, weight {w} and bias {b} do not fit")


def _check_incidence(name: str, matrix: sparse.spmatrix, n_rows: int, n_index: int) -> None:
    if matrix.shape != (n_rows, n_index):
        raise ShapeError(f"{name}: incidence matrix {matrix.shape}, expected {(n_rows, n_index)}")


def _check_gather(a: Tuple[int, ...], index: np.ndarray, matrix: sparse.spmatrix) -> None:
    if len(a) != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {a}")
    if index.size and (index.min() < 0 or index.max() >= a[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a}")
    _check_incidence("gather_rows", matrix, a[0], index.size)


def _check_scatter(
    a: Tuple[int, ...], index: np.ndarray, n_rows: int, matrix: sparse.spmatrix
) -> None:
    if len(a) != 2 or index.shape != (a[0],):
        raise ShapeError(f"scatter_add: shape mismatch {a} vs index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter_add: index out of range for {n_rows} rows")
    _check_incidence("scatter_add", matrix, n_rows, index.size)


def _check_edge_linear(
    v: Tuple[int, ...],
    e: Tuple[int, ...],
    w: Tuple[int, ...],
    b: Tuple[int, ...],
    senders: np.ndarray,
    receivers: np.ndarray,
    send_matrix: sparse.spmatrix,
    receive_matrix: sparse.spmatrix,
) -> None:
    if len(v) != 2 or len(e) != 2 or len(w) != 2:
        raise ShapeError(f"edge_linear: expected matrices, got {v}, {e}, {w}")
    if w[1] != 2 * v[1] + e[1] or b != (w[0],):
        raise ShapeError(
            f"edge_linear: weight {w} and bias {b} do not fit node width {v[1]}, edge width {e[1]}"
        )
    if senders.shape != (e[0],) or receivers.shape != (e[0],):
        raise ShapeError(f"edge_linear: {e[0]} edges but {senders.shape[0]} senders")
    _check_incidence("edge_linear", send_matrix, v[0], e[0])
    _check_incidence("edge_linear", receive_matrix, v[0], e[0])


def _check_concat(*shapes: Tuple[int, ...], axis: int = 1) -> None:
    first = shapes[0]
    for other in shapes[1:]:
        if len(other) != len(first) or any(
            x != y for k, (x, y) in enumerate(zip(first, other)) if k != axis % len(first)
        ):
            raise ShapeError(f"concat: shape mismatch {first} vs {other}")


# ----------------------------------------------------------------------------
# Rules
# ----------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


register_op(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    _check_broadcast("add"),
)
register_op(
    "sub",
    lambda a, b: a - b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    _check_broadcast("sub"),
)
register_op(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    _check_broadcast("mul"),
)
register_op(
    "div",
    lambda a, b: a / b,
    lambda g, out, a, b: (
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * a / (b * b), b.shape),
    ),
    _check_broadcast("div"),
)
register_op(
    "logaddexp",
    np.logaddexp,
    lambda g, out, a, b: (
        _unbroadcast(g * np.exp(a - out), a.shape),
        _unbroadcast(g * np.exp(b - out), b.shape),
    ),
    _check_broadcast("logaddexp"),
)
register_op("neg", lambda a: -a, lambda g, out, a: (-g,))
register_op(
    "matmul",
    lambda a, b: a @ b,
    lambda g, out, a, b: (g @ b.T, a.T @ g),
    _check_matmul,
)
register_op("transpose", lambda a: a.T.copy(), lambda g, out, a: (g.T,), _check_2d("transpose"))


def _swish_backward(g, out, x):
    s = expit(x)
    return (g * (s + x * s * (1.0 - s)),)


register_op("swish", lambda x: x * expit(x), _swish_backward)
register_op("sigmoid", expit, lambda g, out, x: (g * out * (1.0 - out),))
register_op("softplus", lambda x: np.logaddexp(0.0, x), lambda g, out, x: (g * expit(x),))
register_op("log", np.log, lambda g, out, x: (g / x,))
register_op("exp", np.exp, lambda g, out, x: (g * out,))
register_op("square", np.square, lambda g, out, x: (2.0 * x * g,))


def _sum_forward(x, axis=None):
    return np.sum(x, axis=axis)


def _sum_backward(g, out, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


register_op("sum", _sum_forward, _sum_backward)


def incidence_matrix(index: np.ndarray, n_rows: int) -> sparse.csr_matrix:
    """Sparse (n_rows x len(index)) matrix with a one at (index[k], k).

    Multiplying it with a row-stacked array sums row k into row ``index[k]``.

    Raises:
        ShapeError: If an index falls outside 0..n_rows-1
    """
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"index out of range for {n_rows} rows")
    columns = np.arange(index.size)
    return sparse.csr_matrix(
        (np.ones(index.size), (index, columns)), shape=(n_rows, index.size)
    )


register_op(
    "gather_rows",
    lambda a, index, matrix: a[index],
    lambda g, out, a, index, matrix: (matrix @ g,),
    _check_gather,
)
register_op(
    "scatter_add",
    lambda a, index, n_rows, matrix: matrix @ a,
    lambda g, out, a, index, n_rows, matrix: (g[index],),
    _check_scatter,
)


def _linear_backward(g, out, x, w, b):
    return g @ w, g.T @ x, g.sum(axis=0)


register_op("linear", lambda x, w, b: x @ w.T + b, _linear_backward, _check_linear)


def _edge_blocks(w, node_width):
    return w[:, :node_width], w[:, node_width : 2 * node_width], w[:, 2 * node_width :]


def _edge_linear_forward(v, e, w, b, senders, receivers, send_matrix, receive_matrix):
    w_recv, w_send, w_edge = _edge_blocks(w, v.shape[1])
    return (v @ w_recv.T)[receivers] + (v @ w_send.T)[senders] + e @ w_edge.T + b


def _edge_linear_backward(g, out, v, e, w, b, senders, receivers, send_matrix, receive_matrix):
    w_recv, w_send, w_edge = _edge_blocks(w, v.shape[1])
    g_recv = receive_matrix @ g
    g_send = send_matrix @ g
    grad_v = g_recv @ w_recv + g_send @ w_send
    grad_w = np.hstack([g_recv.T @ v, g_send.T @ v, g.T @ e])
    return grad_v, g @ w_edge, grad_w, g.sum(axis=0)


register_op("edge_linear", _edge_linear_forward, _edge_linear_backward, _check_edge_linear)


def _log_normal_forward(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * z * z - HALF_LOG_2PI - np.log(sigma)


def _log_normal_backward(g, out, x, mu, sigma):
    z = (x - mu) / sigma
    dx = -g * z / sigma
    return (
        _unbroadcast(dx, x.shape),
        _unbroadcast(-dx, mu.shape),
        _unbroadcast(g * (z * z - 1.0) / sigma, sigma.shape),
    )


register_op(
    "log_normal", _log_normal_forward, _log_normal_backward, _check_broadcast_all("log_normal")
)


def _concat_backward(g, out, *parts, axis=1):
    bounds = np.cumsum([part.shape[axis] for part in parts])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


register_op(
    "concat",
    lambda *parts, axis=1: np.concatenate(parts, axis=axis),
    _concat_backward,
    _check_concat,
)


# ----------------------------------------------------------------------------
# Public operation helpers
# ----------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("add", a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("sub", a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("mul", a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("div", a, b)


def neg(a: ArrayLike) -> Tensor:
    return forward_op("neg", a)


def logaddexp(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("logaddexp", a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("matmul", a, b)


def transpose(a: ArrayLike) -> Tensor:
    return forward_op("transpose", a)


def swish(x: ArrayLike) -> Tensor:
    """x * sigmoid(x)."""
    return forward_op("swish", x)


def sigmoid(x: ArrayLike) -> Tensor:
    return forward_op("sigmoid", x)


def softplus(x: ArrayLike) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    return forward_op("softplus", x)


def log(x: ArrayLike) -> Tensor:
    return forward_op("log", x)


def exp(x: ArrayLike) -> Tensor:
    return forward_op("exp", x)


def square(x: ArrayLike) -> Tensor:
    return forward_op("square", x)


def tensor_sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return forward_op("sum", x, axis=axis)


def gather_rows(
    a: ArrayLike, index: np.ndarray, matrix: Optional[sparse.spmatrix] = None
) -> Tensor:
    """Select rows ``a[index]``; repeated indices are allowed.

    ``matrix`` is ``incidence_matrix(index, len(a))``, built when not given.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if matrix is None:
        if a.ndim != 2:
            raise ShapeError(f"gather_rows: expected a matrix, got shape {a.shape}")
        matrix = incidence_matrix(index, a.shape[0])
    return forward_op("gather_rows", a, index=index, matrix=matrix)


def scatter_add(
    a: ArrayLike, index: np.ndarray, n_rows: int, matrix: Optional[sparse.spmatrix] = None
) -> Tensor:
    """Sum row k of ``a`` into output row ``index[k]``.

    ``matrix`` is ``incidence_matrix(index, n_rows)``, built when not given.
    """
    index = np.asarray(index, dtype=np.int64)
    if matrix is None:
        matrix = incidence_matrix(index, n_rows)
    return forward_op("scatter_add", a, index=index, n_rows=n_rows, matrix=matrix)


def linear(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """x @ weight^T + bias as one operation."""
    return forward_op("linear", x, weight, bias)


def edge_linear(
    nodes: ArrayLike,
    edges: ArrayLike,
    weight: ArrayLike,
    bias: ArrayLike,
    senders: np.ndarray,
    receivers: np.ndarray,
    send_matrix: Optional[sparse.spmatrix] = None,
    receive_matrix: Optional[sparse.spmatrix] = None,
) -> Tensor:
    """Dense layer on rows [v_recv, v_send, e] of every edge.

    Equal to ``linear(concat([nodes[receivers], nodes[senders], edges]), weight, bias)``
    without materialising the gathered rows. The matrices are the incidence
    matrices of ``senders`` and ``receivers``.
    """
    nodes = as_tensor(nodes)
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if send_matrix is None:
        send_matrix = incidence_matrix(senders, nodes.shape[0])
    if receive_matrix is None:
        receive_matrix = incidence_matrix(receivers, nodes.shape[0])
    return forward_op(
        "edge_linear",
        nodes,
        edges,
        weight,
        bias,
        senders=senders,
        receivers=receivers,
        send_matrix=send_matrix,
        receive_matrix=receive_matrix,
    )


def log_normal(x: ArrayLike, mu: ArrayLike, sigma: ArrayLike) -> Tensor:
    """Elementwise log N(x; mu, sigma^2) with broadcasting."""
    return forward_op("log_normal", x, mu, sigma)


def concat(parts: Sequence[ArrayLike], axis: int = 1) -> Tensor:
    return forward_op("concat", *parts, axis=axis)
