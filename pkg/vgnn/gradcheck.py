"""Finite-difference verification of the registered gradient rules.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

Each case builds a scalar loss from trainable leaf tensors. The tape
gradient is compared with central differences, entry by entry, using the
relative error |a - n| / max(|a|, |n|, floor). The floor is the smallest
gradient magnitude central differences resolve to the tolerance at the
case's loss value; entries below it are held to an absolute error of
tolerance * floor.

Besides the hand-written cases, every registered operation has a builder
in ``OP_CASES`` that draws random instances of it.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from vgnn.graph import Simulation, assemble_features, structured_quad_mesh
from vgnn.layers import DenseParams, dense
from vgnn.model import ModelConfig, init_model, sample_decoder
from vgnn.tensor import (
    Tape,
    Tensor,
    add,
    concat,
    div,
    edge_linear,
    exp,
    gather_rows,
    linear,
    log,
    log_normal,
    logaddexp,
    matmul,
    mul,
    neg,
    scatter_add,
    sigmoid,
    softplus,
    square,
    sub,
    swish,
    tensor_sum,
    transpose,
)
from vgnn.training import Batch, elbo_loss, nll_loss
from vgnn.variational import (
    ScaleMixturePrior,
    VariationalParams,
    log_posterior,
    log_prior,
    sample_weights,
    variational_linear,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-6
ABSOLUTE_FLOOR = 1e-8
ROUNDING_FACTOR = 100.0
N_INSTANCES = 100


@dataclass
class GradCheckCase:
    """Named loss closure over its trainable leaves."""

    name: str
    leaves: List[Tensor]
    loss: Callable[[], Tensor]


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    n_checked: int
    passed: bool
    seconds: float = 0.0


def resolution_floor(
    loss_value: float, step: float = STEP, tolerance: float = TOLERANCE
) -> float:
    """Smallest gradient magnitude central differences resolve to ``tolerance``.

    Rounding in the loss contributes about eps * |f| / step to a central
    difference and truncation about step^2.
    """
    eps = np.finfo(np.float64).eps
    noise = ROUNDING_FACTOR * eps * max(1.0, abs(loss_value)) / step + step ** 2
    return max(ABSOLUTE_FLOOR, noise / tolerance)


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = ABSOLUTE_FLOOR
) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(
    loss: Callable[[], Tensor], leaf: Tensor, step: float = STEP
) -> np.ndarray:
    """Central-difference gradient of ``loss`` with respect to ``leaf``."""
    grad = np.zeros(leaf.shape)
    flat = leaf.values.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        plus = loss().item()
        flat[k] = original - step
        minus = loss().item()
        flat[k] = original
        out[k] = (plus - minus) / (2.0 * step)
    return grad


def check_gradients(
    case: GradCheckCase, step: float = STEP, tolerance: float = TOLERANCE
) -> GradCheckResult:
    """Compare tape and finite-difference gradients for every leaf of ``case``."""
    start = time.perf_counter()
    if not case.leaves:
        return GradCheckResult(case.name, 0.0, 0, True)

    with Tape() as tape:
        loss = case.loss()
    analytic = tape.backward(loss, wrt=case.leaves)
    floor = resolution_floor(loss.item(), step, tolerance)

    worst = 0.0
    n_checked = 0
    for leaf in case.leaves:
        numeric = numerical_gradient(case.loss, leaf, step)
        errors = relative_error(analytic[leaf], numeric, floor)
        worst = max(worst, float(errors.max(initial=0.0)))
        n_checked += leaf.size
    return GradCheckResult(
        name=case.name,
        max_error=worst,
        n_checked=n_checked,
        passed=worst <= tolerance,
        seconds=time.perf_counter() - start,
    )


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(out * weights)


def default_cases(seed: int = 0) -> List[GradCheckCase]:
    """One case per layer type and loss term, plus a small complete model."""
    rng = np.random.default_rng(seed)
    cases: List[GradCheckCase] = []

    x = _leaf(rng, 4, 3)
    layer = DenseParams(W=_leaf(rng, 5, 3), b=_leaf(rng, 5))
    r5 = rng.standard_normal((4, 5))
    cases.append(
        GradCheckCase("dense", [x, layer.W, layer.b], lambda: _weighted(dense(x, layer), r5))
    )

    a = _leaf(rng, 4, 3, scale=2.0)
    r3 = rng.standard_normal((4, 3))
    cases.append(GradCheckCase("swish", [a], lambda: _weighted(swish(a), r3)))
    cases.append(GradCheckCase("softplus", [a], lambda: _weighted(softplus(a), r3)))
    cases.append(GradCheckCase("sigmoid", [a], lambda: _weighted(sigmoid(a), r3)))

    b = _leaf(rng, 4, 3)
    cases.append(GradCheckCase("logaddexp", [a, b], lambda: _weighted(logaddexp(a, b), r3)))
    pos = Tensor(rng.uniform(0.5, 2.0, (4, 3)), requires_grad=True)
    cases.append(
        GradCheckCase("exp-log-div", [pos, b], lambda: _weighted(exp(b) / pos + log(pos), r3))
    )

    vp = VariationalParams.init(3, 2, rng, rho_init=-1.0)
    eps_w = rng.standard_normal((2, 3))
    eps_b = rng.standard_normal(2)
    xv = Tensor(rng.standard_normal((4, 3)))
    r2 = rng.standard_normal((4, 2))
    cases.append(
        GradCheckCase(
            "variational-sample",
            [vp.mu_w, vp.rho_w, vp.mu_b, vp.rho_b],
            lambda: _weighted(
                variational_linear(xv, sample_weights(vp, eps_w=eps_w, eps_b=eps_b)), r2
            ),
        )
    )

    rows = _leaf(rng, 3, 2)
    index = np.array([0, 2, 1, 2, 0])
    r_scatter = rng.standard_normal((4, 4))
    cases.append(
        GradCheckCase(
            "gather-scatter-concat",
            [rows],
            lambda: _weighted(
                concat([scatter_add(gather_rows(rows, index), index[::-1], 4)] * 2),
                r_scatter,
            ),
        )
    )

    y = rng.standard_normal((5, 1))
    mu = _leaf(rng, 5, 1)
    sigma = Tensor(rng.uniform(0.2, 1.5, (5, 1)), requires_grad=True)
    noise = Tensor(0.3, requires_grad=True)
    for noise_model in ("combined", "heteroscedastic", "global"):
        cases.append(
            GradCheckCase(
                f"nll-{noise_model}",
                [mu, sigma, noise],
                lambda nm=noise_model: nll_loss(y, mu, sigma, noise, nm),
            )
        )

    prior = ScaleMixturePrior(pi_w=0.4)
    for mode in ("mixture", "weighted-log"):
        cases.append(
            GradCheckCase(
                f"kl-{mode}",
                [vp.mu_w, vp.rho_w, vp.mu_b, vp.rho_b, prior.log_sigma1, prior.log_gap],
                lambda m=mode: log_posterior(
                    sample_weights(vp, eps_w=eps_w, eps_b=eps_b), vp
                )
                - log_prior(sample_weights(vp, eps_w=eps_w, eps_b=eps_b), prior, m),
            )
        )

    nodes = _leaf(rng, 4, 2)
    edges = _leaf(rng, 6, 1)
    edge_layer = DenseParams(W=_leaf(rng, 3, 5), b=_leaf(rng, 3))
    senders = np.array([0, 1, 2, 3, 1, 2])
    receivers = np.array([1, 0, 3, 2, 1, 2])
    r_edge = rng.standard_normal((6, 3))
    cases.append(
        GradCheckCase(
            "edge-linear",
            [nodes, edges, edge_layer.W, edge_layer.b],
            lambda: _weighted(
                edge_linear(nodes, edges, edge_layer.W, edge_layer.b, senders, receivers), r_edge
            ),
        )
    )

    centre = _leaf(rng, 1, 3)
    spread = Tensor(rng.uniform(1.0, 2.0, (4, 3)), requires_grad=True)
    cases.append(
        GradCheckCase(
            "log-normal",
            [a, centre, spread],
            lambda: _weighted(log_normal(a, centre, spread), r3),
        )
    )

    cases.append(_model_case(rng))
    return cases


def _model_case(rng: np.random.Generator) -> GradCheckCase:
    mesh = structured_quad_mesh(3, 2)
    sim = Simulation(
        u=rng.standard_normal((mesh.n_nodes, 2)), y=rng.uniform(1.0, 3.0, (mesh.n_nodes, 1))
    )
    graph = assemble_features(mesh, sim)
    config = ModelConfig(latent_dim=3, message_passes=2, decoder_width=4, rho_init=-2.0)
    state = init_model(config, rng)
    sample_seed = int(rng.integers(2**31))
    batch = Batch(graph=graph, targets=sim.y)

    def loss() -> Tensor:
        pinned = sample_decoder(state.decoder, np.random.default_rng(sample_seed))
        total, _ = elbo_loss(batch, state, 1, 2, sample=pinned)
        return total

    return GradCheckCase("model", list(state.trainable_parameters().values()), loss)


def empty_case() -> GradCheckCase:
    """A loss with no trainable leaves; passes vacuously."""
    return GradCheckCase("no-parameters", [], lambda: tensor_sum(square(Tensor([1.0, 2.0]))))


# ----------------------------------------------------------------------------
# Random instances per operation
# ----------------------------------------------------------------------------


def _signed(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Entries of magnitude 0.5 to 1.5 with random signs."""
    n = int(np.prod(shape))
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return (signs * rng.uniform(0.5, 1.5, n)).reshape(shape)


def _signed_leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(_signed(rng, *shape), requires_grad=True)


def _projected(
    name: str, leaves: List[Tensor], out: Callable[[], Tensor], rng: np.random.Generator
) -> GradCheckCase:
    """Case whose loss is a fixed random projection of the operation output."""
    weights = _signed(rng, *out().shape)
    return GradCheckCase(name, leaves, lambda: tensor_sum(out() * weights))


def _broadcast_partner(rng: np.random.Generator, shape) -> Tensor:
    rows, cols = shape
    partner_shape = [(rows, cols), (1, cols), (cols,)][rng.integers(3)]
    return _signed_leaf(rng, *partner_shape)


def _binary_case(name: str, op: Callable[[Tensor, Tensor], Tensor]) -> Callable:
    def build(rng: np.random.Generator) -> GradCheckCase:
        a = _signed_leaf(rng, 3, 4)
        b = _broadcast_partner(rng, a.shape)
        if rng.random() < 0.5:
            a, b = b, a
        return _projected(name, [a, b], lambda: op(a, b), rng)

    return build


def _unary_case(
    name: str, op: Callable[[Tensor], Tensor], draw: Callable[[np.random.Generator], np.ndarray]
) -> Callable:
    def build(rng: np.random.Generator) -> GradCheckCase:
        x = Tensor(draw(rng), requires_grad=True)
        return _projected(name, [x], lambda: op(x), rng)

    return build


def _sum_case(rng: np.random.Generator) -> GradCheckCase:
    x = _signed_leaf(rng, 3, 4)
    axis = [None, 0, 1][rng.integers(3)]
    return _projected("sum", [x], lambda: tensor_sum(x, axis=axis), rng)


def _matmul_case(rng: np.random.Generator) -> GradCheckCase:
    a = _signed_leaf(rng, 3, 4)
    b = _signed_leaf(rng, 4, 2)
    return _projected("matmul", [a, b], lambda: matmul(a, b), rng)


def _gather_case(rng: np.random.Generator) -> GradCheckCase:
    a = _signed_leaf(rng, 4, 3)
    index = rng.integers(0, 4, size=6)
    return _projected("gather_rows", [a], lambda: gather_rows(a, index), rng)


def _scatter_case(rng: np.random.Generator) -> GradCheckCase:
    a = _signed_leaf(rng, 6, 3)
    index = rng.integers(0, 4, size=6)
    return _projected("scatter_add", [a], lambda: scatter_add(a, index, 4), rng)


def _concat_case(rng: np.random.Generator) -> GradCheckCase:
    axis = int(rng.integers(2))
    shapes = [(3, 2), (3, 1), (3, 3)] if axis == 1 else [(2, 3), (1, 3), (3, 3)]
    parts = [_signed_leaf(rng, *shape) for shape in shapes]
    return _projected("concat", parts, lambda: concat(parts, axis=axis), rng)


def _linear_case(rng: np.random.Generator) -> GradCheckCase:
    x = _signed_leaf(rng, 4, 3)
    w = _signed_leaf(rng, 2, 3)
    b = _signed_leaf(rng, 2)
    return _projected("linear", [x, w, b], lambda: linear(x, w, b), rng)


def _edge_linear_case(rng: np.random.Generator) -> GradCheckCase:
    nodes = _signed_leaf(rng, 4, 2)
    edges = _signed_leaf(rng, 6, 1)
    w = _signed_leaf(rng, 3, 5)
    b = _signed_leaf(rng, 3)
    senders = rng.integers(0, 4, size=6)
    receivers = rng.integers(0, 4, size=6)
    return _projected(
        "edge_linear",
        [nodes, edges, w, b],
        lambda: edge_linear(nodes, edges, w, b, senders, receivers),
        rng,
    )


def _log_normal_case(rng: np.random.Generator) -> GradCheckCase:
    x = _signed_leaf(rng, 3, 4)
    mu = _broadcast_partner(rng, x.shape)
    sigma = Tensor(rng.uniform(1.0, 2.0, (3, 4)), requires_grad=True)
    return _projected("log_normal", [x, mu, sigma], lambda: log_normal(x, mu, sigma), rng)


def _positive(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.5, 2.0, (3, 4))


def _normal(rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((3, 4))


def _wide(rng: np.random.Generator) -> np.ndarray:
    return 2.0 * rng.standard_normal((3, 4))


OP_CASES: Dict[str, Callable[[np.random.Generator], GradCheckCase]] = {
    "add": _binary_case("add", add),
    "sub": _binary_case("sub", sub),
    "mul": _binary_case("mul", mul),
    "div": _binary_case("div", div),
    "logaddexp": _binary_case("logaddexp", logaddexp),
    "neg": _unary_case("neg", neg, _normal),
    "matmul": _matmul_case,
    "transpose": _unary_case("transpose", transpose, _normal),
    "swish": _unary_case("swish", swish, _wide),
    "sigmoid": _unary_case("sigmoid", sigmoid, _wide),
    "softplus": _unary_case("softplus", softplus, _wide),
    "log": _unary_case("log", log, _positive),
    "exp": _unary_case("exp", exp, _normal),
    "square": _unary_case("square", square, _wide),
    "sum": _sum_case,
    "gather_rows": _gather_case,
    "scatter_add": _scatter_case,
    "concat": _concat_case,
    "linear": _linear_case,
    "edge_linear": _edge_linear_case,
    "log_normal": _log_normal_case,
}


def check_op(
    name: str,
    n_instances: int = N_INSTANCES,
    seed: int = 0,
    step: float = STEP,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    """Check ``n_instances`` random instances of operation ``name``; report the worst."""
    builder = OP_CASES.get(name)
    if builder is None:
        raise KeyError(f"No random cases for operation: {name}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    n_checked = 0
    for _ in range(n_instances):
        result = check_gradients(builder(rng), step, tolerance)
        worst = max(worst, result.max_error)
        n_checked += result.n_checked
    return GradCheckResult(
        name=f"op:{name}",
        max_error=worst,
        n_checked=n_checked,
        passed=worst <= tolerance,
        seconds=time.perf_counter() - start,
    )


def run_op_checks(
    names: Optional[Sequence[str]] = None,
    n_instances: int = N_INSTANCES,
    tolerance: float = TOLERANCE,
    seed: int = 0,
) -> List[GradCheckResult]:
    """Random-instance checks of each named operation, all by default."""
    results = []
    for name in names if names is not None else sorted(OP_CASES):
        result = check_op(name, n_instances, seed, tolerance=tolerance)
        logger.info(
            f"{result.name}: max rel err {result.max_error:.3e} over {n_instances} instances "
            f"({result.seconds:.2f}s) {'ok' if result.passed else 'FAILED'}"
        )
        results.append(result)
    return results


def run_gradcheck(
    cases: Optional[Sequence[GradCheckCase]] = None,
    tolerance: float = TOLERANCE,
    seed: int = 0,
) -> List[GradCheckResult]:
    """Run the suite and log one line per case."""
    if cases is None:
        cases = default_cases(seed)
    results = []
    for case in cases:
        result = check_gradients(case, tolerance=tolerance)
        status = "ok" if result.passed else "FAILED"
        logger.info(
            f"{case.name}: max rel err {result.max_error:.3e} over {result.n_checked} entries "
            f"({result.seconds:.2f}s) {status}"
        )
        results.append(result)
    return results


def summarize(results: Sequence[GradCheckResult]) -> Dict[str, object]:
    return {
        "passed": all(r.passed for r in results),
        "max_error": max((r.max_error for r in results), default=0.0),
        "cases": {r.name: r.max_error for r in results},
    }
