"""Variational dense layers (Bayes by backprop).

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

Each weight has a diagonal Gaussian posterior N(mu, softplus(rho)^2). A
sample is drawn as w = mu + softplus(rho) * eps with eps ~ N(0, 1) so that
gradients reach mu and rho while eps stays a constant. The weight prior is a
two-component zero-mean scale mixture.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np

from vgnn.errors import ShapeError
from vgnn.layers import glorot_uniform
from vgnn.tensor import (
    ArrayLike,
    Tensor,
    as_tensor,
    exp,
    linear,
    log_normal,
    logaddexp,
    softplus,
    tensor_sum,
)

logger = logging.getLogger(__name__)

PRIOR_MODES = ("mixture", "weighted-log")

RHO_INIT = -5.0

MIN_PRIOR_GAP = 1e-6


@dataclass
class VariationalParams:
    """Posterior parameters of one variational dense layer."""

    mu_w: Tensor
    rho_w: Tensor
    mu_b: Tensor
    rho_b: Tensor

    @property
    def in_width(self) -> int:
        return self.mu_w.shape[1]

    @property
    def out_width(self) -> int:
        return self.mu_w.shape[0]

    @classmethod
    def init(
        cls,
        fan_in: int,
        fan_out: int,
        rng: np.random.Generator,
        rho_init: float = RHO_INIT,
    ) -> "VariationalParams":
        """Glorot-uniform means, constant rho (softplus(-5) ~ 6.7e-3)."""
        return cls(
            mu_w=Tensor(glorot_uniform(fan_out, fan_in, rng), requires_grad=True),
            rho_w=Tensor(np.full((fan_out, fan_in), rho_init), requires_grad=True),
            mu_b=Tensor(np.zeros(fan_out), requires_grad=True),
            rho_b=Tensor(np.full(fan_out, rho_init), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {
            f"{prefix}.mu_w": self.mu_w,
            f"{prefix}.rho_w": self.rho_w,
            f"{prefix}.mu_b": self.mu_b,
            f"{prefix}.rho_b": self.rho_b,
        }


@dataclass
class WeightSample:
    """Sampled weight and bias together with the noise that produced them."""

    weight: Tensor
    bias: Tensor
    eps_w: np.ndarray
    eps_b: np.ndarray


class ScaleMixturePrior:
    """Prior pi_w N(0, sigma1^2) + (1 - pi_w) N(0, sigma2^2) over every weight.

    sigma1 = exp(log_sigma1) and sigma2 = sigma1 * exp(-exp(log_gap)), so
    sigma1 > sigma2 holds for any value of the two unconstrained parameters
    and both of them keep a non-zero gradient.
    """

    def __init__(
        self,
        sigma1: float = math.exp(-1.0),
        sigma2: float = math.exp(-2.0),
        pi_w: float = 0.5,
        trainable: bool = True,
    ):
        """Initialize prior.

        Args:
            sigma1: Standard deviation of the wide component
            sigma2: Standard deviation of the narrow component, at most sigma1;
                equal scales start a factor exp(-MIN_PRIOR_GAP) apart
            pi_w: Weight of the wide component in [0, 1]
            trainable: Whether sigma1 and sigma2 are learned during training
        """
        if sigma1 <= 0 or sigma2 <= 0:
            raise ValueError(f"prior scales must be positive, got {sigma1}, {sigma2}")
        if sigma2 > sigma1:
            raise ValueError(f"sigma2 ({sigma2}) must not exceed sigma1 ({sigma1})")
        if not 0.0 <= pi_w <= 1.0:
            raise ValueError(f"pi_w must lie in [0, 1], got {pi_w}")
        gap = math.log(sigma1 / sigma2)
        if gap < MIN_PRIOR_GAP:
            logger.debug(f"prior scales {sigma1} and {sigma2} start {MIN_PRIOR_GAP} apart in log")
            gap = MIN_PRIOR_GAP
        self.pi_w = pi_w
        self.trainable = trainable
        self.log_sigma1 = Tensor(math.log(sigma1), requires_grad=trainable)
        self.log_gap = Tensor(math.log(gap), requires_grad=trainable)

    def sigma1(self) -> Tensor:
        return exp(self.log_sigma1)

    def sigma2(self) -> Tensor:
        return exp(self.log_sigma1 - exp(self.log_gap))

    def named_parameters(self, prefix: str = "prior") -> Dict[str, Tensor]:
        return {f"{prefix}.log_sigma1": self.log_sigma1, f"{prefix}.log_gap": self.log_gap}

    def __repr__(self) -> str:
        return (
            f"ScaleMixturePrior(sigma1={self.sigma1().item():.6g}, "
            f"sigma2={self.sigma2().item():.6g}, pi_w={self.pi_w})"
        )


Samples = Union[WeightSample, Sequence[WeightSample]]
Posteriors = Union[VariationalParams, Sequence[VariationalParams]]


def _as_list(items):
    if isinstance(items, (WeightSample, VariationalParams)):
        return [items]
    return list(items)


def sample_weights(
    vp: VariationalParams,
    rng: Optional[np.random.Generator] = None,
    eps_w: Optional[np.ndarray] = None,
    eps_b: Optional[np.ndarray] = None,
) -> WeightSample:
    """Draw w = mu + softplus(rho) * eps for weights and biases.

    Args:
        vp: Posterior parameters
        rng: Random stream for eps; required unless both eps arrays are given
        eps_w: Pinned weight noise, shape of mu_w
        eps_b: Pinned bias noise, shape of mu_b

    Returns:
        WeightSample whose tensors carry gradients to mu and rho
    """
    if eps_w is None:
        if rng is None:
            raise ValueError("sample_weights needs an rng or pinned eps_w")
        eps_w = rng.standard_normal(vp.mu_w.shape)
    if eps_b is None:
        if rng is None:
            raise ValueError("sample_weights needs an rng or pinned eps_b")
        eps_b = rng.standard_normal(vp.mu_b.shape)
    eps_w = np.asarray(eps_w, dtype=np.float64)
    eps_b = np.asarray(eps_b, dtype=np.float64)
    if eps_w.shape != vp.mu_w.shape or eps_b.shape != vp.mu_b.shape:
        raise ShapeError(
            f"noise shapes {eps_w.shape}, {eps_b.shape} do not match "
            f"{vp.mu_w.shape}, {vp.mu_b.shape}"
        )
    weight = vp.mu_w + softplus(vp.rho_w) * eps_w
    bias = vp.mu_b + softplus(vp.rho_b) * eps_b
    return WeightSample(weight=weight, bias=bias, eps_w=eps_w, eps_b=eps_b)


def mean_weights(vp: VariationalParams) -> WeightSample:
    """The eps = 0 sample, i.e. the posterior mean."""
    return sample_weights(vp, eps_w=np.zeros(vp.mu_w.shape), eps_b=np.zeros(vp.mu_b.shape))


def variational_linear(x: Tensor, ws: WeightSample) -> Tensor:
    """x @ w^T + b with a sampled weight."""
    return linear(x, ws.weight, ws.bias)


def log_gaussian(x: ArrayLike, mu: ArrayLike, sigma: ArrayLike) -> Tensor:
    """Sum over elements of log N(x; mu, sigma^2).

    Raises:
        ValueError: If any sigma is not strictly positive
    """
    sigma = as_tensor(sigma)
    if np.any(sigma.values <= 0):
        raise ValueError("log_gaussian needs sigma > 0")
    return tensor_sum(log_normal(x, mu, sigma))


def _log_prior_elements(w: Tensor, prior: ScaleMixturePrior, mode: str) -> Tensor:
    sigma1, sigma2 = prior.sigma1(), prior.sigma2()
    pi_w = prior.pi_w
    if mode == "weighted-log":
        wide = pi_w * log_normal(w, 0.0, sigma1)
        narrow = (1.0 - pi_w) * log_normal(w, 0.0, sigma2)
        return tensor_sum(wide + narrow)
    if pi_w == 1.0:
        return tensor_sum(log_normal(w, 0.0, sigma1))
    if pi_w == 0.0:
        return tensor_sum(log_normal(w, 0.0, sigma2))
    wide = log_normal(w, 0.0, sigma1) + math.log(pi_w)
    narrow = log_normal(w, 0.0, sigma2) + math.log(1.0 - pi_w)
    return tensor_sum(logaddexp(wide, narrow))


def log_prior(ws: Samples, prior: ScaleMixturePrior, mode: str = "mixture") -> Tensor:
    """Log prior density of sampled weights and biases.

    Args:
        ws: One sample or the samples of a layer stack
        prior: Scale mixture prior
        mode: ``mixture`` sums log(pi N1 + (1-pi) N2); ``weighted-log`` sums
            pi log N1 + (1-pi) log N2

    Returns:
        Scalar tensor
    """
    if mode not in PRIOR_MODES:
        raise ValueError(f"Unknown prior mode: {mode} (expected one of {PRIOR_MODES})")
    total: Optional[Tensor] = None
    for sample in _as_list(ws):
        for w in (sample.weight, sample.bias):
            term = _log_prior_elements(w, prior, mode)
            total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def log_posterior(ws: Samples, vp: Posteriors) -> Tensor:
    """Sum of log N(w; mu, softplus(rho)^2) over all sampled weights and biases."""
    samples, posteriors = _as_list(ws), _as_list(vp)
    if len(samples) != len(posteriors):
        raise ShapeError(f"{len(samples)} samples for {len(posteriors)} variational layers")
    total: Optional[Tensor] = None
    for sample, params in zip(samples, posteriors):
        term = tensor_sum(log_normal(sample.weight, params.mu_w, softplus(params.rho_w)))
        term = term + tensor_sum(log_normal(sample.bias, params.mu_b, softplus(params.rho_b)))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def kl_estimate(
    ws: Samples, vp: Posteriors, prior: ScaleMixturePrior, mode: str = "mixture"
) -> Tensor:
    """Single-sample Monte-Carlo estimate of KL[q || p]: log q(w) - log p(w)."""
    return log_posterior(ws, vp) - log_prior(ws, prior, mode)


def gaussian_kl(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float) -> float:
    """Closed-form KL[N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)]."""
    return (
        math.log(sigma_p / sigma_q)
        + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2)
        - 0.5
    )
