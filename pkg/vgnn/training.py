"""ELBO loss, Adam and the minibatch training loop.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from vgnn.errors import NumericalError, ShapeError
from vgnn.graph import Graph, assemble_features, batch_graphs, build_graph, node_features
from vgnn.model import (
    DecoderSample,
    ModelState,
    decode,
    encode,
    forward,
    predictive_variance,
    process,
    sample_decoder,
)
from vgnn.tensor import HALF_LOG_2PI, ArrayLike, Tape, Tensor, as_tensor, log, square, tensor_sum
from vgnn.variational import log_posterior, log_prior

if TYPE_CHECKING:
    from vgnn.dataset import Dataset

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimisation settings.

    Attributes:
        n_epochs: Passes over the training simulations
        batch_size: Simulations per minibatch (nBatch)
        learning_rate: Initial Adam step size
        lr_decay: Factor applied every ``decay_every`` epochs
        decay_every: Epochs between learning-rate decays
        grad_clip: Global gradient-norm ceiling; 0 disables clipping
        seed: Seed of the single random stream used for shuffling and sampling
        log_every: Epochs between progress lines
    """

    n_epochs: int = 4500
    batch_size: int = 2
    learning_rate: float = 1e-3
    lr_decay: float = 0.98
    decay_every: int = 700
    grad_clip: float = 10.0
    seed: int = 0
    log_every: int = 50

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.n_epochs < 0:
            raise ValueError(f"n_epochs must be >= 0, got {self.n_epochs}")

    def learning_rate_at(self, epoch: int) -> float:
        """Step-decayed learning rate of 1-based ``epoch``."""
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.decay_every)


@dataclass
class AdamMoments:
    """First and second moment estimates keyed by parameter name."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class LossParts:
    total: float
    nll: float
    kl: float
    beta: float


@dataclass
class EpochRecord:
    """Loss parts summed over the batches of one epoch.

    ``kl`` is beta-weighted, so total = nll + kl.
    """

    epoch: int
    total: float
    nll: float
    kl: float
    lr: float


@dataclass
class TrainState:
    model: ModelState
    config: TrainConfig
    moments: AdamMoments = field(default_factory=AdamMoments)
    epoch: int = 0
    step: int = 0
    history: List[EpochRecord] = field(default_factory=list)


@dataclass
class Batch:
    """A minibatch of full simulations stacked as one disjoint graph."""

    graph: Graph
    targets: np.ndarray


def beta_schedule(i: int, n_batches: int) -> float:
    """KL weight 2^(M-i) / (2^M - 1) of batch ``i`` (1-based) out of ``M``.

    Evaluated as 2^-i / (1 - 2^-M) so large M underflows to zero instead
    of overflowing.
    """
    if n_batches < 1:
        raise ValueError(f"number of batches must be >= 1, got {n_batches}")
    if not 1 <= i <= n_batches:
        raise ValueError(f"batch index {i} outside 1..{n_batches}")
    return 2.0 ** (-i) / (1.0 - 2.0 ** (-n_batches))


def nll_loss(
    y: ArrayLike,
    mu: Tensor,
    sigma_pred: Tensor,
    sigma_noise: ArrayLike,
    noise_model: str = "combined",
) -> Tensor:
    """Gaussian negative log-likelihood summed over nodes and components.

    The per-node variance is sigma_pred^2 + sigma_noise^2 under the combined
    model, or either term alone.

    Raises:
        ShapeError: If y, mu and sigma_pred disagree in shape
        NumericalError: If any input is not finite
    """
    y = as_tensor(y)
    sigma_noise = as_tensor(sigma_noise)
    if not (y.shape == mu.shape == sigma_pred.shape):
        raise ShapeError(
            f"nll_loss shapes differ: y {y.shape}, mu {mu.shape}, sigma {sigma_pred.shape}"
        )
    for name, tensor in (("y", y), ("mu", mu), ("sigma", sigma_pred), ("noise", sigma_noise)):
        if not np.all(np.isfinite(tensor.values)):
            raise NumericalError(f"non-finite values in {name}", part="nll")
    var = predictive_variance(sigma_pred, sigma_noise, noise_model)
    per_element = square(y - mu) / (2.0 * var) + HALF_LOG_2PI + 0.5 * log(var)
    return tensor_sum(per_element)


def make_batch(dataset: "Dataset", indices: Sequence[int], graph: Optional[Graph] = None) -> Batch:
    """Assemble the simulations at ``indices`` into one batch graph."""
    if graph is None:
        graph = build_graph(dataset.mesh)
    sims = [dataset.simulations[k] for k in indices]
    graphs = [assemble_features(dataset.mesh, sim, graph) for sim in sims]
    return Batch(
        graph=batch_graphs(graphs),
        targets=np.vstack([np.asarray(sim.y, dtype=np.float64) for sim in sims]),
    )


class BatchAssembler:
    """Repeated minibatch assembly over one dataset.

    Node features and targets are computed once per simulation. The stacked
    topology of k copies of the mesh graph, with its incidence matrices, is
    built once per batch size k and shared by every batch of that size.
    """

    def __init__(self, dataset: "Dataset", graph: Optional[Graph] = None):
        self.dataset = dataset
        self.graph = graph if graph is not None else build_graph(dataset.mesh)
        self._features: Dict[int, np.ndarray] = {}
        self._targets: Dict[int, np.ndarray] = {}
        self._topologies: Dict[int, Graph] = {}

    def _rows(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if k not in self._features:
            sim = self.dataset.simulations[k]
            self._features[k] = node_features(self.dataset.mesh, sim)
            self._targets[k] = np.asarray(sim.y, dtype=np.float64)
        return self._features[k], self._targets[k]

    def topology(self, size: int) -> Graph:
        """Disjoint union of ``size`` copies of the mesh graph."""
        if size not in self._topologies:
            self._topologies[size] = batch_graphs([self.graph] * size)
        return self._topologies[size]

    def __call__(self, indices: Sequence[int]) -> Batch:
        rows = [self._rows(int(k)) for k in indices]
        topology = self.topology(len(rows))
        return Batch(
            graph=dataclasses.replace(topology, node_features=np.vstack([r[0] for r in rows])),
            targets=np.vstack([r[1] for r in rows]),
        )


def elbo_loss(
    batch: Batch,
    state: ModelState,
    i: int,
    n_batches: int,
    rng: Optional[np.random.Generator] = None,
    sample: Optional[DecoderSample] = None,
    beta: Optional[float] = None,
) -> Tuple[Tensor, LossParts]:
    """NLL + beta_i * (log q(w) - log p(w)) with a single decoder weight sample.

    Args:
        batch: Minibatch of full simulations
        state: Model parameters
        i: 1-based batch index within the epoch
        n_batches: Batches per epoch
        rng: Stream for the decoder sample
        sample: Pinned decoder sample, used instead of drawing one
        beta: Override of the scheduled KL weight

    Returns:
        (loss tensor, LossParts)
    """
    beta_i = beta_schedule(i, n_batches) if beta is None else beta
    config = state.config
    mu, sigma, sample = forward(batch.graph, state, rng=rng, sample=sample)
    nll = nll_loss(batch.targets, mu, sigma, state.sigma_noise(), config.noise_model)
    kl = log_posterior(sample.layers(), state.decoder.layers()) - log_prior(
        sample.layers(), state.prior, config.prior_mode
    )
    total = nll + beta_i * kl
    parts = LossParts(total=total.item(), nll=nll.item(), kl=kl.item(), beta=beta_i)
    return total, parts


def clip_by_global_norm(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
) -> None:
    """One bias-corrected Adam update applied in place to ``params``."""
    moments.step += 1
    t = moments.step
    correction1 = 1.0 - ADAM_BETA1 ** t
    correction2 = 1.0 - ADAM_BETA2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {name} has shape {grad.shape}, expected {param.shape}")
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        moments.m[name] = m
        moments.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.values -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train(
    dataset: "Dataset",
    model: ModelState,
    config: TrainConfig,
    indices: Optional[Sequence[int]] = None,
) -> TrainState:
    """Fit ``model`` to the simulations of ``dataset`` by minimising the ELBO.

    Each epoch shuffles the training simulations, splits them into
    M = ceil(n / batch_size) minibatches and performs one Adam step per batch
    with batch weight beta_i. One random stream seeded by ``config.seed``
    drives both shuffling and weight sampling.

    Args:
        dataset: Simulations sharing one mesh
        model: Initialised model, updated in place
        config: Optimisation settings
        indices: Simulations to train on; defaults to the training split

    Returns:
        TrainState with the loss history

    Raises:
        NumericalError: If a loss or gradient becomes non-finite
    """
    config.validate()
    if indices is None:
        indices = dataset.train_indices()
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < config.batch_size:
        raise ValueError(
            f"need at least batch_size={config.batch_size} simulations, got {indices.size}"
        )

    rng = np.random.default_rng(config.seed)
    assemble = BatchAssembler(dataset)
    state = TrainState(model=model, config=config)
    params = model.trainable_parameters()
    n_batches = math.ceil(indices.size / config.batch_size)

    logger.info(
        f"Training on {indices.size} simulations: {n_batches} batches per epoch, "
        f"{len(params)} parameter tensors"
    )

    for epoch in range(1, config.n_epochs + 1):
        lr = config.learning_rate_at(epoch)
        order = rng.permutation(indices)
        sums = np.zeros(3)

        for i in range(1, n_batches + 1):
            chunk = order[(i - 1) * config.batch_size : i * config.batch_size]
            batch = assemble(chunk)
            try:
                with Tape() as tape:
                    loss, parts = elbo_loss(batch, model, i, n_batches, rng=rng)
            except NumericalError as e:
                raise NumericalError(
                    f"epoch {epoch}, batch {i}: {e}", epoch=epoch, part=e.part or "total"
                ) from e
            for part, value in (("total", parts.total), ("nll", parts.nll), ("kl", parts.kl)):
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite {part} loss at epoch {epoch}, batch {i}",
                        epoch=epoch,
                        part=part,
                    )

            leaf_grads = tape.backward(loss, wrt=params.values())
            grads = {name: leaf_grads[tensor] for name, tensor in params.items()}
            grads, norm = clip_by_global_norm(grads, config.grad_clip)
            if not math.isfinite(norm):
                raise NumericalError(
                    f"non-finite gradient at epoch {epoch}, batch {i}", epoch=epoch, part="gradient"
                )
            adam_step(params, grads, state.moments, lr)
            state.step += 1
            sums += (parts.total, parts.nll, parts.beta * parts.kl)

        state.epoch = epoch
        record = EpochRecord(
            epoch=epoch,
            total=float(sums[0]),
            nll=float(sums[1]),
            kl=float(sums[2]),
            lr=lr,
        )
        state.history.append(record)
        if config.log_every and (epoch % config.log_every == 0 or epoch == 1):
            logger.info(
                f"epoch {epoch}: total={record.total:.6g} nll={record.nll:.6g} "
                f"kl={record.kl:.6g} lr={lr:.3g} noise={model.sigma_noise().item():.4g}"
            )

    return state


def write_history_csv(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    """Write the loss history with columns epoch, total, nll, kl, lr."""
    columns = [f.name for f in dataclasses.fields(EpochRecord)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for record in history:
            writer.writerow([repr(getattr(record, name)) for name in columns])


def predict_deterministic(graph: Graph, state: ModelState) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and std using posterior-mean decoder weights (eps = 0)."""
    V, E = encode(graph, state)
    V, _ = process(V, E, graph, state)
    mu, sigma = decode(V, sample_decoder(state.decoder, deterministic=True))
    return mu.values, sigma.values
