"""Posterior-predictive sampling, uncertainty split and error metrics.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from vgnn.errors import ShapeError
from vgnn.graph import Graph
from vgnn.model import ModelState, decode, encode, process, sample_decoder

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 200
DEFAULT_Z = 2.0


@dataclass
class PredictiveField:
    """Per-node predictive summary, all arrays shaped (n, t).

    Attributes:
        mean: Mean of the sampled decoder means
        aleatoric: Mean predicted variance plus noise variance, as a std
        epistemic: Spread of the sampled means, as a std
        total: sqrt(aleatoric^2 + epistemic^2)
        z: Width of the bounds in units of ``total``
    """

    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    z: float = DEFAULT_Z

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.z * self.total

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.z * self.total

    def with_z(self, z: float) -> "PredictiveField":
        return PredictiveField(self.mean, self.aleatoric, self.epistemic, self.total, z)


def predict(
    graph: Graph,
    state: ModelState,
    n_samples: int = DEFAULT_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    z: float = DEFAULT_Z,
) -> PredictiveField:
    """Monte-Carlo posterior predictive with ``n_samples`` decoder weight samples.

    The encoder and processor run once; only the decoder is re-evaluated.

    Raises:
        ValueError: If fewer than two samples are requested
    """
    if n_samples < 2:
        raise ValueError(f"predict needs at least 2 samples, got {n_samples}")
    if rng is None:
        rng = np.random.default_rng()

    V, E = encode(graph, state)
    V, _ = process(V, E, graph, state)

    means = []
    variances = []
    for _ in range(n_samples):
        mu, sigma = decode(V, sample_decoder(state.decoder, rng))
        means.append(mu.values)
        variances.append(sigma.values ** 2)
    means = np.stack(means)
    variances = np.stack(variances)

    noise_var = state.sigma_noise().item() ** 2
    noise_model = state.config.noise_model
    if noise_model == "heteroscedastic":
        aleatoric_var = variances.mean(axis=0)
    elif noise_model == "global":
        aleatoric_var = np.full(means.shape[1:], noise_var)
    else:
        aleatoric_var = variances.mean(axis=0) + noise_var
    epistemic_var = means.var(axis=0, ddof=1)

    return PredictiveField(
        mean=means.mean(axis=0),
        aleatoric=np.sqrt(aleatoric_var),
        epistemic=np.sqrt(epistemic_var),
        total=np.sqrt(aleatoric_var + epistemic_var),
        z=z,
    )


def rrmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """||pred - truth|| / ||truth|| over all nodes and components."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("rrmse is undefined for an all-zero truth")
    return float(np.linalg.norm(pred - truth) / norm)


def coverage(
    fields: Sequence[PredictiveField], truths: Sequence[np.ndarray], z: Optional[float] = None
) -> float:
    """Fraction of node values lying inside [lower, upper] of their field."""
    if len(fields) != len(truths):
        raise ShapeError(f"{len(fields)} fields for {len(truths)} truths")
    inside = 0
    count = 0
    for pf, truth in zip(fields, truths):
        if z is not None:
            pf = pf.with_z(z)
        truth = np.asarray(truth, dtype=np.float64)
        inside += int(np.sum((truth >= pf.lower) & (truth <= pf.upper)))
        count += truth.size
    return inside / count if count else 0.0


@dataclass
class LoadLocalization:
    """Where the largest predicted load sits relative to the true loaded node."""

    predicted_node: int
    true_node: int
    hit: bool
    magnitude_ratio: float

    @property
    def magnitude_ok(self) -> bool:
        return abs(self.magnitude_ratio - 1.0) <= 0.3


def load_localization(mean: np.ndarray, truth: np.ndarray, graph: Graph) -> LoadLocalization:
    """Compare the argmax-magnitude node of ``mean`` with the loaded node of ``truth``.

    ``hit`` is true when the two nodes are the same or share an edge.
    """
    predicted = int(np.argmax(np.linalg.norm(mean, axis=1)))
    true_node = int(np.argmax(np.linalg.norm(truth, axis=1)))
    true_magnitude = float(np.linalg.norm(truth[true_node]))
    ratio = float(np.linalg.norm(mean[predicted]) / true_magnitude) if true_magnitude else 0.0
    return LoadLocalization(
        predicted_node=predicted,
        true_node=true_node,
        hit=predicted in set(graph.neighbors(true_node).tolist()),
        magnitude_ratio=ratio,
    )


@dataclass
class MetricReport:
    """Aggregate metrics over a set of simulations."""

    rrmse: List[float]
    coverage: float
    z: float = DEFAULT_Z
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_rrmse(self) -> float:
        return float(np.mean(self.rrmse)) if self.rrmse else float("nan")

    @property
    def median_rrmse(self) -> float:
        return float(np.median(self.rrmse)) if self.rrmse else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rrmse": self.rrmse,
            "mean_rrmse": self.mean_rrmse,
            "median_rrmse": self.median_rrmse,
            "coverage": self.coverage,
            "z": self.z,
            **self.extra,
        }


def write_prediction_csv(
    path: Union[str, Path],
    coords: np.ndarray,
    pf: PredictiveField,
    truth: Optional[np.ndarray] = None,
) -> None:
    """One row per node: id, coordinates, truth, mean, s_a, s_e, lower, upper per component."""
    coords = np.asarray(coords)
    n, t = pf.mean.shape
    axes = ["x", "y", "z"][: coords.shape[1]]
    columns = ["id", *axes]

    def block(name: str) -> List[str]:
        return [name] if t == 1 else [f"{name}_{k}" for k in range(t)]

    if truth is not None:
        columns += block("truth")
    for name in ("mean", "s_a", "s_e", "lower", "upper"):
        columns += block(name)

    arrays = ([truth] if truth is not None else []) + [
        pf.mean,
        pf.aleatoric,
        pf.epistemic,
        pf.lower,
        pf.upper,
    ]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for i in range(n):
            row = [i, *(repr(float(c)) for c in coords[i])]
            for array in arrays:
                row += [repr(float(v)) for v in np.asarray(array)[i]]
            writer.writerow(row)
