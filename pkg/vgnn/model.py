"""Encoder, processor and variational decoder assembled into one node-wise model.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

The encoder and processor are deterministic; only the decoder carries weight
distributions. All randomness enters through the decoder weight sample.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from vgnn.errors import SchemaError, ShapeError
from vgnn.graph import Graph
from vgnn.layers import MlpBlock, edge_mlp_forward, mlp_forward
from vgnn.tensor import Tensor, concat, scatter_add, softplus, square, swish
from vgnn.variational import (
    PRIOR_MODES,
    RHO_INIT,
    ScaleMixturePrior,
    VariationalParams,
    WeightSample,
    mean_weights,
    sample_weights,
    variational_linear,
)

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6

NOISE_MODELS = ("combined", "heteroscedastic", "global")

CHECKPOINT_FORMAT = "vgnn-checkpoint"
CHECKPOINT_VERSION = 2


@dataclass
class ModelConfig:
    """Architecture of the variational graph network.

    Attributes:
        spatial_dim: Mesh dimension d; node inputs have width 2d+1, edges d+1
        output_dim: Target width t (1 for modulus, d for load vectors)
        latent_dim: Width of node and edge embeddings and of MLP hidden layers
        message_passes: Number m of processor steps
        decoder_layers: Variational Swish layers in the decoder trunk
        decoder_width: Trunk width; None means 3 * latent_dim
        prior_mode: ``mixture`` or ``weighted-log``
        prior_sigma1: Initial wide prior scale
        prior_sigma2: Initial narrow prior scale
        prior_pi: Mixture weight of the wide component
        learn_prior: Train sigma1 and sigma2 along with the network
        noise_model: How the per-node and global noise enter the likelihood
        noise_init: Initial global noise standard deviation
        rho_init: Initial rho of every variational weight
    """

    spatial_dim: int = 2
    output_dim: int = 1
    latent_dim: int = 25
    message_passes: int = 5
    decoder_layers: int = 2
    decoder_width: Optional[int] = None
    prior_mode: str = "mixture"
    prior_sigma1: float = math.exp(-1.0)
    prior_sigma2: float = math.exp(-2.0)
    prior_pi: float = 0.5
    learn_prior: bool = True
    noise_model: str = "combined"
    noise_init: float = 0.1
    rho_init: float = RHO_INIT

    @property
    def node_in(self) -> int:
        return 2 * self.spatial_dim + 1

    @property
    def edge_in(self) -> int:
        return self.spatial_dim + 1

    @property
    def trunk_width(self) -> int:
        return self.decoder_width if self.decoder_width else 3 * self.latent_dim

    def validate(self) -> None:
        if self.message_passes < 1:
            raise ValueError(f"message_passes must be >= 1, got {self.message_passes}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.spatial_dim not in (2, 3):
            raise ValueError(f"spatial_dim must be 2 or 3, got {self.spatial_dim}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"Unknown prior mode: {self.prior_mode}")
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"Unknown noise model: {self.noise_model}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class DecoderParams:
    """Variational trunk plus mean and std heads."""

    trunk: List[VariationalParams]
    mean_head: VariationalParams
    std_head: VariationalParams

    def layers(self) -> List[VariationalParams]:
        return [*self.trunk, self.mean_head, self.std_head]


@dataclass
class DecoderSample:
    """One weight sample for every decoder layer, aligned with DecoderParams."""

    trunk: List[WeightSample]
    mean_head: WeightSample
    std_head: WeightSample

    def layers(self) -> List[WeightSample]:
        return [*self.trunk, self.mean_head, self.std_head]


@dataclass
class ModelState:
    """All parameters of the model."""

    config: ModelConfig
    node_encoder: MlpBlock
    edge_encoder: MlpBlock
    edge_processor: MlpBlock
    node_processor: MlpBlock
    decoder: DecoderParams
    noise_raw: Tensor
    prior: ScaleMixturePrior

    def sigma_noise(self) -> Tensor:
        return softplus(self.noise_raw)

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every parameter tensor under a stable dotted name."""
        params: Dict[str, Tensor] = {}
        params.update(self.node_encoder.named_parameters("encoder.node"))
        params.update(self.edge_encoder.named_parameters("encoder.edge"))
        params.update(self.edge_processor.named_parameters("processor.edge"))
        params.update(self.node_processor.named_parameters("processor.node"))
        for k, layer in enumerate(self.decoder.trunk):
            params.update(layer.named_parameters(f"decoder.trunk.{k}"))
        params.update(self.decoder.mean_head.named_parameters("decoder.mean"))
        params.update(self.decoder.std_head.named_parameters("decoder.std"))
        params["noise.raw"] = self.noise_raw
        params.update(self.prior.named_parameters("prior"))
        return params

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelState:
    """Randomly initialised model for ``config``."""
    config.validate()
    h = config.latent_dim
    width = config.trunk_width

    trunk = []
    fan_in = h
    for _ in range(config.decoder_layers):
        trunk.append(VariationalParams.init(fan_in, width, rng, config.rho_init))
        fan_in = width

    return ModelState(
        config=config,
        node_encoder=MlpBlock.init([config.node_in, h, h, h], rng),
        edge_encoder=MlpBlock.init([config.edge_in, h, h, h], rng),
        edge_processor=MlpBlock.init([3 * h, h, h, h], rng, activate_output=False),
        node_processor=MlpBlock.init([2 * h, h, h, h], rng, activate_output=False),
        decoder=DecoderParams(
            trunk=trunk,
            mean_head=VariationalParams.init(fan_in, config.output_dim, rng, config.rho_init),
            std_head=VariationalParams.init(fan_in, config.output_dim, rng, config.rho_init),
        ),
        noise_raw=Tensor(_inverse_softplus(config.noise_init), requires_grad=True),
        prior=ScaleMixturePrior(
            sigma1=config.prior_sigma1,
            sigma2=config.prior_sigma2,
            pi_w=config.prior_pi,
            trainable=config.learn_prior,
        ),
    )


def _inverse_softplus(value: float) -> float:
    return float(value + np.log(-np.expm1(-value)))


def count_parameters(state: ModelState) -> int:
    """Number of trainable scalars (posterior mu and rho both count)."""
    return int(sum(t.size for t in state.trainable_parameters().values()))


def sample_decoder(
    decoder: DecoderParams,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = False,
) -> DecoderSample:
    """Draw one weight sample for the whole decoder; eps = 0 when deterministic."""
    draw = mean_weights if deterministic else (lambda vp: sample_weights(vp, rng))
    return DecoderSample(
        trunk=[draw(layer) for layer in decoder.trunk],
        mean_head=draw(decoder.mean_head),
        std_head=draw(decoder.std_head),
    )


def _check_widths(graph: Graph, config: ModelConfig) -> None:
    if graph.node_features is None:
        raise ShapeError("graph has no node features; call assemble_features first")
    node_width = graph.node_features.shape[1]
    edge_width = graph.edge_features.shape[1]
    if node_width != config.node_in:
        raise ShapeError(f"node feature width {node_width} does not match model {config.node_in}")
    if edge_width != config.edge_in:
        raise ShapeError(f"edge feature width {edge_width} does not match model {config.edge_in}")


def encode(
    graph: Graph,
    state: ModelState,
    node_features: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Project node and edge inputs onto the latent space with two MLPs.

    Args:
        graph: Graph with node features
        state: Model parameters
        node_features: Tensor to use in place of ``graph.node_features``, e.g. to
            differentiate with respect to the inputs

    Returns:
        (V, E) latent node (n x h) and edge (n_edges x h) embeddings
    """
    _check_widths(graph, state.config)
    X = node_features if node_features is not None else Tensor(graph.node_features)
    V = mlp_forward(state.node_encoder, X)
    E = mlp_forward(state.edge_encoder, Tensor(graph.edge_features))
    return V, E


def process(V: Tensor, E: Tensor, graph: Graph, state: ModelState) -> Tuple[Tensor, Tensor]:
    """Run m residual message-passing steps with shared weights.

    For edge s -> r: e += phi_e(v_r, v_s, e); each node sums its incoming
    edges (self-loop included) into m_r and updates v_r += phi_v(v_r, m_r).
    """
    receive = graph.incidence.receive
    for _ in range(state.config.message_passes):
        E = E + edge_mlp_forward(state.edge_processor, V, E, graph)
        messages = scatter_add(E, graph.receivers, graph.n_nodes, matrix=receive)
        V = V + mlp_forward(state.node_processor, concat([V, messages]))
    return V, E


def decode(V: Tensor, sample: DecoderSample) -> Tuple[Tensor, Tensor]:
    """Mean and standard deviation heads on a shared variational trunk.

    Returns:
        (mu, sigma), both n x t; sigma = softplus(raw) + 1e-6
    """
    h = V
    for layer in sample.trunk:
        h = swish(variational_linear(h, layer))
    mu = variational_linear(h, sample.mean_head)
    sigma = softplus(variational_linear(h, sample.std_head)) + SIGMA_FLOOR
    return mu, sigma


def forward(
    graph: Graph,
    state: ModelState,
    rng: Optional[np.random.Generator] = None,
    sample: Optional[DecoderSample] = None,
    node_features: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor, DecoderSample]:
    """Encode, process and decode with one decoder weight sample.

    Args:
        graph: Graph with node features
        state: Model parameters
        rng: Random stream for a fresh sample; ignored when ``sample`` is given
        sample: Pinned decoder sample
        node_features: Optional input tensor overriding the graph's features

    Returns:
        (mu, sigma, sample)
    """
    if sample is None:
        if rng is None:
            raise ValueError("forward needs an rng or a pinned decoder sample")
        sample = sample_decoder(state.decoder, rng)
    V, E = encode(graph, state, node_features)
    V, _ = process(V, E, graph, state)
    mu, sigma = decode(V, sample)
    return mu, sigma, sample


def predictive_variance(sigma_pred: Tensor, sigma_noise: Tensor, noise_model: str) -> Tensor:
    """Per-node variance of the likelihood under the configured noise model."""
    if noise_model == "heteroscedastic":
        return square(sigma_pred)
    if noise_model == "global":
        return square(sigma_noise) + 0.0 * sigma_pred
    return square(sigma_pred) + square(sigma_noise)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path: Union[str, Path]) -> None:
    """Write the model as JSON: config plus name -> {shape, values}."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "parameters": {
            name: {"shape": list(tensor.shape), "values": tensor.values.ravel().tolist()}
            for name, tensor in state.named_parameters().items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    logger.info(f"Saved checkpoint with {count_parameters(state)} parameters to {path}")


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        FileNotFoundError: If the file does not exist
        SchemaError: If the content does not describe a compatible model
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"expected '{CHECKPOINT_FORMAT}'", "format")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported version {payload.get('version')}", "version")
    if not isinstance(payload.get("config"), dict):
        raise SchemaError("missing model configuration", "config")

    config = ModelConfig.from_dict(payload["config"])
    state = init_model(config, np.random.default_rng(0))
    stored = payload.get("parameters")
    if not isinstance(stored, dict):
        raise SchemaError("missing parameter map", "parameters")

    for name, tensor in state.named_parameters().items():
        entry = stored.get(name)
        field_path = f"parameters.{name}"
        if not isinstance(entry, dict):
            raise SchemaError("missing parameter", field_path)
        shape = tuple(entry.get("shape", ()))
        if shape != tensor.shape:
            raise SchemaError(f"shape {shape} does not match model {tensor.shape}", field_path)
        values = np.asarray(entry.get("values", []), dtype=np.float64)
        if values.size != tensor.size:
            raise SchemaError(f"{values.size} values for shape {shape}", field_path)
        tensor.values[...] = values.reshape(shape)

    logger.info(f"Loaded checkpoint {path} ({count_parameters(state)} parameters)")
    return state
