"""Deterministic dense layers and MLP blocks.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Sequence

import numpy as np

from vgnn.errors import ShapeError
from vgnn.tensor import Tensor, as_tensor, edge_linear, linear, swish

if TYPE_CHECKING:
    from vgnn.graph import Graph


def glorot_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix of shape (fan_out, fan_in)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class DenseParams:
    """Weight (out x in) and bias (out) of one fully connected layer."""

    W: Tensor
    b: Tensor

    @property
    def in_width(self) -> int:
        return self.W.shape[1]

    @property
    def out_width(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "DenseParams":
        return cls(
            W=Tensor(glorot_uniform(fan_out, fan_in, rng), requires_grad=True),
            b=Tensor(np.zeros(fan_out), requires_grad=True),
        )


def dense(x: Tensor, layer: DenseParams) -> Tensor:
    """x @ W^T + b, row by row."""
    return linear(x, layer.W, layer.b)


@dataclass
class MlpBlock:
    """Chain of dense layers with a Swish flag per layer."""

    layers: List[DenseParams]
    activations: List[bool]

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @classmethod
    def init(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        activate_output: bool = True,
    ) -> "MlpBlock":
        """Glorot-initialised block with layer widths ``widths[0] -> ... -> widths[-1]``.

        Args:
            widths: Input width followed by each layer's output width
            rng: Random stream for the weights
            activate_output: Apply Swish after the last layer too
        """
        layers = [DenseParams.init(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        activations = [True] * (len(layers) - 1) + [activate_output]
        return cls(layers=layers, activations=activations)

    def validate(self) -> None:
        for k, (first, second) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if first.out_width != second.in_width:
                raise ShapeError(
                    f"layer {k} outputs {first.out_width} but layer {k + 1} expects "
                    f"{second.in_width}"
                )

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for k, layer in enumerate(self.layers):
            params[f"{prefix}.{k}.W"] = layer.W
            params[f"{prefix}.{k}.b"] = layer.b
        return params


def mlp_forward(block: MlpBlock, X: Tensor) -> Tensor:
    """Apply the block to every row of X independently."""
    h = as_tensor(X)
    if h.ndim != 2 or h.shape[1] != block.in_width:
        raise ShapeError(f"MLP expects input width {block.in_width}, got shape {h.shape}")
    return _finish(block, dense(h, block.layers[0]))


def edge_mlp_forward(block: MlpBlock, V: Tensor, E: Tensor, graph: "Graph") -> Tensor:
    """Apply the block to the rows [v_recv, v_send, e] of every edge of ``graph``.

    Same result as ``mlp_forward`` on the concatenated rows; the first layer
    reads the node rows through the graph's incidence matrices instead.
    """
    width = 2 * V.shape[1] + E.shape[1]
    if width != block.in_width:
        raise ShapeError(f"MLP expects input width {block.in_width}, got {width}")
    first = block.layers[0]
    incidence = graph.incidence
    h = edge_linear(
        V,
        E,
        first.W,
        first.b,
        graph.senders,
        graph.receivers,
        send_matrix=incidence.send,
        receive_matrix=incidence.receive,
    )
    return _finish(block, h)


def _finish(block: MlpBlock, h: Tensor) -> Tensor:
    """Run the block on ``h``, the output of its first dense layer."""
    for k, (layer, activate) in enumerate(zip(block.layers, block.activations)):
        if k:
            h = dense(h, layer)
        if activate:
            h = swish(h)
    return h
