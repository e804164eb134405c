"""Dataset container and its JSON file format.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

File layout::

    {
      "format": "vgnn-dataset", "version": 1, "kind": "plate",
      "n_train": 80, "meta": {...},
      "mesh": {"coords": [[x, y], ...], "elements": [[i, j, k, l], ...],
               "gamma_u": [0, 1, ...], "gamma_t": [0, 1, ...]},
      "simulations": [{"u": [[ux, uy], ...], "y": [[...], ...], "meta": {...}}, ...]
    }

Arrays are row-major nested lists. Files written with the same content are
byte-identical.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from vgnn.errors import MeshError, SchemaError, ShapeError
from vgnn.graph import Mesh, Simulation, make_mesh

logger = logging.getLogger(__name__)

DATASET_FORMAT = "vgnn-dataset"
DATASET_VERSION = 1


@dataclass
class Dataset:
    """Simulations solved on one shared mesh.

    The first ``n_train`` simulations form the training split, the rest the
    test split.
    """

    mesh: Mesh
    simulations: List[Simulation]
    kind: str = "external"
    n_train: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_train is None:
            self.n_train = len(self.simulations)
        if not 0 <= self.n_train <= len(self.simulations):
            raise ValueError(f"n_train={self.n_train} outside 0..{len(self.simulations)}")
        for sim in self.simulations:
            sim.check_against(self.mesh)

    def __len__(self) -> int:
        return len(self.simulations)

    @property
    def output_dim(self) -> int:
        return self.simulations[0].y.shape[1] if self.simulations else 0

    def train_indices(self) -> List[int]:
        return list(range(self.n_train))

    def test_indices(self) -> List[int]:
        return list(range(self.n_train, len(self.simulations)))

    def indices(self, subset: str) -> List[int]:
        """Indices of the ``train``, ``test`` or ``all`` subset."""
        if subset == "train":
            return self.train_indices()
        if subset == "test":
            return self.test_indices()
        if subset == "all":
            return list(range(len(self.simulations)))
        raise ValueError(f"Unknown subset: {subset}")

    def subset(self, indices: Sequence[int], n_train: Optional[int] = None) -> "Dataset":
        return Dataset(
            mesh=self.mesh,
            simulations=[self.simulations[k] for k in indices],
            kind=self.kind,
            n_train=n_train,
            meta=dict(self.meta),
        )


def _float_rows(values: np.ndarray) -> List[Any]:
    return np.asarray(values, dtype=np.float64).tolist()


def dataset_to_dict(dataset: Dataset) -> Dict[str, Any]:
    mesh = dataset.mesh
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "kind": dataset.kind,
        "n_train": dataset.n_train,
        "meta": dataset.meta,
        "mesh": {
            "coords": _float_rows(mesh.coords),
            "elements": mesh.elements.tolist(),
            "gamma_u": mesh.gamma_u.astype(int).tolist(),
            "gamma_t": mesh.gamma_t.astype(int).tolist(),
        },
        "simulations": [
            {"u": _float_rows(sim.u), "y": _float_rows(sim.y), "meta": sim.meta}
            for sim in dataset.simulations
        ],
    }


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write ``dataset`` as JSON with sorted keys."""
    text = json.dumps(dataset_to_dict(dataset), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n")
    logger.info(f"Wrote {len(dataset)} simulations ({dataset.kind}) to {path}")


def _matrix(value: Any, path: str, width: Optional[int] = None, rows: Optional[int] = None):
    if not isinstance(value, list):
        raise SchemaError(f"expected a list of rows, got {type(value).__name__}", path)
    try:
        array = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"expected a numeric matrix: {e}", path) from e
    if array.ndim != 2:
        raise SchemaError(f"expected a matrix, got {array.ndim} dimensions", path)
    if width is not None and array.shape[1] != width:
        raise SchemaError(f"expected {width} columns, got {array.shape[1]}", path)
    if rows is not None and array.shape[0] != rows:
        raise SchemaError(f"expected {rows} rows, got {array.shape[0]}", path)
    if not np.all(np.isfinite(array)):
        raise SchemaError("contains non-finite values", path)
    return array


def _index_vector(value: Any, path: str) -> np.ndarray:
    if not isinstance(value, list):
        raise SchemaError(f"expected a list of node indices, got {type(value).__name__}", path)
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise SchemaError("node indices must be integers", path)
    return np.asarray(value, dtype=np.int64).reshape(-1)


def _require(data: Dict[str, Any], key: str, path: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise SchemaError("missing field", f"{path}.{key}" if path else key)
    return data[key]


def _flag_vector(value: Any, path: str, n: int) -> np.ndarray:
    if not isinstance(value, list) or not all(
        isinstance(v, (bool, int, float)) for v in value
    ):
        raise SchemaError(f"expected a list of {n} 0/1 flags", path)
    if len(value) != n:
        raise SchemaError(f"expected {n} flags, got {len(value)}", path)
    return np.asarray(value, dtype=np.float64) != 0.0


def _boundary(mesh_data: Dict[str, Any], name: str, n: int) -> np.ndarray:
    """Flags from ``name`` (one 0/1 per node) or from ``name_nodes`` (node indices)."""
    if f"{name}_nodes" in mesh_data:
        path = f"mesh.{name}_nodes"
        nodes = _index_vector(mesh_data[f"{name}_nodes"], path)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
            raise SchemaError(f"expected node indices in 0..{n - 1}", path)
        flags = np.zeros(n, dtype=bool)
        flags[nodes] = True
        return flags
    if name not in mesh_data:
        return np.zeros(n, dtype=bool)
    return _flag_vector(mesh_data[name], f"mesh.{name}", n)


def dataset_from_dict(data: Dict[str, Any]) -> Dataset:
    """Validate a decoded JSON document and build a Dataset.

    Raises:
        SchemaError: With the path of the first offending field
    """
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    if "format" in data and data["format"] != DATASET_FORMAT:
        raise SchemaError(f"expected '{DATASET_FORMAT}'", "format")
    if data.get("version", DATASET_VERSION) != DATASET_VERSION:
        raise SchemaError(f"unsupported version {data['version']}", "version")

    mesh_data = _require(data, "mesh", "")
    coords = _matrix(_require(mesh_data, "coords", "mesh"), "mesh.coords")
    n = coords.shape[0]
    elements_raw = _require(mesh_data, "elements", "mesh")
    if isinstance(elements_raw, list) and not elements_raw:
        elements = np.zeros((0, 4))
    else:
        elements = _matrix(elements_raw, "mesh.elements")
    if np.any(elements != np.round(elements)):
        raise SchemaError("element indices must be integers", "mesh.elements")
    gamma_u = _boundary(mesh_data, "gamma_u", n)
    gamma_t = _boundary(mesh_data, "gamma_t", n)
    try:
        mesh = make_mesh(coords, elements.astype(np.int64), gamma_u, gamma_t)
    except MeshError as e:
        raise SchemaError(str(e), "mesh") from e

    sims_data = _require(data, "simulations", "")
    if not isinstance(sims_data, list):
        raise SchemaError("expected a list", "simulations")
    simulations = []
    out_width = None
    for k, sim_data in enumerate(sims_data):
        path = f"simulations[{k}]"
        u = _matrix(_require(sim_data, "u", path), f"{path}.u", width=mesh.dim, rows=n)
        y = _matrix(_require(sim_data, "y", path), f"{path}.y", width=out_width, rows=n)
        out_width = y.shape[1]
        meta = sim_data.get("meta", {})
        if not isinstance(meta, dict):
            raise SchemaError("expected an object", f"{path}.meta")
        simulations.append(Simulation(u=u, y=y, meta=meta))

    n_train = data.get("n_train")
    valid = (
        isinstance(n_train, int)
        and not isinstance(n_train, bool)
        and 0 <= n_train <= len(simulations)
    )
    if n_train is not None and not valid:
        raise SchemaError(f"must be an integer in 0..{len(simulations)}", "n_train")
    kind = data.get("kind", "external")
    if not isinstance(kind, str):
        raise SchemaError("expected a string", "kind")
    meta = data.get("meta") or {}
    if not isinstance(meta, dict):
        raise SchemaError("expected an object", "meta")
    try:
        return Dataset(
            mesh=mesh,
            simulations=simulations,
            kind=kind,
            n_train=n_train,
            meta=meta,
        )
    except ShapeError as e:
        raise SchemaError(str(e), "simulations") from e


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset file written by :func:`save_dataset` or converted externally.

    Raises:
        FileNotFoundError: If the file does not exist
        SchemaError: If the document violates the format
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}") from e
    dataset = dataset_from_dict(data)
    logger.info(
        f"Loaded {len(dataset)} simulations ({dataset.kind}) on {dataset.mesh.n_nodes} nodes "
        f"from {path}"
    )
    return dataset


def import_external_dataset(path: Union[str, Path], n_train: Optional[int] = None) -> Dataset:
    """Load a dataset converted from an outside source.

    Only ``mesh`` and ``simulations`` are required. Boundaries may be given as
    per-node flags or as node index lists (``gamma_u_nodes``, ``gamma_t_nodes``);
    ``kind`` defaults to ``external``.

    Args:
        path: JSON file
        n_train: Size of the training split; overrides the file's value
    """
    dataset = load_dataset(path)
    if n_train is not None:
        dataset = dataset.subset(range(len(dataset)), n_train=n_train)
    logger.info(
        f"Imported {dataset.kind} dataset: {dataset.n_train} train / "
        f"{len(dataset) - dataset.n_train} test simulations"
    )
    return dataset
