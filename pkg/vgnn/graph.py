"""Mesh and graph data model.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

The computational mesh is used directly as the graph: every element side
becomes a pair of directed edges and every node gets one self-loop.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from vgnn.errors import MeshError, ShapeError
from vgnn.tensor import incidence_matrix

logger = logging.getLogger(__name__)

BOUNDARIES = ("gamma_u", "gamma_t")


@dataclass(frozen=True)
class Mesh:
    """Node coordinates, element connectivity and boundary flags.

    Attributes:
        coords: (n, d) node coordinates, d in {2, 3}
        elements: (n_elements, k) node indices per element, sides taken cyclically
        gamma_u: (n,) bool flags for the Dirichlet boundary
        gamma_t: (n,) bool flags for the Neumann boundary
    """

    coords: np.ndarray
    elements: np.ndarray
    gamma_u: np.ndarray
    gamma_t: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def boundary_nodes(self, name: str) -> np.ndarray:
        """Indices of the nodes flagged on boundary ``name`` (gamma_u or gamma_t)."""
        if name not in BOUNDARIES:
            raise KeyError(f"Unknown boundary: {name}")
        return np.flatnonzero(getattr(self, name))

    def validate(self) -> None:
        """Check the mesh invariants, raising MeshError on the first violation."""
        if self.coords.ndim != 2 or self.coords.shape[1] not in (2, 3):
            raise MeshError(f"coords must be (n, 2) or (n, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise MeshError("coords contain non-finite values")
        if self.elements.size:
            if self.elements.ndim != 2 or self.elements.shape[1] < 2:
                raise MeshError(f"elements must be (m, k>=2), got {self.elements.shape}")
            bad = (self.elements < 0) | (self.elements >= self.n_nodes)
            if np.any(bad):
                element = int(np.argwhere(bad)[0][0])
                raise MeshError(
                    f"element {element} refers to a node outside 0..{self.n_nodes - 1}: "
                    f"{self.elements[element].tolist()}"
                )
        for name in BOUNDARIES:
            flags = getattr(self, name)
            if flags.shape != (self.n_nodes,):
                raise MeshError(f"{name} must have one flag per node, got {flags.shape}")


def make_mesh(
    coords: Any,
    elements: Any,
    gamma_u: Optional[Any] = None,
    gamma_t: Optional[Any] = None,
) -> Mesh:
    """Build and validate a Mesh from array-likes; missing boundaries are empty."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 2)
    n = coords.shape[0]
    elements = np.asarray(elements, dtype=np.int64)
    if elements.size == 0:
        elements = np.zeros((0, 4), dtype=np.int64)
    mesh = Mesh(
        coords=coords,
        elements=elements,
        gamma_u=_flags(gamma_u, n),
        gamma_t=_flags(gamma_t, n),
    )
    mesh.validate()
    return mesh


def _flags(values: Optional[Any], n: int) -> np.ndarray:
    if values is None:
        return np.zeros(n, dtype=bool)
    return np.asarray(values, dtype=bool)


def structured_quad_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Mesh:
    """Regular grid of nx * ny nodes on [0, lx] x [0, ly] with bilinear quads.

    Nodes are numbered row by row with x varying fastest; elements are listed
    counter-clockwise. Gamma_u is the left edge (x = 0), Gamma_t the right edge.
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"grid needs at least one node per direction, got {nx}x{ny}")
    xs = np.linspace(0.0, lx, nx) if nx > 1 else np.zeros(1)
    ys = np.linspace(0.0, ly, ny) if ny > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.column_stack([gx.ravel(), gy.ravel()])

    elements = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            n0 = j * nx + i
            elements.append([n0, n0 + 1, n0 + 1 + nx, n0 + nx])

    column = np.tile(np.arange(nx), ny)
    return make_mesh(
        coords,
        np.array(elements, dtype=np.int64).reshape(-1, 4),
        gamma_u=column == 0,
        gamma_t=(column == nx - 1) & (nx > 1),
    )


@dataclass(frozen=True)
class Simulation:
    """One solved experiment on a mesh.

    Attributes:
        u: (n, d) displacement field, the network input
        y: (n, t) target field (E-modulus with t=1, nodal load with t=d)
        meta: Free-form metadata such as load magnitude and position
    """

    u: np.ndarray
    y: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def check_against(self, mesh: Mesh) -> None:
        if self.u.shape[0] != mesh.n_nodes or self.y.shape[0] != mesh.n_nodes:
            raise ShapeError(
                f"simulation rows (u: {self.u.shape[0]}, y: {self.y.shape[0]}) "
                f"do not match mesh nodes {mesh.n_nodes}"
            )
        if self.u.shape[1] != mesh.dim:
            raise ShapeError(
                f"displacement width {self.u.shape[1]} does not match mesh dimension {mesh.dim}"
            )


@dataclass(frozen=True)
class Incidence:
    """Sparse send and receive matrices of one edge list.

    ``receive[i, k]`` is one when edge k ends at node i, likewise ``send``
    for its source. The index arrays are kept to tell whether the matrices
    still belong to a graph.
    """

    senders: np.ndarray
    receivers: np.ndarray
    n_nodes: int
    send: sparse.csr_matrix
    receive: sparse.csr_matrix

    @classmethod
    def build(cls, senders: np.ndarray, receivers: np.ndarray, n_nodes: int) -> "Incidence":
        return cls(
            senders=senders,
            receivers=receivers,
            n_nodes=n_nodes,
            send=incidence_matrix(senders, n_nodes),
            receive=incidence_matrix(receivers, n_nodes),
        )

    def belongs_to(self, graph: "Graph") -> bool:
        return (
            self.senders is graph.senders
            and self.receivers is graph.receivers
            and self.n_nodes == graph.n_nodes
        )


@dataclass(frozen=True)
class Graph:
    """Directed graph with one self-loop per node and optional input features.

    Edge k goes from ``senders[k]`` to ``receivers[k]``; messages are summed at
    the receiver. For a single mesh the self-loops occupy the last ``n_nodes``
    edge slots and their features are zero.

    Attributes:
        n_nodes: Number of nodes
        senders: (n_edges,) source node of each edge
        receivers: (n_edges,) target node of each edge
        edge_features: (n_edges, d+1) relative offsets x_recv - x_send and their norm
        node_features: (n_nodes, 2d+1) rows (u_i, u_mean, gamma_u flag), once assembled
        n_undirected_edges: Unique element sides
        incidence_cache: Matrices behind :attr:`incidence`; carried along by
            ``dataclasses.replace`` and rebuilt once the edge arrays change
    """

    n_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    edge_features: np.ndarray
    node_features: Optional[np.ndarray] = None
    n_undirected_edges: int = 0
    incidence_cache: Optional[Incidence] = field(default=None, repr=False, compare=False)

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    @property
    def incidence(self) -> Incidence:
        """Send and receive matrices, built on first use."""
        cached = self.incidence_cache
        if cached is None or not cached.belongs_to(self):
            cached = Incidence.build(self.senders, self.receivers, self.n_nodes)
            object.__setattr__(self, "incidence_cache", cached)
        return cached

    @property
    def n_undirected_with_self(self) -> int:
        """Undirected sides plus self-loops, the count mesh-graph tables usually report."""
        return self.n_undirected_edges + self.n_nodes

    def neighbors(self, node: int) -> np.ndarray:
        """Sources of the edges that target ``node``, self included."""
        return np.sort(self.senders[self.receivers == node])


def undirected_edges(mesh: Mesh) -> np.ndarray:
    """Unique element sides as sorted (i, j) pairs with i < j."""
    if mesh.elements.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    elements = mesh.elements
    sides = np.concatenate(
        [np.column_stack([elements[:, k], elements[:, (k + 1) % elements.shape[1]]])
         for k in range(elements.shape[1])]
    )
    sides = np.sort(sides, axis=1)
    sides = sides[sides[:, 0] != sides[:, 1]]
    return np.unique(sides, axis=0)


def build_graph(mesh: Mesh) -> Graph:
    """Build the self-informed graph of a mesh with its edge features.

    Each undirected side (i, j) yields edges i->j and j->i; self-loops follow.

    Args:
        mesh: Mesh to convert

    Returns:
        Graph without node features
    """
    mesh.validate()
    pairs = undirected_edges(mesh)
    loops = np.arange(mesh.n_nodes, dtype=np.int64)
    senders = np.concatenate([pairs[:, 0], pairs[:, 1], loops])
    receivers = np.concatenate([pairs[:, 1], pairs[:, 0], loops])

    offsets = mesh.coords[receivers] - mesh.coords[senders]
    distances = np.linalg.norm(offsets, axis=1, keepdims=True)
    edge_features = np.hstack([offsets, distances])

    graph = Graph(
        n_nodes=mesh.n_nodes,
        senders=senders,
        receivers=receivers,
        edge_features=edge_features,
        n_undirected_edges=int(pairs.shape[0]),
    )
    logger.debug(
        f"Built graph: {graph.n_nodes} nodes, {graph.n_undirected_edges} sides, "
        f"{graph.n_edges} directed edges"
    )
    return graph


def node_features(mesh: Mesh, sim: Simulation) -> np.ndarray:
    """Rows (u_i, mean displacement, gamma_u flag) of width 2d+1."""
    sim.check_against(mesh)
    u = np.asarray(sim.u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("displacement field contains NaN or infinite values")
    mean = np.broadcast_to(u.mean(axis=0), u.shape)
    return np.hstack([u, mean, mesh.gamma_u.astype(np.float64)[:, None]])


def assemble_features(mesh: Mesh, sim: Simulation, graph: Optional[Graph] = None) -> Graph:
    """Attach the node features of one simulation to the mesh graph.

    Args:
        mesh: Mesh the simulation was solved on
        sim: Simulation providing the displacement field
        graph: Prebuilt graph of ``mesh``; built on demand when omitted

    Returns:
        Graph with node and edge features populated
    """
    if graph is None:
        graph = build_graph(mesh)
    return dataclasses.replace(graph, node_features=node_features(mesh, sim))


def batch_graphs(graphs: Sequence[Graph]) -> Graph:
    """Disjoint union of graphs, node and edge rows stacked in order."""
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    if len(graphs) == 1:
        return graphs[0]
    senders: List[np.ndarray] = []
    receivers: List[np.ndarray] = []
    offset = 0
    for graph in graphs:
        senders.append(graph.senders + offset)
        receivers.append(graph.receivers + offset)
        offset += graph.n_nodes
    features = None
    if all(graph.node_features is not None for graph in graphs):
        features = np.vstack([graph.node_features for graph in graphs])
    return Graph(
        n_nodes=offset,
        senders=np.concatenate(senders),
        receivers=np.concatenate(receivers),
        edge_features=np.vstack([graph.edge_features for graph in graphs]),
        node_features=features,
        n_undirected_edges=sum(graph.n_undirected_edges for graph in graphs),
    )
