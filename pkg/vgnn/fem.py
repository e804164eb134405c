"""Plane-stress linear elasticity on bilinear quadrilateral meshes.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

Degrees of freedom are interleaved per node: dof 2*i is u_x of node i and
dof 2*i+1 is u_y. Element moduli are the mean of the element's nodal values.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from vgnn.errors import MeshError, NumericalError
from vgnn.graph import Mesh, undirected_edges

logger = logging.getLogger(__name__)

_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = ((-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G))

RESIDUAL_TOL = 1e-10


def plane_stress_matrix(E: float, nu: float) -> np.ndarray:
    """Constitutive matrix mapping (eps_xx, eps_yy, gamma_xy) to stresses."""
    if not 0.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {nu}")
    factor = E / (1.0 - nu * nu)
    return factor * np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]
    )


def _shape_derivatives(xi: float, eta: float) -> np.ndarray:
    return 0.25 * np.array(
        [
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ]
    )


def element_stiffness(
    xy: np.ndarray, E: np.ndarray, nu: float, thickness: float = 1.0
) -> np.ndarray:
    """Stiffness matrices of bilinear quads with 2x2 Gauss integration.

    Args:
        xy: (n_elements, 4, 2) corner coordinates, counter-clockwise
        E: (n_elements,) element moduli
        nu: Poisson ratio
        thickness: Out-of-plane thickness

    Returns:
        (n_elements, 8, 8) element stiffness matrices
    """
    xy = np.asarray(xy, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    D0 = plane_stress_matrix(1.0, nu)
    n_el = xy.shape[0]
    K = np.zeros((n_el, 8, 8))
    for xi, eta in GAUSS_POINTS:
        dN = _shape_derivatives(xi, eta)
        J = np.einsum("ak,ekb->eab", dN, xy)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            bad = int(np.flatnonzero(det <= 0)[0])
            raise MeshError(f"element {bad} is degenerate or clockwise (det J = {det[bad]:.3g})")
        dNdx = np.linalg.solve(J, np.broadcast_to(dN, (n_el, 2, 4)))
        B = np.zeros((n_el, 3, 8))
        B[:, 0, 0::2] = dNdx[:, 0]
        B[:, 1, 1::2] = dNdx[:, 1]
        B[:, 2, 0::2] = dNdx[:, 1]
        B[:, 2, 1::2] = dNdx[:, 0]
        K += np.einsum("eki,kl,elj->eij", B, D0, B) * (E * det * thickness)[:, None, None]
    return K


def element_moduli(mesh: Mesh, nodal_E: np.ndarray) -> np.ndarray:
    """Per-element modulus as the mean of its nodal values."""
    nodal_E = np.asarray(nodal_E, dtype=np.float64).reshape(-1)
    if nodal_E.shape[0] != mesh.n_nodes:
        raise MeshError(f"{nodal_E.shape[0]} nodal moduli for {mesh.n_nodes} nodes")
    if np.any(nodal_E <= 0):
        raise MeshError("moduli must be positive")
    return nodal_E[mesh.elements].mean(axis=1)


def assemble_stiffness(
    mesh: Mesh, element_E: np.ndarray, nu: float, thickness: float = 1.0
) -> sp.csr_matrix:
    """Global stiffness matrix in CSR format."""
    if mesh.dim != 2 or mesh.elements.ndim != 2 or mesh.elements.shape[1] != 4:
        raise MeshError("plane-stress assembly needs a 2D mesh of quadrilaterals")
    Ke = element_stiffness(mesh.coords[mesh.elements], element_E, nu, thickness)
    dofs = np.stack([2 * mesh.elements, 2 * mesh.elements + 1], axis=2).reshape(-1, 8)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    n_dof = 2 * mesh.n_nodes
    return sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n_dof, n_dof)).tocsr()


def traction_loads(
    mesh: Mesh, nodes: Sequence[int], traction: Sequence[float], thickness: float = 1.0
) -> np.ndarray:
    """Consistent nodal forces of a uniform traction on the boundary through ``nodes``.

    Every element side with both ends in ``nodes`` carries traction * length *
    thickness, split equally between its two ends.
    """
    selected = np.zeros(mesh.n_nodes, dtype=bool)
    selected[np.asarray(nodes, dtype=np.int64)] = True
    sides = undirected_edges(mesh)
    sides = sides[selected[sides[:, 0]] & selected[sides[:, 1]]]
    lengths = np.linalg.norm(mesh.coords[sides[:, 1]] - mesh.coords[sides[:, 0]], axis=1)

    forces = np.zeros((mesh.n_nodes, 2))
    share = 0.5 * thickness * lengths[:, None] * np.asarray(traction, dtype=np.float64)[None, :]
    np.add.at(forces, sides[:, 0], share)
    np.add.at(forces, sides[:, 1], share)
    return forces.reshape(-1)


@dataclass
class FemSolution:
    """Displacements and reactions of one load case.

    Attributes:
        u: (n, 2) nodal displacements
        forces: (2n,) applied nodal forces
        reactions: (2n,) support reactions, zero on free dofs
        strain_energy: 0.5 * u^T K u
    """

    u: np.ndarray
    forces: np.ndarray
    reactions: np.ndarray
    strain_energy: float

    def equilibrium_residual(self) -> float:
        """Net force of applied loads plus reactions, relative to the load size."""
        net = (self.forces + self.reactions).reshape(-1, 2).sum(axis=0)
        scale = max(np.abs(self.forces).reshape(-1, 2).sum(axis=0).max(), 1e-300)
        return float(np.linalg.norm(net) / scale)


class LinearElasticSolver:
    """Factorises the reduced stiffness once and solves any number of load cases."""

    def __init__(
        self,
        mesh: Mesh,
        nodal_E: np.ndarray,
        nu: float = 0.3,
        fixed_dofs: Sequence[int] = (),
        thickness: float = 1.0,
    ):
        """Initialize solver.

        Args:
            mesh: 2D quadrilateral mesh
            nodal_E: (n,) Young's modulus per node
            nu: Poisson ratio
            fixed_dofs: Dofs held at zero displacement
            thickness: Out-of-plane thickness

        Raises:
            MeshError: If the boundary conditions leave the system singular
        """
        self.mesh = mesh
        self.nu = nu
        self.thickness = thickness
        n_dof = 2 * mesh.n_nodes
        self.fixed = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
        if self.fixed.size and (self.fixed[0] < 0 or self.fixed[-1] >= n_dof):
            raise MeshError(f"fixed dofs must lie in 0..{n_dof - 1}")
        _check_supports(self.fixed)
        self.free = np.setdiff1d(np.arange(n_dof), self.fixed)

        self.K = assemble_stiffness(mesh, element_moduli(mesh, nodal_E), nu, thickness)
        K_ff = self.K[self.free][:, self.free].tocsc()
        try:
            self._lu = splu(K_ff)
        except RuntimeError as e:
            raise MeshError(
                f"stiffness is singular with {self.fixed.size} fixed dofs "
                f"({_describe_supports(self.fixed)}): {e}"
            ) from e
        diag = self._lu.U.diagonal()
        if not np.all(np.isfinite(diag)) or np.min(np.abs(diag)) <= 1e-12 * np.max(np.abs(diag)):
            raise MeshError(
                f"stiffness is numerically singular ({_describe_supports(self.fixed)}); "
                "check for unconstrained rigid-body motion or unconnected nodes"
            )
        logger.debug(f"Factorised stiffness: {self.free.size} free of {n_dof} dofs")

    def solve(self, forces: np.ndarray) -> FemSolution:
        """Displacements for the nodal force vector ``forces`` (length 2n).

        Raises:
            NumericalError: If the solve residual exceeds 1e-10 * ||f||
        """
        forces = np.asarray(forces, dtype=np.float64).reshape(-1)
        n_dof = 2 * self.mesh.n_nodes
        if forces.shape[0] != n_dof:
            raise MeshError(f"force vector has {forces.shape[0]} entries, expected {n_dof}")

        f_free = forces[self.free]
        u = np.zeros(n_dof)
        if np.any(f_free):
            u[self.free] = self._lu.solve(f_free)

        internal = self.K @ u
        residual = np.linalg.norm(internal[self.free] - f_free)
        f_norm = np.linalg.norm(f_free)
        if f_norm > 0 and residual > RESIDUAL_TOL * f_norm:
            raise NumericalError(
                f"solve residual {residual:.3e} exceeds tolerance for ||f|| = {f_norm:.3e}"
            )

        reactions = np.zeros(n_dof)
        reactions[self.fixed] = internal[self.fixed] - forces[self.fixed]
        return FemSolution(
            u=u.reshape(-1, 2),
            forces=forces,
            reactions=reactions,
            strain_energy=float(0.5 * u @ internal),
        )

    def is_positive_definite(self) -> bool:
        """Dense Cholesky test of the reduced stiffness; small meshes only."""
        try:
            np.linalg.cholesky(self.K[self.free][:, self.free].toarray())
        except np.linalg.LinAlgError:
            return False
        return True


def _check_supports(fixed: np.ndarray) -> None:
    components = set((fixed % 2).tolist())
    if fixed.size < 3 or components != {0, 1}:
        raise MeshError(
            "boundary conditions leave rigid-body motion free: need at least three "
            f"fixed dofs covering both directions, got {_describe_supports(fixed)}"
        )


def _describe_supports(fixed: np.ndarray) -> str:
    n_x = int(np.sum(fixed % 2 == 0))
    return f"{n_x} u_x and {fixed.size - n_x} u_y constraints"


def solve_plane_stress(
    mesh: Mesh,
    nodal_E: np.ndarray,
    fixed_dofs: Sequence[int],
    forces: np.ndarray,
    nu: float = 0.3,
    thickness: float = 1.0,
) -> FemSolution:
    """Single load case convenience wrapper around :class:`LinearElasticSolver`."""
    return LinearElasticSolver(mesh, nodal_E, nu, fixed_dofs, thickness).solve(forces)


def strain_energy(solution: FemSolution) -> float:
    return solution.strain_energy


def fixed_dofs_for(nodes_x: Sequence[int] = (), nodes_y: Sequence[int] = ()) -> np.ndarray:
    """Dofs fixing u_x at ``nodes_x`` and u_y at ``nodes_y``."""
    nodes_x = np.asarray(nodes_x, dtype=np.int64)
    nodes_y = np.asarray(nodes_y, dtype=np.int64)
    return np.unique(np.concatenate([2 * nodes_x, 2 * nodes_y + 1]))
