"""Synthetic datasets: Gaussian-process modulus fields on a plate, loaded cantilevers.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.

Simulation k of a dataset generated with seed s draws from its own stream
``default_rng(s ^ k)``, so simulations are independent of generation order.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from vgnn.dataset import Dataset
from vgnn.errors import NumericalError
from vgnn.fem import LinearElasticSolver, fixed_dofs_for, traction_loads
from vgnn.graph import Mesh, Simulation, make_mesh, structured_quad_mesh

logger = logging.getLogger(__name__)

MAX_JITTER = 1e-6


@dataclass
class GpFieldConfig:
    """Random modulus field E = alpha + gamma * exp(g), g ~ GP(0, k_SE)."""

    nx: int = 12
    ny: int = 12
    length: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0
    length_scale: float = 1.0
    jitter: float = 1e-10

    def validate(self) -> None:
        if self.length_scale <= 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"GP grid needs at least 2x2 nodes, got {self.nx}x{self.ny}")


def se_kernel(a: np.ndarray, b: np.ndarray, length_scale: float) -> np.ndarray:
    """exp(-|x - x'|^2 / (2 l^2)) between the rows of ``a`` and ``b``."""
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * length_scale ** 2))


def stable_cholesky(K: np.ndarray, jitter: float) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter*I, raising the jitter tenfold on failure.

    Raises:
        NumericalError: If the factorisation fails at jitter 1e-6
    """
    eye = np.eye(K.shape[0])
    current = jitter
    while True:
        try:
            return scipy.linalg.cholesky(K + current * eye, lower=True), current
        except np.linalg.LinAlgError:
            if current >= MAX_JITTER:
                raise NumericalError(
                    f"covariance not positive definite even with jitter {current:g}"
                ) from None
            current = MAX_JITTER if current == 0 else min(current * 10.0, MAX_JITTER)
            logger.warning(f"Cholesky failed, retrying with jitter {current:g}")


class GpFieldSampler:
    """Draws modulus fields on fixed node coordinates; the factor is computed once."""

    def __init__(self, cfg: GpFieldConfig, coords: np.ndarray):
        cfg.validate()
        self.cfg = cfg
        self.coords = np.asarray(coords, dtype=np.float64)
        self.kernel = se_kernel(self.coords, self.coords, cfg.length_scale)
        self.factor, self.jitter = stable_cholesky(self.kernel, cfg.jitter)

    def sample(
        self, rng: Optional[np.random.Generator] = None, z: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Return (g, E) per node, with ``z`` the standard-normal draw if pinned."""
        if z is None:
            if rng is None:
                raise ValueError("sample needs an rng or a pinned z")
            z = rng.standard_normal(self.coords.shape[0])
        g = self.factor @ np.asarray(z, dtype=np.float64)
        return g, self.cfg.alpha + self.cfg.gamma * np.exp(g)


def sample_gp_field(
    cfg: GpFieldConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """One field (g, E) on the cfg's grid of nx * ny nodes over [0, length]^2."""
    mesh = structured_quad_mesh(cfg.nx, cfg.ny, cfg.length, cfg.length)
    return GpFieldSampler(cfg, mesh.coords).sample(rng)


# ----------------------------------------------------------------------------
# Plate with a random modulus field
# ----------------------------------------------------------------------------


@dataclass
class PlateConfig:
    """Square plate pulled by a uniform traction on its right edge.

    The left edge has u_x = 0 and the origin node is fixed in both directions.
    """

    grid: int = 12
    length: float = 1.0
    traction: float = 1.5
    nu: float = 0.3
    thickness: float = 1.0
    gp: GpFieldConfig = field(default_factory=GpFieldConfig)

    def gp_config(self) -> GpFieldConfig:
        return GpFieldConfig(
            nx=self.grid,
            ny=self.grid,
            length=self.length,
            alpha=self.gp.alpha,
            gamma=self.gp.gamma,
            length_scale=self.gp.length_scale,
            jitter=self.gp.jitter,
        )


@dataclass
class PlateProblem:
    """Mesh, supports and loads of the plate; the modulus varies per simulation."""

    mesh: Mesh
    fixed_dofs: np.ndarray
    forces: np.ndarray
    nu: float
    thickness: float

    @classmethod
    def build(cls, cfg: PlateConfig) -> "PlateProblem":
        if not 0.0 < cfg.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {cfg.nu}")
        mesh = structured_quad_mesh(cfg.grid, cfg.grid, cfg.length, cfg.length)
        left = mesh.boundary_nodes("gamma_u")
        origin = int(np.argmin(np.linalg.norm(mesh.coords, axis=1)))
        forces = traction_loads(
            mesh, mesh.boundary_nodes("gamma_t"), (cfg.traction, 0.0), cfg.thickness
        )
        return cls(
            mesh=mesh,
            fixed_dofs=fixed_dofs_for(nodes_x=left, nodes_y=[origin]),
            forces=forces,
            nu=cfg.nu,
            thickness=cfg.thickness,
        )

    def solve(self, nodal_E: np.ndarray) -> np.ndarray:
        """Displacement field (n, 2) for the modulus field ``nodal_E``."""
        solver = LinearElasticSolver(self.mesh, nodal_E, self.nu, self.fixed_dofs, self.thickness)
        return solver.solve(self.forces).u


def generate_plate_dataset(
    cfg: PlateConfig, n_sims: int, seed: int, n_train: Optional[int] = None
) -> Dataset:
    """Solve ``n_sims`` plates with independent GP modulus fields.

    Each simulation has input u (displacements) and target y = E per node.
    """
    if n_sims < 0:
        raise ValueError(f"n_sims must be >= 0, got {n_sims}")
    problem = PlateProblem.build(cfg)
    sampler = GpFieldSampler(cfg.gp_config(), problem.mesh.coords)

    simulations: List[Simulation] = []
    for k in range(n_sims):
        rng = np.random.default_rng(seed ^ k)
        _, nodal_E = sampler.sample(rng)
        u = problem.solve(nodal_E)
        simulations.append(Simulation(u=u, y=nodal_E[:, None], meta={"index": k}))

    logger.info(
        f"Generated {n_sims} plate simulations on a {cfg.grid}x{cfg.grid} grid "
        f"(jitter {sampler.jitter:g})"
    )
    return Dataset(
        mesh=problem.mesh,
        simulations=simulations,
        kind="plate",
        n_train=n_train,
        meta={
            "grid": cfg.grid,
            "traction": cfg.traction,
            "nu": cfg.nu,
            "seed": seed,
            "alpha": cfg.gp.alpha,
            "gamma": cfg.gp.gamma,
            "length_scale": cfg.gp.length_scale,
        },
    )


# ----------------------------------------------------------------------------
# Cantilever with a single point load
# ----------------------------------------------------------------------------


@dataclass
class BeamConfig:
    """Cantilever fixed at its left edge, loaded downward at one top-edge node."""

    length: float = 40.0
    height: float = 10.0
    nx: int = 21
    ny: int = 6
    E: float = 1000.0
    nu: float = 0.3
    thickness: float = 10.0
    n_positions: int = 13
    forces: Tuple[float, ...] = tuple(float(f) for f in range(5, 105, 5))
    train_fraction: float = 0.8


@dataclass
class BeamProblem:
    """Homogeneous cantilever; ``positions`` are the admissible loaded nodes."""

    mesh: Mesh
    solver: LinearElasticSolver
    positions: np.ndarray

    @classmethod
    def build(cls, cfg: BeamConfig) -> "BeamProblem":
        if not 1 <= cfg.n_positions <= cfg.nx - 1:
            raise ValueError(f"n_positions must lie in 1..{cfg.nx - 1}, got {cfg.n_positions}")
        grid = structured_quad_mesh(cfg.nx, cfg.ny, cfg.length, cfg.height)
        top_row = np.arange((cfg.ny - 1) * cfg.nx, cfg.ny * cfg.nx)
        positions = top_row[cfg.nx - cfg.n_positions :]
        gamma_t = np.zeros(grid.n_nodes, dtype=bool)
        gamma_t[positions] = True
        mesh = make_mesh(grid.coords, grid.elements, grid.gamma_u, gamma_t)

        left = mesh.boundary_nodes("gamma_u")
        solver = LinearElasticSolver(
            mesh,
            np.full(mesh.n_nodes, cfg.E),
            cfg.nu,
            fixed_dofs_for(nodes_x=left, nodes_y=left),
            cfg.thickness,
        )
        return cls(mesh=mesh, solver=solver, positions=positions)

    def point_load(self, node: int, magnitude: float) -> np.ndarray:
        """Per-node load vectors (n, 2): (0, -F) at ``node``, zero elsewhere."""
        loads = np.zeros((self.mesh.n_nodes, 2))
        loads[node, 1] = -magnitude
        return loads

    def solve(self, node: int, magnitude: float) -> Tuple[np.ndarray, np.ndarray]:
        loads = self.point_load(node, magnitude)
        return self.solver.solve(loads.reshape(-1)).u, loads


def generate_beam_dataset(cfg: BeamConfig, seed: int) -> Dataset:
    """Every (position, force) pair, shuffled by ``seed`` and split into train and test.

    Target y is the per-node load vector, zero except at the loaded node.
    """
    problem = BeamProblem.build(cfg)
    simulations: List[Simulation] = []
    for node in problem.positions:
        for magnitude in cfg.forces:
            u, loads = problem.solve(int(node), magnitude)
            simulations.append(
                Simulation(u=u, y=loads, meta={"node": int(node), "force": float(magnitude)})
            )

    order = np.random.default_rng(seed).permutation(len(simulations))
    simulations = [simulations[k] for k in order]
    n_train = int(round(cfg.train_fraction * len(simulations)))
    logger.info(
        f"Generated {len(simulations)} beam simulations ({problem.positions.size} positions x "
        f"{len(cfg.forces)} forces), {n_train} for training"
    )
    return Dataset(
        mesh=problem.mesh,
        simulations=simulations,
        kind="beam",
        n_train=n_train,
        meta={
            "length": cfg.length,
            "height": cfg.height,
            "E": cfg.E,
            "nu": cfg.nu,
            "seed": seed,
        },
    )
