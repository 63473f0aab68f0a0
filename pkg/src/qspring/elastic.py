"""Implicit spring machinery: graph operators, per-spring direction fit, prefactored solve.

The implicit step minimizes
    0.5 * (X - Y)' M (X - Y) + h^2 * E_spring(X)
by alternating a closed-form fit of rest-length spring directions with a linear
solve against the constant matrix M + h^2 L, factored once per (h, topology).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import (
    ConfigError,
    FactorizationError,
    MassModel,
    SpringTopology,
    as_points,
    frozen_array,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ElasticOperators:
    """Stiffness-weighted graph Laplacian L (3n x 3n) and spring assembly map J (3n x 3s)."""

    laplacian: sp.csr_matrix
    assembly: sp.csr_matrix
    topology: SpringTopology


def assemble_operators(topology: SpringTopology) -> ElasticOperators:
    """Build L and J from spring connectivity, lifted to 3 dof per vertex."""
    n = topology.vertex_count
    s = topology.spring_count
    i, j, k = topology.i, topology.j, topology.stiffness
    # n x n weighted Laplacian: k on the diagonal at both endpoints, -k across
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([k, k, -k, -k])
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    # n x s assembly: +k at the first endpoint, -k at the second
    rows = np.concatenate([i, j])
    cols = np.concatenate([np.arange(s), np.arange(s)])
    vals = np.concatenate([k, -k])
    asm = sp.coo_matrix((vals, (rows, cols)), shape=(n, s)).tocsr()
    eye3 = sp.identity(3, format="csr")
    return ElasticOperators(
        laplacian=sp.kron(lap, eye3, format="csr"),
        assembly=sp.kron(asm, eye3, format="csr"),
        topology=topology,
    )


def local_step(positions: np.ndarray, topology: SpringTopology, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Optimal rest-length directions (3s,): each spring vector radially rescaled to its rest length.

    Coincident endpoints get a deterministic +x fallback direction.
    """
    pts = as_points(positions)
    diff = pts[topology.i] - pts[topology.j]
    dist = np.linalg.norm(diff, axis=1)
    bad = dist < softening_epsilon
    if np.any(bad):
        log.warning("local_step: %d spring(s) with coincident endpoints, using +x fallback", int(bad.sum()))
        diff = diff.copy()
        diff[bad] = (1.0, 0.0, 0.0)
        dist = np.where(bad, 1.0, dist)
    d = diff * (topology.rest_length / dist)[:, None]
    return d.reshape(-1)


def elastic_energy(positions: np.ndarray, topology: SpringTopology) -> float:
    """Total Hooke energy sum(k/2 * (|xi - xj| - rest)^2) in Joules."""
    pts = as_points(positions)
    dist = np.linalg.norm(pts[topology.i] - pts[topology.j], axis=1)
    return float(0.5 * np.sum(topology.stiffness * (dist - topology.rest_length) ** 2))


def spring_forces(positions: np.ndarray, topology: SpringTopology, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Exact nonlinear spring forces (3n,), used by the explicit integrators."""
    pts = as_points(positions)
    n = topology.vertex_count
    if topology.spring_count == 0:
        return np.zeros(3 * n)
    diff = pts[topology.i] - pts[topology.j]
    dist = np.linalg.norm(diff, axis=1)
    dist = np.maximum(dist, max(softening_epsilon, np.finfo(float).tiny))
    # force on endpoint i: -k (dist - rest) * unit(i -> j direction)
    per_spring = (-topology.stiffness * (dist - topology.rest_length) / dist)[:, None] * diff
    out = np.zeros((n, 3))
    np.add.at(out, topology.i, per_spring)
    np.add.at(out, topology.j, -per_spring)
    return out.reshape(-1)


def directions_jacobian(positions: np.ndarray, topology: SpringTopology, softening_epsilon: float = 1e-6) -> sp.csr_matrix:
    """Sparse (3s x 3n) derivative of the local step output w.r.t. positions.

    Per spring the block is (rest/dist) * (I - u u') applied with opposite signs
    to the two endpoints; springs with coincident endpoints contribute zero.
    """
    pts = as_points(positions)
    n = topology.vertex_count
    s = topology.spring_count
    if s == 0:
        return sp.csr_matrix((0, 3 * n))
    diff = pts[topology.i] - pts[topology.j]
    dist = np.linalg.norm(diff, axis=1)
    ok = dist >= softening_epsilon
    dist = np.where(ok, dist, 1.0)
    unit = diff / dist[:, None]
    scale = np.where(ok, topology.rest_length / dist, 0.0)
    blocks = scale[:, None, None] * (np.eye(3)[None, :, :] - unit[:, :, None] * unit[:, None, :])  # (s,3,3)

    sub_rows = np.repeat(np.arange(3), 3)   # row offsets of a 3x3 block
    sub_cols = np.tile(np.arange(3), 3)     # col offsets
    spring_rows = (3 * np.arange(s))[:, None] + sub_rows[None, :]        # (s, 9)
    cols_i = (3 * topology.i)[:, None] + sub_cols[None, :]
    cols_j = (3 * topology.j)[:, None] + sub_cols[None, :]
    flat = blocks.reshape(s, 9)
    rows = np.concatenate([spring_rows.ravel(), spring_rows.ravel()])
    cols = np.concatenate([cols_i.ravel(), cols_j.ravel()])
    vals = np.concatenate([flat.ravel(), -flat.ravel()])
    return sp.coo_matrix((vals, (rows, cols)), shape=(3 * s, 3 * n)).tocsr()


@dataclass
class PrefactoredSystem:
    """Factorization of M + h^2 L, valid while h and the topology stay fixed.

    Supports Dirichlet pinning: pinned vertices keep prescribed coordinates and
    their rows/columns are eliminated from the solve.
    """

    h: float
    topology: SpringTopology
    mass_diagonal: np.ndarray          # (3n,)
    matrix: sp.csc_matrix              # full M + h^2 L, for diagnostics
    pinned_vertices: np.ndarray        # (p,) vertex indices
    _free: np.ndarray = None           # (3n,) bool mask over dofs
    _lu: spla.SuperLU = None
    _coupling: sp.csc_matrix = None    # A[free, pinned]

    def solve(self, rhs: np.ndarray, pinned_values: Optional[np.ndarray] = None) -> np.ndarray:
        """Solve (M + h^2 L) x = rhs, holding pinned dofs at `pinned_values`."""
        if self.pinned_vertices.size == 0:
            return self._lu.solve(rhs)
        if pinned_values is None:
            raise ConfigError("pinned system solve requires pinned_values")
        x = np.empty_like(rhs)
        pinned_dofs = ~self._free
        b = rhs[self._free] - self._coupling @ pinned_values
        x[self._free] = self._lu.solve(b)
        x[pinned_dofs] = pinned_values
        return x

    def pinned_dof_values(self, positions: np.ndarray) -> np.ndarray:
        return positions[~self._free]


def prefactor(
    masses: MassModel,
    operators: ElasticOperators,
    h: float,
    pinned_vertices: Optional[np.ndarray] = None,
) -> PrefactoredSystem:
    """Factor M + h^2 L once for reuse across every frame at this timestep."""
    if not h > 0.0:
        raise ConfigError("h must be > 0")
    n = operators.topology.vertex_count
    if masses.vertex_count != n:
        raise ConfigError("mass model does not match topology")
    diag = masses.diagonal()
    a = (sp.diags(diag) + (h * h) * operators.laplacian).tocsc()
    pinned = np.asarray(pinned_vertices if pinned_vertices is not None else [], dtype=int).reshape(-1)
    if pinned.size and (pinned.min() < 0 or pinned.max() >= n):
        raise ConfigError("pinned vertex index out of range")
    free = np.ones(3 * n, dtype=bool)
    if pinned.size:
        dofs = (3 * pinned[:, None] + np.arange(3)[None, :]).ravel()
        free[dofs] = False
    sub = a[free][:, free].tocsc() if pinned.size else a
    try:
        lu = spla.splu(sub)
    except RuntimeError as exc:
        raise FactorizationError(f"system matrix is ill-conditioned: {exc}") from exc
    coupling = a[free][:, ~free].tocsc() if pinned.size else None
    return PrefactoredSystem(
        h=float(h),
        topology=operators.topology,
        mass_diagonal=frozen_array(diag),
        matrix=a,
        pinned_vertices=frozen_array(pinned, dtype=np.int64),
        _free=free,
        _lu=lu,
        _coupling=coupling,
    )
