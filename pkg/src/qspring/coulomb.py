"""Exact pairwise Coulomb forces, energy, and their derivatives.

This is the O(n^2) reference path: every force backend and every gradient is
validated against it. Summation is chunked but index-ordered, so results are
deterministic run to run.
"""
from __future__ import annotations

import numpy as np

from .model import ChargeSet, ExternalForcing

_CHUNK = 256


def _safe_dist(diff: np.ndarray, softening_epsilon: float) -> np.ndarray:
    dist = np.linalg.norm(diff, axis=-1)
    return np.maximum(dist, max(softening_epsilon, np.finfo(float).tiny))


def pairwise_forces_brute(points: np.ndarray, charges: ChargeSet, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Force (n, 3) on every charge from all the others, distances clamped below epsilon."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    out = np.empty((n, 3))
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]      # (c, n, 3)
        dist = _safe_dist(diff, softening_epsilon)
        scale = kc * q[start:stop, None] * q[None, :] / dist**3
        # a charge exerts no force on itself
        idx = np.arange(start, stop)
        scale[idx - start, idx] = 0.0
        out[start:stop] = np.einsum("cn,cnd->cd", scale, diff)
    return out


def coulomb_energy(points: np.ndarray, charges: ChargeSet, softening_epsilon: float = 1e-6) -> float:
    """Pair potential sum k q_i q_j / max(r_ij, eps) over unordered pairs, in Joules."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    total = 0.0
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        dist = _safe_dist(diff, softening_epsilon)
        pair = q[start:stop, None] * q[None, :] / dist
        idx = np.arange(start, stop)
        pair[idx - start, idx] = 0.0
        total += float(pair.sum())
    return 0.5 * charges.coulomb_constant * total


def _pair_blocks(pts: np.ndarray, charges: ChargeSet, softening_epsilon: float) -> np.ndarray:
    """(n, n, 3, 3) blocks k q_i q_j * (I/r^3 - 3 u u'/r^5); diagonal and clamped pairs zero."""
    n = pts.shape[0]
    q = charges.charges
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    inside = dist < softening_epsilon
    dist = np.where(inside, 1.0, dist)
    eye = np.eye(3)
    blocks = eye[None, None, :, :] / dist[:, :, None, None] ** 3
    blocks = blocks - 3.0 * diff[:, :, :, None] * diff[:, :, None, :] / dist[:, :, None, None] ** 5
    blocks *= (charges.coulomb_constant * q[:, None] * q[None, :])[:, :, None, None]
    wipe = inside | np.eye(n, dtype=bool)
    blocks[wipe] = 0.0
    return blocks


def force_jacobian_positions(points: np.ndarray, charges: ChargeSet, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Dense (3n, 3n) derivative of the pairwise forces w.r.t. positions.

    Pairs closer than the softening distance are excluded, matching the clamped
    force. Block row sums vanish (translation invariance) and the operator is
    symmetric.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    blocks = _pair_blocks(pts, charges, softening_epsilon)
    jac = np.zeros((n, 3, n, 3))
    # dF_i/dx_j = -B_ij for j != i, dF_i/dx_i = sum_j B_ij
    jac -= blocks.transpose(0, 2, 1, 3)
    diag = blocks.sum(axis=1)
    idx = np.arange(n)
    jac[idx, :, idx, :] += diag
    return jac.reshape(3 * n, 3 * n)


def force_gradient_charges(points: np.ndarray, charges: ChargeSet, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Dense (3n, n) derivative of the pairwise forces w.r.t. the charge values."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    diff = pts[:, None, :] - pts[None, :, :]
    dist = _safe_dist(diff, softening_epsilon)
    geom = kc * diff / dist[:, :, None] ** 3       # (n, n, 3), row i col j
    geom[np.arange(n), np.arange(n)] = 0.0
    grad = np.zeros((n, 3, n))
    # dF_i/dq_m for m != i: q_i * geom_im ; dF_i/dq_i: sum_j q_j * geom_ij
    grad += q[:, None, None] * geom.transpose(0, 2, 1)
    diag = np.einsum("ijd,j->id", geom, q)
    idx = np.arange(n)
    grad[idx, :, idx] = diag
    return grad.reshape(3 * n, n)


def force_jacobian_vector_product(
    points: np.ndarray, charges: ChargeSet, vector: np.ndarray, softening_epsilon: float = 1e-6
) -> np.ndarray:
    """(dF/dX) @ vector without forming the dense operator; O(n^2) time, O(n) chunks."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    v = np.asarray(vector, dtype=float).reshape(-1, 3)
    q = charges.charges
    kc = charges.coulomb_constant
    out = np.empty((n, 3))
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]          # (c, n, 3)
        dv = v[start:stop, None, :] - v[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        inside = dist < softening_epsilon
        idx = np.arange(start, stop)
        inside[idx - start, idx] = True  # self pairs contribute nothing
        dist = np.where(inside, 1.0, dist)
        scale = np.where(inside, 0.0, kc * q[start:stop, None] * q[None, :] / dist**3)
        dot = np.einsum("cnd,cnd->cn", diff, dv) / dist**2
        term = dv - 3.0 * dot[:, :, None] * diff
        out[start:stop] = np.einsum("cn,cnd->cd", scale, term)
    return out.reshape(-1)


def external_force_jacobian_vector_product(
    points: np.ndarray,
    charges: ChargeSet,
    forcing: ExternalForcing,
    vector: np.ndarray,
    softening_epsilon: float = 1e-6,
) -> np.ndarray:
    """Block-diagonal free-charge force Jacobian applied to a vector."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if forcing.external_charges.size == 0:
        return np.zeros(3 * n)
    v = np.asarray(vector, dtype=float).reshape(-1, 3)
    diff = pts[:, None, :] - forcing.external_positions[None, :, :]  # (n, e, 3)
    dist = np.linalg.norm(diff, axis=2)
    inside = dist < softening_epsilon
    dist = np.where(inside, 1.0, dist)
    scale = np.where(
        inside, 0.0,
        charges.coulomb_constant * charges.charges[:, None] * forcing.external_charges[None, :] / dist**3,
    )
    dot = np.einsum("ned,nd->ne", diff, v) / dist**2
    term = v[:, None, :] - 3.0 * dot[:, :, None] * diff
    return np.einsum("ne,ned->nd", scale, term).reshape(-1)


def force_gradient_charges_tied(
    points: np.ndarray,
    charges: ChargeSet,
    forcing: ExternalForcing,
    selected: np.ndarray,
    softening_epsilon: float = 1e-6,
) -> np.ndarray:
    """d(total explicit force)/d(theta) when one theta drives every selected charge.

    Sums the per-charge gradient columns analytically: a selected vertex i
    feels its own column (the field of everyone else) and every vertex feels
    the unit fields of the selected ones, scaled by its own charge. Field and
    free-charge forces of selected vertices scale linearly too.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    sel_mask = np.zeros(n, dtype=bool)
    sel_mask[selected] = True
    tiny = max(softening_epsilon, np.finfo(float).tiny)
    out = np.zeros((n, 3))
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), tiny)
        idx = np.arange(start, stop)
        geom = kc * diff / dist[:, :, None] ** 3
        geom[idx - start, idx] = 0.0
        # own column: field of all others at a selected vertex
        own = np.einsum("cnd,n->cd", geom, q)
        out[start:stop] += sel_mask[start:stop, None] * own
        # columns of the other selected vertices, scaled by this vertex's charge
        unit_sel = np.einsum("cnd,n->cd", geom, sel_mask.astype(float))
        out[start:stop] += q[start:stop, None] * unit_sel
    if forcing.field is not None:
        e = np.asarray(forcing.field(pts), dtype=float)
        out[sel_mask] += e[sel_mask]
    if forcing.external_charges.size:
        diff = pts[:, None, :] - forcing.external_positions[None, :, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), tiny)
        scale = kc * forcing.external_charges[None, :] / dist**3
        ext = np.einsum("ne,ned->nd", scale, diff)
        out[sel_mask] += ext[sel_mask]
    return out.reshape(-1)


def external_force_jacobian_positions(
    points: np.ndarray, charges: ChargeSet, forcing: ExternalForcing, softening_epsilon: float = 1e-6
) -> np.ndarray:
    """Dense (3n, 3n) position derivative of the free-external-charge forces (block diagonal)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    jac = np.zeros((n, 3, n, 3))
    if forcing.external_charges.size:
        diff = pts[:, None, :] - forcing.external_positions[None, :, :]  # (n, e, 3)
        dist = np.linalg.norm(diff, axis=2)
        inside = dist < softening_epsilon
        dist = np.where(inside, 1.0, dist)
        eye = np.eye(3)
        blocks = eye[None, None, :, :] / dist[:, :, None, None] ** 3
        blocks = blocks - 3.0 * diff[:, :, :, None] * diff[:, :, None, :] / dist[:, :, None, None] ** 5
        blocks *= (charges.coulomb_constant * charges.charges[:, None] * forcing.external_charges[None, :])[:, :, None, None]
        blocks[inside] = 0.0
        idx = np.arange(n)
        jac[idx, :, idx, :] = blocks.sum(axis=1)
    return jac.reshape(3 * n, 3 * n)


def external_force_gradient_charges(
    points: np.ndarray, charges: ChargeSet, forcing: ExternalForcing, softening_epsilon: float = 1e-6
) -> np.ndarray:
    """Dense (3n, n) charge derivative of field and free-external-charge forces."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    grad = np.zeros((n, 3, n))
    per_vertex = np.zeros((n, 3))
    if forcing.field is not None:
        per_vertex += np.asarray(forcing.field(pts), dtype=float)
    if forcing.external_charges.size:
        diff = pts[:, None, :] - forcing.external_positions[None, :, :]
        dist = _safe_dist(diff, softening_epsilon)
        scale = charges.coulomb_constant * forcing.external_charges[None, :] / dist**3
        per_vertex += np.einsum("ne,ned->nd", scale, diff)
    idx = np.arange(n)
    grad[idx, :, idx] = per_vertex
    return grad.reshape(3 * n, n)
