"""Procedural stand-in meshes: grid torus, Fibonacci sphere, deformed blobs, cloth grids.

All generators are deterministic (seeded where randomness is involved) and
return vertices plus a deduplicated undirected edge set.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .model import ConfigError


def _dedup_edges(edges: np.ndarray) -> np.ndarray:
    e = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def _triangle_edges(triangles: np.ndarray) -> np.ndarray:
    t = np.asarray(triangles, dtype=np.int64)
    return _dedup_edges(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]))


def torus_mesh(
    major_segments: int = 29,
    minor_segments: int = 5,
    major_radius: float = 1.0,
    minor_radius: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Grid-sampled torus with ring, tube and one diagonal spring per quad.

    29 x 5 segments give the 145-vertex configuration used throughout the
    validation scenes.
    """
    if major_segments < 3 or minor_segments < 3:
        raise ConfigError("torus needs at least 3 segments per direction")
    u = 2.0 * np.pi * np.arange(major_segments) / major_segments
    v = 2.0 * np.pi * np.arange(minor_segments) / minor_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major_radius + minor_radius * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor_radius * np.sin(vv)], axis=-1)
    verts = verts.reshape(-1, 3)

    def vid(a, b):
        return (a % major_segments) * minor_segments + (b % minor_segments)

    edges = []
    for a in range(major_segments):
        for b in range(minor_segments):
            edges.append((vid(a, b), vid(a + 1, b)))
            edges.append((vid(a, b), vid(a, b + 1)))
            edges.append((vid(a, b), vid(a + 1, b + 1)))  # quad diagonal for shear stiffness
    return verts, _dedup_edges(np.array(edges))


def fibonacci_sphere_mesh(count: int = 500, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Evenly distributed sphere samples, connected by their convex-hull triangles."""
    if count < 4:
        raise ConfigError("sphere needs at least 4 vertices")
    k = np.arange(count)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - 2.0 * (k + 0.5) / count
    phi = 2.0 * np.pi * k / golden
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    verts = radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
    hull = ConvexHull(verts)
    return verts, _triangle_edges(hull.simplices)


def blob_mesh(
    count: int = 300,
    radii: tuple[float, float, float] = (1.0, 1.0, 1.0),
    bump_amplitude: float = 0.0,
    bump_frequency: int = 3,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Star-shaped deformed sphere: anisotropic radii plus a smooth radial bump field.

    Connectivity comes from the unit sphere's hull, so the deformation never
    breaks the triangulation.
    """
    unit, edges = fibonacci_sphere_mesh(count, 1.0)
    verts = unit.copy()
    if bump_amplitude != 0.0:
        rng = np.random.default_rng(seed)
        coeffs = rng.normal(size=(bump_frequency, 3))
        phase = rng.uniform(0, 2 * np.pi, size=(bump_frequency, 3))
        bump = np.zeros(count)
        for f in range(bump_frequency):
            bump += (
                coeffs[f, 0] * np.sin((f + 1) * unit[:, 0] * np.pi + phase[f, 0])
                + coeffs[f, 1] * np.sin((f + 1) * unit[:, 1] * np.pi + phase[f, 1])
                + coeffs[f, 2] * np.sin((f + 1) * unit[:, 2] * np.pi + phase[f, 2])
            )
        scale = np.max(np.abs(bump)) or 1.0
        verts *= (1.0 + bump_amplitude * bump / scale)[:, None]
    verts *= np.asarray(radii, dtype=float)[None, :]
    return verts, edges


def cloth_grid_mesh(
    nx: int = 10,
    nz: int = 10,
    spacing: float = 0.1,
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Vertical cloth sheet in the x-z plane with structural and shear springs.

    Returns vertices, edges, and named vertex groups including the two top
    corners commonly used as pin points.
    """
    if nx < 2 or nz < 2:
        raise ConfigError("cloth grid needs at least 2x2 vertices")
    xs = spacing * np.arange(nx)
    zs = spacing * np.arange(nz)
    xx, zz = np.meshgrid(xs, zs, indexing="ij")
    verts = np.stack([xx, np.zeros_like(xx), zz], axis=-1).reshape(-1, 3)

    def vid(a, b):
        return a * nz + b

    edges = []
    for a in range(nx):
        for b in range(nz):
            if a + 1 < nx:
                edges.append((vid(a, b), vid(a + 1, b)))
            if b + 1 < nz:
                edges.append((vid(a, b), vid(a, b + 1)))
            if a + 1 < nx and b + 1 < nz:
                edges.append((vid(a, b), vid(a + 1, b + 1)))
                edges.append((vid(a + 1, b), vid(a, b + 1)))
    top = nz - 1
    groups = {
        "top_left": np.array([vid(0, top)]),
        "top_right": np.array([vid(nx - 1, top)]),
        "top_row": np.array([vid(a, top) for a in range(nx)]),
    }
    return verts, _dedup_edges(np.array(edges)), groups


def random_cloud(count: int, extent: float = 1.0, seed: int = 0) -> np.ndarray:
    """Uniform random points in a cube of the given half-extent; no edges."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-extent, extent, size=(count, 3))


def shell_cloud(count: int, radius: float = 1.0, thickness: float = 0.05, seed: int = 0) -> np.ndarray:
    """Points scattered on a noisy spherical shell, a surface-like charge cloud."""
    rng = np.random.default_rng(seed)
    unit = rng.normal(size=(count, 3))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    r = radius + thickness * rng.normal(size=(count, 1))
    return unit * r
