"""Grid-approximated electric field for large charge sets.

The O(n^2) field evaluation is split per charge into an exactly summed near
field and a far field interpolated from a sample grid:

1. discretize: Halton-sample m points inside the (expanded) charge bounding
   box, append the box corners, and build a Delaunay tetrahedralization.
2. gather: at every grid point, accumulate the field of all charges that do
   not consider that grid point "nearby". Nearby means: a vertex of the
   tetrahedron containing the charge, or of one of its face-adjacent
   tetrahedra. This keeps every gathered contribution at least one ring away,
   so the table has no spikes.
3. evaluate: at every charge, interpolate the far-field table barycentrically
   over its containing tetrahedron and add the exact field of the charges
   whose neighborhoods touch that tetrahedron's ring.

When every charge is nearby to every grid point the far table is identically
zero and the evaluation degenerates to the exact pairwise sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay
from scipy.stats import qmc

from .model import ChargeSet, ConfigError, PointLocationError, SimParams

_GATHER_CHUNK = 64


@dataclass(frozen=True)
class DomainGrid:
    """Halton sample points plus corner anchors, tetrahedralized."""

    points: np.ndarray          # (m_total, 3) grid point coordinates
    delaunay: Delaunay
    bounding_box: np.ndarray    # (2, 3) expanded box the samples were drawn in
    sample_count: int           # requested number of Halton samples

    @property
    def point_count(self) -> int:
        return self.points.shape[0]

    @property
    def simplices(self) -> np.ndarray:
        return self.delaunay.simplices

    @property
    def tet_adjacency(self) -> np.ndarray:
        """Per-tet face-adjacent tet indices, -1 on hull faces."""
        return self.delaunay.neighbors


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Per-charge nearby grid points, the inverse lookup, and interpolation data."""

    containing_tet: np.ndarray   # (n,)
    barycentric: np.ndarray      # (n, 4)
    nearby_indptr: np.ndarray    # (n+1,) CSR over grid indices
    nearby_indices: np.ndarray
    inverse_indptr: np.ndarray   # (m_total+1,) CSR over charge indices
    inverse_indices: np.ndarray

    def nearby(self, i: int) -> np.ndarray:
        return self.nearby_indices[self.nearby_indptr[i]:self.nearby_indptr[i + 1]]

    def charges_near(self, j: int) -> np.ndarray:
        return self.inverse_indices[self.inverse_indptr[j]:self.inverse_indptr[j + 1]]


def expanded_bounding_box(points: np.ndarray, margin: float) -> np.ndarray:
    """Charge bounding box grown by `margin` per axis; degenerate axes are inflated."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    largest = float(extent.max())
    if largest <= 0.0:
        # all charges coincide: fall back to a small fixed box
        pad = np.full(3, 1e-3)
        return np.stack([lo - pad, hi + pad])
    floor = 0.01 * largest
    pad = np.where(extent < floor, 0.5 * (floor - extent), 0.0)
    lo = lo - pad
    hi = hi + pad
    extent = hi - lo
    lo = lo - margin * extent
    hi = hi + margin * extent
    return np.stack([lo, hi])


def discretize_domain(points: np.ndarray, m: int, margin: float = 0.05) -> DomainGrid:
    """Sample m Halton points in the expanded charge bounding box and tetrahedralize.

    The 8 corners of the expanded box are appended so the hull strictly
    contains every charge. Halton sampling and Qhull are deterministic, so the
    same inputs always give the same grid.
    """
    if m < 8:
        raise ConfigError("domain discretization needs at least 8 samples")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise ConfigError("need at least one charge location")
    box = expanded_bounding_box(pts, margin)
    sampler = qmc.Halton(d=3, scramble=False)
    sampler.fast_forward(1)  # index 0 is the box corner itself
    unit = sampler.random(m)
    samples = box[0] + unit * (box[1] - box[0])
    corners = box[0] + np.array(
        [[a, b, c] for a in (0.0, 1.0) for b in (0.0, 1.0) for c in (0.0, 1.0)]
    ) * (box[1] - box[0])
    grid_points = np.vstack([samples, corners])
    tri = Delaunay(grid_points)
    return DomainGrid(points=grid_points, delaunay=tri, bounding_box=box, sample_count=int(m))


def tet_volumes(grid: DomainGrid) -> np.ndarray:
    """Unsigned volumes of every tetrahedron."""
    verts = grid.points[grid.simplices]  # (T, 4, 3)
    edges = verts[:, 1:] - verts[:, :1]
    return np.abs(np.linalg.det(edges)) / 6.0


def build_neighborhoods(grid: DomainGrid, points: np.ndarray) -> NeighborhoodIndex:
    """Locate every charge, compute barycentric weights, and index nearby grid points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    tets = grid.delaunay.find_simplex(pts)
    if np.any(tets < 0):
        bad = int(np.sum(tets < 0))
        raise PointLocationError(f"{bad} charge(s) outside the grid hull; rebuild the grid")

    transform = grid.delaunay.transform[tets]           # (n, 4, 3)
    offset = pts - transform[:, 3, :]
    partial = np.einsum("nij,nj->ni", transform[:, :3, :], offset)
    psi = np.concatenate([partial, 1.0 - partial.sum(axis=1, keepdims=True)], axis=1)

    simplices = grid.simplices
    adjacency = grid.tet_adjacency
    # nearby sets only depend on the containing tet; compute one set per unique tet
    unique_tets, inverse = np.unique(tets, return_inverse=True)
    per_tet_sets = []
    for t in unique_tets:
        adj = adjacency[t]
        adj = adj[adj >= 0]
        verts = np.concatenate([simplices[t], simplices[adj].ravel()])
        per_tet_sets.append(np.unique(verts))
    set_sizes = np.array([s.size for s in per_tet_sets], dtype=np.int64)

    counts = set_sizes[inverse]
    nearby_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=nearby_indptr[1:])
    nearby_indices = np.empty(nearby_indptr[-1], dtype=np.int64)
    for i in range(n):
        nearby_indices[nearby_indptr[i]:nearby_indptr[i + 1]] = per_tet_sets[inverse[i]]

    # exact inverse relation: charge i is near grid point j iff j is near charge i
    charge_of_pair = np.repeat(np.arange(n, dtype=np.int64), counts)
    order = np.argsort(nearby_indices, kind="stable")
    sorted_grid = nearby_indices[order]
    inverse_indices = charge_of_pair[order]
    inverse_indptr = np.zeros(grid.point_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(sorted_grid, minlength=grid.point_count), out=inverse_indptr[1:])

    return NeighborhoodIndex(
        containing_tet=tets.astype(np.int64),
        barycentric=psi,
        nearby_indptr=nearby_indptr,
        nearby_indices=nearby_indices,
        inverse_indptr=inverse_indptr,
        inverse_indices=inverse_indices,
    )


def gather_far_field(
    grid: DomainGrid,
    neighborhoods: NeighborhoodIndex,
    points: np.ndarray,
    charges: ChargeSet,
) -> np.ndarray:
    """Field table (m_total, 3): at each grid point, the field of all non-nearby charges."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    table = np.zeros((grid.point_count, 3))
    for start in range(0, grid.point_count, _GATHER_CHUNK):
        stop = min(start + _GATHER_CHUNK, grid.point_count)
        rows = stop - start
        skip = np.zeros((rows, n), dtype=bool)
        for j in range(start, stop):
            skip[j - start, neighborhoods.charges_near(j)] = True
        diff = grid.points[start:stop, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        dist = np.where(skip, 1.0, np.maximum(dist, np.finfo(float).tiny))
        scale = np.where(skip, 0.0, kc * q[None, :] / dist**3)
        table[start:stop] = np.einsum("cn,cnd->cd", scale, diff)
    return table


def evaluate_field(
    grid: DomainGrid,
    neighborhoods: NeighborhoodIndex,
    far_table: np.ndarray,
    points: np.ndarray,
    charges: ChargeSet,
    softening_epsilon: float = 1e-6,
    include_far_field: bool = True,
) -> np.ndarray:
    """Approximate field (n, 3) at every charge: interpolated far part + exact near part.

    A charge in the near set may still have been gathered onto some corners of
    the interpolation tetrahedron (its neighborhood need not cover all four),
    so the interpolation is careful: those gathered contributions are
    subtracted from the corner values before interpolating. Near and far parts
    then partition every charge exactly once.

    `include_far_field=False` drops the interpolated term and keeps only the
    exact near sums; that truncation is the biased baseline the far field
    exists to fix.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    field = np.zeros((n, 3))
    tiny = max(softening_epsilon, np.finfo(float).tiny)

    # batched per containing tet: charges in one tet share the same candidate
    # near set (union of the inverse lists of their nearby grid points)
    tets = neighborhoods.containing_tet
    order = np.argsort(tets, kind="stable")
    boundaries = np.flatnonzero(np.diff(tets[order])) + 1
    groups = np.split(order, boundaries)
    for group in groups:
        first = group[0]
        near_grid = neighborhoods.nearby(first)
        members = [neighborhoods.charges_near(j) for j in near_grid]
        candidates = np.unique(np.concatenate(members)) if members else np.zeros(0, dtype=np.int64)

        corners = grid.simplices[tets[first]]                      # (4,)
        psi = neighborhoods.barycentric[group]                     # (g, 4)
        if include_far_field:
            corner_fields = far_table[corners]                     # (4, 3)
            if candidates.size:
                # remove near-set charges that the gather already put on these corners
                cdiff = grid.points[corners][:, None, :] - pts[candidates][None, :, :]
                cdist = np.maximum(np.linalg.norm(cdiff, axis=2), np.finfo(float).tiny)
                gathered = np.ones((4, candidates.size), dtype=bool)
                for row, v in enumerate(corners):
                    gathered[row, np.isin(candidates, neighborhoods.charges_near(v))] = False
                cscale = np.where(gathered, kc * q[candidates][None, :] / cdist**3, 0.0)
                corner_fields = corner_fields - np.einsum("vs,vsd->vd", cscale, cdiff)
            field[group] += psi @ corner_fields

        if candidates.size == 0:
            continue
        diff = pts[group][:, None, :] - pts[candidates][None, :, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), tiny)
        scale = kc * q[candidates][None, :] / dist**3
        scale[group[:, None] == candidates[None, :]] = 0.0  # self term
        field[group] += np.einsum("gs,gsd->gd", scale, diff)
    return field


def ddef_field(points: np.ndarray, charges: ChargeSet, params: SimParams) -> np.ndarray:
    """One-shot approximate field: discretize, index, gather, evaluate."""
    grid = discretize_domain(points, params.ddef_m, params.ddef_margin)
    neigh = build_neighborhoods(grid, points)
    table = gather_far_field(grid, neigh, points, charges)
    return evaluate_field(grid, neigh, table, points, charges, params.softening_epsilon)


def ddef_forces(points: np.ndarray, charges: ChargeSet, params: SimParams) -> np.ndarray:
    """Approximate Coulomb forces (n, 3): charge times approximate field."""
    field = ddef_field(points, charges, params)
    return charges.charges[:, None] * field


def pairwise_field_brute(points: np.ndarray, charges: ChargeSet, softening_epsilon: float = 1e-6) -> np.ndarray:
    """Exact field (n, 3) at every charge location, the reference for all error metrics."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    q = charges.charges
    kc = charges.coulomb_constant
    out = np.empty((n, 3))
    chunk = 256
    tiny = max(softening_epsilon, np.finfo(float).tiny)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        dist = np.maximum(np.linalg.norm(diff, axis=2), tiny)
        scale = kc * q[None, :] / dist**3
        idx = np.arange(start, stop)
        scale[idx - start, idx] = 0.0
        out[start:stop] = np.einsum("cn,cnd->cd", scale, diff)
    return out


def mean_relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Mean over charges of |approx - exact| / |exact|; zero-field charges are skipped."""
    a = np.asarray(approx, dtype=float).reshape(-1, 3)
    e = np.asarray(exact, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(e, axis=1)
    keep = norms > 0.0
    if not np.any(keep):
        return 0.0
    err = np.linalg.norm(a[keep] - e[keep], axis=1) / norms[keep]
    return float(err.mean())


class BruteForceBackend:
    """Exact pairwise Coulomb force backend."""

    name = "brute"

    def __init__(self, softening_epsilon: float = 1e-6):
        self.softening_epsilon = softening_epsilon

    def __call__(self, points: np.ndarray, charges: ChargeSet) -> np.ndarray:
        from .coulomb import pairwise_forces_brute

        return pairwise_forces_brute(points, charges, self.softening_epsilon)


class DdefForceBackend:
    """Grid-approximated Coulomb force backend with optional grid reuse.

    The grid is rebuilt every `reuse_grid_frames` calls; in between, only the
    charge locations are re-indexed against the cached grid. If a charge moves
    outside the cached hull the grid is rebuilt immediately.
    """

    name = "ddef"

    def __init__(self, params: SimParams):
        self.params = params
        self._grid: DomainGrid | None = None
        self._age = 0

    def __call__(self, points: np.ndarray, charges: ChargeSet) -> np.ndarray:
        params = self.params
        if self._grid is None or self._age >= params.reuse_grid_frames:
            self._grid = discretize_domain(points, params.ddef_m, params.ddef_margin)
            self._age = 0
        try:
            neigh = build_neighborhoods(self._grid, points)
        except PointLocationError:
            self._grid = discretize_domain(points, params.ddef_m, params.ddef_margin)
            self._age = 0
            neigh = build_neighborhoods(self._grid, points)
        self._age += 1
        table = gather_far_field(self._grid, neigh, points, charges)
        field = evaluate_field(self._grid, neigh, table, points, charges, params.softening_epsilon)
        return charges.charges[:, None] * field
