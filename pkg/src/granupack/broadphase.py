"""Uniform-grid broad phase for candidate contact pairs.

Particles are hashed by centroid into a uniform grid; candidate pairs come
from neighboring cells (stencil wide enough to cover the largest bounding
diameter) and are prefiltered by bounding-sphere overlap, so the result is
always a superset of the truly overlapping pairs. Periodic domains use
wrapped cell indices and minimum-image distances. Pair generation is fully
vectorized (sorted cell ids plus searchsorted range expansion).
"""
from __future__ import annotations

import numpy as np


def minimum_image(pos_i: np.ndarray, pos_j: np.ndarray, edge: float) -> np.ndarray:
    """Positions of j shifted to their minimum image relative to i."""
    d = pos_j - pos_i
    return pos_j - edge * np.round(d / edge)


def _expand_ranges(starts: np.ndarray, ends: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten variable-length ranges: owner index and in-range position."""
    counts = ends - starts
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    owner = np.repeat(np.arange(len(starts), dtype=np.int64), counts)
    steps = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, np.repeat(starts, counts) + steps


def broad_phase(
    positions: np.ndarray,
    r_bound: np.ndarray,
    periodic_edge: float | None = None,
    margin: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate pairs (idx_i < idx_j) whose bounding spheres overlap.

    `margin` inflates every bounding radius (used for near-contact queries
    and Verlet skins). Deterministic output order (sorted by pair).
    """
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if n < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    r_bound = np.asarray(r_bound, dtype=float) + margin
    reach = max(2.0 * float(np.max(r_bound)), 1e-12)

    if periodic_edge is not None:
        edge = float(periodic_edge)
        pos = positions - edge * np.floor(positions / edge)
        n_cells = min(max(1, int(np.floor(edge / reach))), 64)
        dims = np.array([n_cells] * 3, dtype=np.int64)
        cell_eff = np.full(3, edge / n_cells)
        wrap = True
    else:
        lo = positions.min(axis=0)
        pos = positions - lo
        span = np.maximum(pos.max(axis=0), 1e-12)
        dims = np.minimum(np.maximum(1, np.floor(span / reach).astype(np.int64) + 1), 96)
        cell_eff = span / dims
        wrap = False

    stencil = int(np.max(np.minimum(np.ceil(reach / cell_eff).astype(np.int64), dims)))
    ijk = np.minimum(np.floor(pos / cell_eff).astype(np.int64), dims - 1)

    def lin_of(cells: np.ndarray) -> np.ndarray:
        return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]

    lin = lin_of(ijk)
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]

    cand_i, cand_j = [], []
    rng_ = range(-stencil, stencil + 1)
    for dx in rng_:
        for dy in rng_:
            for dz in rng_:
                if (dx, dy, dz) < (0, 0, 0):
                    continue  # half stencil; dedup handles wrapped aliases
                nbr = ijk + np.array([dx, dy, dz])
                if wrap:
                    nbr %= dims
                    valid = np.ones(n, dtype=bool)
                else:
                    valid = np.all((nbr >= 0) & (nbr < dims), axis=1)
                nbr_lin = lin_of(nbr)
                starts = np.searchsorted(lin_sorted, nbr_lin, side="left")
                ends = np.searchsorted(lin_sorted, nbr_lin, side="right")
                starts = np.where(valid, starts, 0)
                ends = np.where(valid, ends, 0)
                owner, pos_in_sorted = _expand_ranges(starts, ends)
                if len(owner) == 0:
                    continue
                cand_i.append(owner)
                cand_j.append(order[pos_in_sorted])

    if not cand_i:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    ci = np.concatenate(cand_i)
    cj = np.concatenate(cand_j)
    swap = ci > cj
    ci, cj = np.where(swap, cj, ci), np.where(swap, ci, cj)
    keep = ci != cj
    ci, cj = ci[keep], cj[keep]

    # Bounding-sphere prefilter (before dedup, to keep the sort small); the
    # result stays a superset of the truly overlapping pairs.
    if periodic_edge is not None:
        pj = minimum_image(positions[ci], positions[cj], float(periodic_edge))
    else:
        pj = positions[cj]
    d = pj - positions[ci]
    keep = np.einsum("ij,ij->i", d, d) <= (r_bound[ci] + r_bound[cj]) ** 2
    ci, cj = ci[keep], cj[keep]
    keys = np.unique(ci * n + cj)
    return keys // n, keys % n


class PairCache:
    """Verlet-style reuse of the broad-phase candidate list.

    Candidates are built with bounding radii inflated by `skin`; the list
    stays valid until some particle's displacement relative to the mean
    drift exceeds `skin` (so any pair's relative approach is at most
    2*skin, which the inflation covers).
    """

    def __init__(self, skin: float):
        self.skin = float(skin)
        self._ref_positions = None
        self._pairs = None

    def pairs(self, positions: np.ndarray, r_bound: np.ndarray):
        if self._ref_positions is not None and len(self._ref_positions) == len(positions):
            d = positions - self._ref_positions
            d = d - d.mean(axis=0)
            if np.max(np.einsum("ni,ni->n", d, d)) <= self.skin**2:
                return self._pairs
        self._pairs = broad_phase(positions, r_bound, margin=self.skin)
        self._ref_positions = positions.copy()
        return self._pairs


def broad_phase_particles(particles, periodic_edge: float | None = None):
    """Candidate pairs for a particle list (convenience wrapper)."""
    from .shapes import bounding_radius

    positions = np.array([p.position for p in particles])
    r_bound = np.array([bounding_radius(p.shape) for p in particles])
    idx_i, idx_j = broad_phase(positions, r_bound, periodic_edge)
    return list(zip(idx_i.tolist(), idx_j.tolist()))
