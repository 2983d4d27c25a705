"""Contact detection between spheres, ellipsoids, and poly-ellipsoids.

The narrow phase follows the two-deepest-points construction: point_i is
the point of particle i's surface deepest inside particle j (measured by
j's implicit function), point_j the converse, and the overlap vector
delta runs from point_i to point_j.

Under the scaled-sphere parameterization x(u) = c_A + R_A (s_A * u) with
|u| = 1, the implicit function of another ellipsoid is an exact quadratic
in u, so "deepest point of A's surface inside B" is the global minimum of
a quadratic over the unit sphere. That subproblem is solved exactly via a
3x3 symmetric eigendecomposition and a one-dimensional secular equation
(including the classical hard case), vectorized over pair batches. There
is no iteration that can land in a local minimum.

Poly-ellipsoids are handled by the active-octant reduction: the octant of
each body facing the other (classified from the branch vector in each
local frame) supplies a full octant ellipsoid, the ellipsoid kernel runs
on that pair, and the resulting points are validated against their claimed
octants, retrying with the octants the points actually landed in. Cycles
raise NonConvergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapes import (
    Particle,
    centroid_offset,
    equivalent_radius,
    octant_semi_axes,
    semis6,
)
from .vecmath import quat_to_matrix

MAX_OCTANT_ROUNDS = 12


class NonConvergence(RuntimeError):
    """Octant-pair selection failed to settle for one or more pairs."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        super().__init__(f"contact octant iteration did not settle for pairs {self.pairs}")


@dataclass
class Contact:
    """Overlap record between particles i and j (negative id_j = wall)."""

    id_i: int
    id_j: int
    point_i: np.ndarray
    point_j: np.ndarray
    delta: np.ndarray
    depth: float
    normal: np.ndarray


# ---------------------------------------------------------------------------
# Quadratic-on-the-sphere solver
# ---------------------------------------------------------------------------

def _deepest_points(c_a, rot_a, s_a, c_b, rot_b, s_b):
    """Deepest point of each surface A inside each implicit ellipsoid B.

    All arguments are batched: centers (M, 3), rotations (M, 3, 3),
    semi-axes (M, 3). Returns (points (M, 3) in world frame, implicit
    values g_B at those points; g < 0 means A's surface penetrates B).
    """
    m1 = rot_b.swapaxes(-1, -2) / s_b[:, :, None]  # D_B R_B^T
    a_mat = (m1 @ rot_a) * s_a[:, None, :]
    b_vec = np.einsum("mij,mj->mi", m1, c_a - c_b)
    q_mat = a_mat.swapaxes(-1, -2) @ a_mat
    rhs = np.einsum("mji,mj->mi", a_mat, b_vec)

    w, v = np.linalg.eigh(q_mat)  # ascending eigenvalues
    beta = np.einsum("mji,mj->mi", v, rhs)

    dw = w - w[:, :1]  # (M, 3), first column exactly 0
    cluster = dw <= 1e-10 * np.maximum(w[:, 2:3], 1e-300)
    beta_norm = np.linalg.norm(beta, axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        s_min_terms = np.where(cluster, 0.0, beta**2 / np.where(cluster, 1.0, dw) ** 2)
    s_min_sq = np.sum(s_min_terms, axis=1)
    beta_cluster = np.linalg.norm(np.where(cluster, beta, 0.0), axis=1)
    hard = (beta_cluster <= 1e-12 * np.maximum(beta_norm, 1e-300)) & (s_min_sq <= 1.0)

    # Ordinary case: solve sum_k beta_k^2 / (dw_k + nu)^2 = 1 for nu >= 0 by
    # bisection; nu = mu + w_min avoids cancellation near the pole.
    lo = np.zeros_like(beta_norm)
    hi = beta_norm + 1e-300
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            phi = np.sum(beta**2 / (dw + mid[:, None]) ** 2, axis=1)
            high_side = phi > 1.0
            lo = np.where(high_side, mid, lo)
            hi = np.where(high_side, hi, mid)
        nu = 0.5 * (lo + hi)
        u_ord = -beta / (dw + nu[:, None])
        u_ord = np.where(np.isfinite(u_ord), u_ord, 0.0)

    # Hard case: interior solution in the non-cluster coordinates plus a
    # deterministic component along the first cluster eigenvector.
    with np.errstate(divide="ignore", invalid="ignore"):
        u_hard = np.where(cluster, 0.0, -beta / np.where(cluster, 1.0, dw))
    tau = np.sqrt(np.maximum(0.0, 1.0 - s_min_sq))
    first_cluster = np.argmax(cluster, axis=1)
    u_hard[np.arange(len(u_hard)), first_cluster] += tau

    u = np.where(hard[:, None], u_hard, u_ord)
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    u = u / np.where(norm > 0.0, norm, 1.0)

    u_param = np.einsum("mij,mj->mi", v, u)
    points = c_a + np.einsum("mij,mj->mi", rot_a, s_a * u_param)
    resid = np.einsum("mij,mj->mi", a_mat, u_param) + b_vec
    g = np.sum(resid**2, axis=1) - 1.0
    return points, g


def _implicit_gradient_norm(points, center, rot, semi):
    """|grad of the ellipsoid implicit| at world points, for gap estimates."""
    local = np.einsum("mji,mj->mi", rot, points - center)
    grad_local = 2.0 * local / semi**2
    return np.linalg.norm(grad_local, axis=1)


# ---------------------------------------------------------------------------
# Batched pair contact
# ---------------------------------------------------------------------------

class ShapeArrays:
    """Structure-of-arrays view of an assembly's shapes and mass data."""

    def __init__(self, particles):
        n = len(particles)
        self.n = n
        self.s6 = np.array([semis6(p.shape) for p in particles])
        self.offset = np.array([centroid_offset(p.shape) for p in particles])
        self.mass = np.array([p.mass for p in particles])
        self.r_eq = np.array([equivalent_radius(p.shape) for p in particles])
        self.r_bound = np.max(self.s6, axis=1) + np.linalg.norm(self.offset, axis=1)
        pos = self.s6[:, 0::2]
        neg = self.s6[:, 1::2]
        self.is_symmetric = np.all(pos == neg, axis=1)
        self.is_sphere = self.is_symmetric & np.all(
            self.s6 == self.s6[:, :1], axis=1
        )


def _octant_signs_of(points_local, claimed, tol):
    """Octant sign triples of local points; near-plane coords keep `claimed`."""
    signs = np.where(points_local > tol, 1.0, np.where(points_local < -tol, -1.0, claimed))
    return signs


def pair_contacts(
    arrays: ShapeArrays,
    quats: np.ndarray,
    pos_i: np.ndarray,
    pos_j: np.ndarray,
    idx_i: np.ndarray,
    idx_j: np.ndarray,
):
    """Narrow-phase contact resolution for a batch of candidate pairs.

    pos_i / pos_j are the world centroids to use for each pair (periodic
    callers pass minimum-image shifted copies). Returns a dict of arrays:
    `found`, `point_i`, `point_j`, `delta`, `depth`, `normal`, `gap`
    (estimated surface separation, negative = -depth when overlapping) and
    `settled` (False where the octant iteration cycled; such pairs carry
    the last iterate).
    """
    m = len(idx_i)
    out = {
        "found": np.zeros(m, dtype=bool),
        "point_i": np.zeros((m, 3)),
        "point_j": np.zeros((m, 3)),
        "delta": np.zeros((m, 3)),
        "depth": np.zeros(m),
        "normal": np.zeros((m, 3)),
        "gap": np.full(m, np.inf),
        "settled": np.ones(m, dtype=bool),
    }
    if m == 0:
        return out

    sphere_pair = arrays.is_sphere[idx_i] & arrays.is_sphere[idx_j]
    sp = np.nonzero(sphere_pair)[0]
    gen = np.nonzero(~sphere_pair)[0]

    if len(sp):
        _sphere_sphere(arrays, pos_i[sp], pos_j[sp], idx_i[sp], idx_j[sp], out, sp)
    if len(gen):
        _general_pairs(arrays, quats, pos_i[gen], pos_j[gen], idx_i[gen], idx_j[gen], out, gen)
    return out


def _sphere_sphere(arrays, pos_i, pos_j, idx_i, idx_j, out, rows):
    r_i = arrays.s6[idx_i, 0]
    r_j = arrays.s6[idx_j, 0]
    branch = pos_j - pos_i
    dist = np.linalg.norm(branch, axis=1)
    # Concentric centers have no defined branch direction; pick +x.
    unit = np.where(dist[:, None] > 0.0, branch / np.where(dist[:, None] > 0, dist[:, None], 1.0), [1.0, 0.0, 0.0])
    depth = r_i + r_j - dist
    point_i = pos_i + r_i[:, None] * unit
    point_j = pos_j - r_j[:, None] * unit
    delta = point_j - point_i
    found = depth > 0.0
    out["found"][rows] = found
    out["point_i"][rows] = point_i
    out["point_j"][rows] = point_j
    out["delta"][rows] = delta
    out["depth"][rows] = np.abs(depth)
    out["normal"][rows] = -np.sign(depth)[:, None] * unit
    out["gap"][rows] = -depth


def _octant_direction(s6_s, junc_s, rot_s, sym_s, s6_m, junc_m, rot_m, sym_m, start_s, start_m):
    """Deepest point of the composite `s` surface inside the composite `m`.

    Iterates one octant pair: the surface octant of body s being
    parameterized and the implicit octant of body m being evaluated; both
    must agree with the octant of the solution point in the respective
    local frame. On a detected cycle the best (deepest) iterate is kept
    and the pair is flagged unsettled.
    """
    m = len(junc_s)
    tol_s = 1e-9 * np.max(s6_s, axis=1, keepdims=True)
    tol_m = 1e-9 * np.max(s6_m, axis=1, keepdims=True)
    signs_s = start_s.copy()
    signs_m = start_m.copy()

    best_point = np.zeros((m, 3))
    best_g = np.full(m, np.inf)
    best_grad = np.ones(m)
    active = np.ones(m, dtype=bool)
    settled = np.zeros(m, dtype=bool)
    history = np.full((m, MAX_OCTANT_ROUNDS), -1, dtype=np.int64)

    for round_no in range(MAX_OCTANT_ROUNDS):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        sa_s = octant_semi_axes(s6_s[idx], signs_s[idx])
        sa_m = octant_semi_axes(s6_m[idx], signs_m[idx])
        pts, g = _deepest_points(junc_s[idx], rot_s[idx], sa_s, junc_m[idx], rot_m[idx], sa_m)
        grad = _implicit_gradient_norm(pts, junc_m[idx], rot_m[idx], sa_m)

        p_in_s = np.einsum("mji,mj->mi", rot_s[idx], pts - junc_s[idx])
        p_in_m = np.einsum("mji,mj->mi", rot_m[idx], pts - junc_m[idx])
        oct_s = _octant_signs_of(p_in_s, signs_s[idx], tol_s[idx])
        oct_m = _octant_signs_of(p_in_m, signs_m[idx], tol_m[idx])
        ok = (sym_s[idx] | np.all(oct_s == signs_s[idx], axis=1)) & (
            sym_m[idx] | np.all(oct_m == signs_m[idx], axis=1)
        )

        # A validated round is authoritative (its g is the true composite
        # value at a true composite surface point); the best-g running
        # iterate is only a fallback for pairs that end up cycling.
        better = ok | (g < best_g[idx])
        upd = idx[better]
        best_point[upd] = pts[better]
        best_g[upd] = g[better]
        best_grad[upd] = grad[better]

        settled[idx[ok]] = True
        active[idx[ok]] = False
        bad = idx[~ok]
        if len(bad) == 0:
            break
        new_s = np.where(sym_s[bad, None], signs_s[bad], oct_s[~ok])
        new_m = np.where(sym_m[bad, None], signs_m[bad], oct_m[~ok])
        signs_s[bad] = new_s
        signs_m[bad] = new_m
        code = _octant_code(new_s) * 8 + _octant_code(new_m)
        seen = np.any(history[bad, : round_no + 1] == code[:, None], axis=1)
        history[bad, round_no] = code
        active[bad[seen]] = False  # cycle: keep best iterate, stay unsettled

    return best_point, best_g, best_grad, settled


def _general_pairs(arrays, quats, pos_i, pos_j, idx_i, idx_j, out, rows):
    rot_i = quat_to_matrix(quats[idx_i])
    rot_j = quat_to_matrix(quats[idx_j])
    junc_i = pos_i - np.einsum("mij,mj->mi", rot_i, arrays.offset[idx_i])
    junc_j = pos_j - np.einsum("mij,mj->mi", rot_j, arrays.offset[idx_j])
    s6_i = arrays.s6[idx_i]
    s6_j = arrays.s6[idx_j]
    sym_i = arrays.is_symmetric[idx_i]
    sym_j = arrays.is_symmetric[idx_j]

    start_i = np.sign(np.einsum("mji,mj->mi", rot_i, pos_j - junc_i))
    start_j = np.sign(np.einsum("mji,mj->mi", rot_j, pos_i - junc_j))
    start_i[start_i == 0.0] = 1.0
    start_j[start_j == 0.0] = 1.0

    point_i, g_ij, grad_ij, ok_1 = _octant_direction(
        s6_i, junc_i, rot_i, sym_i, s6_j, junc_j, rot_j, sym_j, start_i, start_j
    )
    point_j, g_ji, grad_ji, ok_2 = _octant_direction(
        s6_j, junc_j, rot_j, sym_j, s6_i, junc_i, rot_i, sym_i, start_j, start_i
    )

    delta = point_j - point_i
    depth = np.linalg.norm(delta, axis=1)
    overlap = (np.minimum(g_ij, g_ji) < 0.0) & (depth > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap_1 = g_ij / np.where(grad_ij > 0, grad_ij, 1.0)
        gap_2 = g_ji / np.where(grad_ji > 0, grad_ji, 1.0)
    gap = np.where(overlap, -depth, np.minimum(gap_1, gap_2))
    normal = np.zeros_like(delta)
    normal[overlap] = delta[overlap] / depth[overlap, None]

    out["found"][rows] = overlap
    out["point_i"][rows] = point_i
    out["point_j"][rows] = point_j
    out["delta"][rows] = delta
    out["depth"][rows] = depth
    out["normal"][rows] = normal
    out["gap"][rows] = gap
    out["settled"][rows] = ok_1 & ok_2


def _octant_code(signs):
    return (
        4 * (signs[:, 0] < 0).astype(np.int64)
        + 2 * (signs[:, 1] < 0).astype(np.int64)
        + (signs[:, 2] < 0).astype(np.int64)
    )


def support_points_batch(arrays: ShapeArrays, quats, positions, direction_world, subset=None):
    """World support points along one world direction (optionally a subset).

    Spheres short-circuit to center + r*d; other shapes evaluate the eight
    octant-ellipsoid support candidates about each junction and keep the
    ones lying in their own octant (the composite support always validates
    on its own patch).
    """
    from .shapes import OCTANT_SIGNS

    if subset is None:
        subset = np.arange(arrays.n)
    n = len(subset)
    d = np.asarray(direction_world, dtype=float)
    d = d / np.linalg.norm(d)

    if np.all(arrays.is_sphere[subset]):
        return positions + arrays.s6[subset, :1] * d

    rot = quat_to_matrix(quats[subset])
    d_local = np.einsum("nji,j->ni", rot, d)
    tol = 1e-9 * np.max(arrays.s6[subset], axis=1)

    best_proj = np.full(n, -np.inf)
    best_local = np.zeros((n, 3))
    for signs in OCTANT_SIGNS:
        semis = octant_semi_axes(arrays.s6[subset], np.broadcast_to(signs, (n, 3)))
        w = semis**2 * d_local
        denom = np.linalg.norm(semis * d_local, axis=1)
        denom = np.where(denom > 0.0, denom, 1.0)
        cand = w / denom[:, None]
        valid = np.all(cand * signs >= -tol[:, None], axis=1)
        proj = np.einsum("ni,ni->n", d_local, cand)
        take = valid & (proj > best_proj)
        best_proj[take] = proj[take]
        best_local[take] = cand[take]

    junction = positions - np.einsum("nij,nj->ni", rot, arrays.offset[subset])
    return junction + np.einsum("nij,nj->ni", rot, best_local)


def wall_contacts(arrays: ShapeArrays, quats, positions, planes):
    """Penetrating particle-plane contacts for a list of (point, normal).

    Wall k gets id -(k+1). Returns arrays (particle_index, wall_id,
    point_i, point_j, delta, depth, normal) concatenated over planes.
    """
    idx_list, wid_list, pi_list, pj_list = [], [], [], []
    for k, (wall_point, wall_normal) in enumerate(planes):
        nrm = np.asarray(wall_normal, dtype=float)
        nrm = nrm / np.linalg.norm(nrm)
        wall_point = np.asarray(wall_point, dtype=float)
        # Only bodies whose bounding sphere reaches the plane matter.
        reach = (wall_point - positions) @ nrm + arrays.r_bound
        near = np.nonzero(reach > 0.0)[0]
        if len(near) == 0:
            continue
        support = support_points_batch(arrays, quats, positions[near], -nrm, subset=near)
        depth = (wall_point - support) @ nrm
        hit = np.nonzero(depth > 0.0)[0]
        if len(hit) == 0:
            continue
        p_i = support[hit]
        p_j = p_i + depth[hit, None] * nrm
        idx_list.append(near[hit])
        wid_list.append(np.full(len(hit), -(k + 1), dtype=np.int64))
        pi_list.append(p_i)
        pj_list.append(p_j)

    if not idx_list:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.empty(0),
            np.zeros((0, 3)),
        )
    idx = np.concatenate(idx_list)
    wid = np.concatenate(wid_list)
    point_i = np.concatenate(pi_list)
    point_j = np.concatenate(pj_list)
    delta = point_j - point_i
    depth = np.linalg.norm(delta, axis=1)
    normal = delta / depth[:, None]
    return idx, wid, point_i, point_j, delta, depth, normal


# ---------------------------------------------------------------------------
# Scalar convenience API
# ---------------------------------------------------------------------------

def detect_contact(p_i: Particle, p_j: Particle) -> Contact | None:
    """Contact between two particles, or None when the bodies do not overlap.

    Raises NonConvergence if the poly-ellipsoid octant selection cycles.
    """
    arrays = ShapeArrays([p_i, p_j])
    quats = np.stack([p_i.orientation, p_j.orientation])
    res = pair_contacts(
        arrays,
        quats,
        p_i.position[None, :],
        p_j.position[None, :],
        np.array([0]),
        np.array([1]),
    )
    if not res["settled"][0]:
        raise NonConvergence([(p_i.id, p_j.id)])
    if not res["found"][0]:
        return None
    return Contact(
        id_i=p_i.id,
        id_j=p_j.id,
        point_i=res["point_i"][0],
        point_j=res["point_j"][0],
        delta=res["delta"][0],
        depth=float(res["depth"][0]),
        normal=res["normal"][0],
    )


def detect_wall_contact(p: Particle, wall_point, wall_normal, wall_id: int = -1) -> Contact | None:
    """Contact of a particle with a plane given by point + inward normal."""
    n = np.asarray(wall_normal, dtype=float)
    n = n / np.linalg.norm(n)
    wall_point = np.asarray(wall_point, dtype=float)
    rot = quat_to_matrix(p.orientation)
    from .shapes import support_point_local

    d_local = rot.T @ (-n)
    support = p.position + rot @ support_point_local(p.shape, d_local)
    depth = float(np.dot(wall_point - support, n))
    if depth <= 0.0:
        return None
    point_j = support + depth * n
    return Contact(
        id_i=p.id,
        id_j=wall_id,
        point_i=support,
        point_j=point_j,
        delta=point_j - support,
        depth=depth,
        normal=n.copy(),
    )


def relative_overlap(c: Contact, p_i: Particle, p_j: Particle | None = None) -> float:
    """Contact depth normalized by the volume-equivalent radii sum.

    Wall contacts (p_j None or negative id_j) normalize by the particle's
    own equivalent radius.
    """
    r_i = equivalent_radius(p_i.shape)
    if p_j is None or c.id_j < 0:
        return c.depth / r_i
    return c.depth / (r_i + equivalent_radius(p_j.shape))
