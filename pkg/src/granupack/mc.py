"""Monte Carlo overlap-relaxation packing for spheres, ellipsoids, and
poly-ellipsoids.

Particles are seeded uniformly in a cube sized for an initial packing
density phi0 (which may exceed any physically reachable density), then
relaxed iteratively: every overlapping pair contributes a translation
t = m_i/(m_i+m_j) * delta to each member (delta oriented to separate it)
and a rotation vector r = d x t, where d runs from the centroid to the
particle's own contact point. Per-particle moves are the plain sums of
the pair contributions (a config switch restores 1/n_i averaging), all
moves are computed from one configuration and applied simultaneously,
and the run stops once the contact-mean relative overlap falls below the
tolerance.

Boundary handling: `free` (default) relaxes the cloud with no boundary,
so the assembly dilates until the residual overlaps vanish; `periodic`
keeps the initial cube with minimum-image contacts (the packing fraction
then stays phi0 by construction, which caps how far the mean overlap can
drop when phi0 exceeds the jamming density); `hard_walls` confines the
initial cube with immovable walls.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .broadphase import broad_phase, minimum_image
from .contact import Contact, ShapeArrays, pair_contacts, wall_contacts
from .shapes import Particle, equivalent_radius
from .snapshot import FreeCloud, PackingSnapshot, PeriodicCube, SnapshotContact
from .vecmath import quat_from_axis_angle, quat_multiply, quat_normalize, random_unit_quats

log = logging.getLogger(__name__)

BOUNDARY_MODES = ("free", "periodic", "hard_walls")


class NotConverged(RuntimeError):
    def __init__(self, mean_overlap: float, iterations: int):
        self.mean_overlap = mean_overlap
        self.iterations = iterations
        super().__init__(
            f"mean relative overlap {mean_overlap:.3e} still above tolerance "
            f"after {iterations} iterations"
        )


@dataclass
class McConfig:
    phi0: float = 0.86
    tolerance: float = 1e-4
    max_iterations: int = 100_000
    rotation_scale: float = 1.0
    boundary: str = "free"
    average_moves: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.phi0 <= 1.0:
            raise ValueError(f"phi0 must be in (0, 1], got {self.phi0}")
        if self.tolerance <= 0.0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {self.boundary!r}")


@dataclass
class McState:
    assembly: list[Particle]
    positions: np.ndarray  # (N, 3) centroids
    quats: np.ndarray  # (N, 4) scalar-first
    domain_edge: float
    boundary: str
    iteration: int = 0
    mean_relative_overlap: float = np.inf
    history: list[tuple[int, float, float, int]] = field(default_factory=list)
    move_scale: float = 1.0

    @property
    def particles(self) -> list[Particle]:
        """Assembly particles carrying the current poses."""
        out = []
        for k, p in enumerate(self.assembly):
            q = Particle(
                id=p.id, shape=p.shape, position=self.positions[k].copy(),
                orientation=self.quats[k].copy(), mass=p.mass,
                inertia=p.inertia.copy(), density=p.density,
            )
            out.append(q)
        return out


def initial_domain(assembly: list[Particle], phi0: float) -> float:
    """Edge of the cube that holds the assembly at packing density phi0."""
    if not assembly:
        raise ValueError("assembly is empty")
    if phi0 <= 0.0:
        raise ValueError(f"phi0 must be positive, got {phi0}")
    from .shapes import volume

    total = sum(volume(p.shape) for p in assembly)
    return float((total / phi0) ** (1.0 / 3.0))


def initial_placement(
    assembly: list[Particle], domain_edge: float, seed: int, boundary: str = "free"
) -> McState:
    """Uniform random centroids in the cube, uniform random orientations."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n = len(assembly)
    positions = rng.random((n, 3)) * domain_edge
    quats = random_unit_quats(n, rng)
    return McState(
        assembly=assembly,
        positions=positions,
        quats=quats,
        domain_edge=domain_edge,
        boundary=boundary,
    )


def pair_move(c: Contact, p_i: Particle, p_j: Particle) -> tuple[np.ndarray, np.ndarray]:
    """Translation and rotation vectors of particle i due to one overlap."""
    t = (p_i.mass / (p_i.mass + p_j.mass)) * c.delta
    d_i = c.point_i - p_i.position
    r = np.cross(d_i, t)
    return t, r


@dataclass
class _ContactBatch:
    idx_i: np.ndarray
    idx_j: np.ndarray
    delta: np.ndarray
    point_i: np.ndarray
    point_j: np.ndarray
    pos_j_used: np.ndarray
    rel_overlap: np.ndarray
    wall_idx: np.ndarray
    wall_delta: np.ndarray
    wall_rel_overlap: np.ndarray

    @property
    def n_contacts(self) -> int:
        return len(self.idx_i) + len(self.wall_idx)

    def overlap_stats(self) -> tuple[float, float]:
        all_rel = np.concatenate([self.rel_overlap, self.wall_rel_overlap])
        if len(all_rel) == 0:
            return 0.0, 0.0
        return float(np.mean(all_rel)), float(np.max(all_rel))


def _current_contacts(state: McState, arrays: ShapeArrays) -> _ContactBatch:
    periodic_edge = state.domain_edge if state.boundary == "periodic" else None
    idx_i, idx_j = broad_phase(state.positions, arrays.r_bound, periodic_edge)
    pos_i = state.positions[idx_i]
    pos_j = state.positions[idx_j]
    if periodic_edge is not None and len(idx_i):
        pos_j = minimum_image(pos_i, pos_j, periodic_edge)
    res = pair_contacts(arrays, state.quats, pos_i, pos_j, idx_i, idx_j)
    # Unsettled poly-ellipsoid pairs count as contacting with the last iterate.
    eff = res["found"] | (~res["settled"] & (res["depth"] > 0.0))
    sel = np.nonzero(eff)[0]
    r_eq_sum = arrays.r_eq[idx_i[sel]] + arrays.r_eq[idx_j[sel]]
    rel = res["depth"][sel] / r_eq_sum

    if state.boundary == "hard_walls":
        edge = state.domain_edge
        planes = [
            ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
            ((0.0, 0.0, edge), (0.0, 0.0, -1.0)),
            ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
            ((edge, 0.0, 0.0), (-1.0, 0.0, 0.0)),
            ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
            ((0.0, edge, 0.0), (0.0, -1.0, 0.0)),
        ]
        w_idx, _, _, _, w_delta, w_depth, _ = wall_contacts(
            arrays, state.quats, state.positions, planes
        )
        w_rel = w_depth / arrays.r_eq[w_idx]
    else:
        w_idx = np.empty(0, dtype=np.int64)
        w_delta = np.zeros((0, 3))
        w_rel = np.empty(0)

    return _ContactBatch(
        idx_i=idx_i[sel],
        idx_j=idx_j[sel],
        delta=res["delta"][sel],
        point_i=res["point_i"][sel],
        point_j=res["point_j"][sel],
        pos_j_used=pos_j[sel],
        rel_overlap=rel,
        wall_idx=w_idx,
        wall_delta=w_delta,
        wall_rel_overlap=w_rel,
    )


def _moves_from_contacts(
    state: McState, arrays: ShapeArrays, batch: _ContactBatch, average_moves: bool
) -> tuple[np.ndarray, np.ndarray]:
    n = len(state.assembly)
    trans = np.zeros((n, 3))
    rot = np.zeros((n, 3))
    counts = np.zeros(n)

    i, j = batch.idx_i, batch.idx_j
    if len(i):
        m_i = arrays.mass[i]
        m_j = arrays.mass[j]
        w_i = (m_i / (m_i + m_j))[:, None]
        w_j = (m_j / (m_i + m_j))[:, None]
        t_i = w_i * batch.delta
        t_j = -w_j * batch.delta
        d_i = batch.point_i - state.positions[i]
        d_j = batch.point_j - batch.pos_j_used
        r_i = np.cross(d_i, t_i)
        r_j = np.cross(d_j, t_j)
        np.add.at(trans, i, t_i)
        np.add.at(trans, j, t_j)
        np.add.at(rot, i, r_i)
        np.add.at(rot, j, r_j)
        np.add.at(counts, i, 1.0)
        np.add.at(counts, j, 1.0)

    if len(batch.wall_idx):
        # Immovable walls push the particle by the full overlap vector.
        np.add.at(trans, batch.wall_idx, batch.wall_delta)
        np.add.at(counts, batch.wall_idx, 1.0)

    if average_moves:
        nz = counts > 0
        trans[nz] /= counts[nz, None]
        rot[nz] /= counts[nz, None]
    return trans, rot


def aggregate_moves(
    state: McState, average_moves: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle translation and rotation sums for the current state."""
    arrays = ShapeArrays(state.assembly)
    batch = _current_contacts(state, arrays)
    return _moves_from_contacts(state, arrays, batch, average_moves)


def apply_moves(
    state: McState,
    moves: tuple[np.ndarray, np.ndarray],
    rotation_scale: float = 1.0,
    move_scale: float = 1.0,
) -> McState:
    """Jacobi update: all positions and orientations advance together."""
    trans, rot = moves
    state.positions = state.positions + move_scale * trans

    r_eq = np.array([equivalent_radius(p.shape) for p in state.assembly])
    angle = rotation_scale * np.linalg.norm(rot, axis=1) / r_eq**2
    spin = np.any(rot != 0.0, axis=1)
    if np.any(spin):
        dq = quat_from_axis_angle(rot[spin], angle[spin])
        state.quats[spin] = quat_normalize(quat_multiply(dq, state.quats[spin]))

    if state.boundary == "periodic":
        edge = state.domain_edge
        state.positions -= edge * np.floor(state.positions / edge)
    elif state.boundary == "hard_walls":
        state.positions = np.clip(state.positions, 0.0, state.domain_edge)
    state.iteration += 1
    return state


STALL_WINDOW = 500
STALL_IMPROVEMENT = 1e-3
STALL_SCALE_STEP = 1.1
STALL_SCALE_CAP = 2.0


def run(assembly: list[Particle], config: McConfig) -> PackingSnapshot:
    """Relax an assembly until the mean relative overlap meets tolerance.

    Always returns a snapshot; `meta["converged"]` records the outcome and
    the caller may raise NotConverged on demand.
    """
    edge = initial_domain(assembly, config.phi0)
    state = initial_placement(assembly, edge, config.seed, config.boundary)
    arrays = ShapeArrays(assembly)
    r_eq = arrays.r_eq

    converged = False
    batch = None
    for _ in range(config.max_iterations):
        batch = _current_contacts(state, arrays)
        mean_rel, max_rel = batch.overlap_stats()
        state.mean_relative_overlap = mean_rel
        state.history.append((state.iteration, mean_rel, max_rel, batch.n_contacts))
        # Convergence also caps the worst single overlap at 10x tolerance so
        # a low mean cannot hide one badly jammed pair.
        if mean_rel <= config.tolerance and max_rel <= 10.0 * config.tolerance:
            converged = True
            break

        if len(state.history) > STALL_WINDOW and state.iteration % STALL_WINDOW == 0:
            prev = state.history[-STALL_WINDOW - 1][1]
            if prev > 0 and (prev - mean_rel) / prev < STALL_IMPROVEMENT:
                old = state.move_scale
                state.move_scale = min(state.move_scale * STALL_SCALE_STEP, STALL_SCALE_CAP)
                if state.move_scale != old:
                    log.info(
                        "iteration %d stalled at mean overlap %.3e; "
                        "translation scale -> %.3f",
                        state.iteration, mean_rel, state.move_scale,
                    )

        moves = _moves_from_contacts(state, arrays, batch, config.average_moves)
        apply_moves(state, moves, config.rotation_scale, state.move_scale)

    if converged:
        final_batch = batch
    else:
        final_batch = _current_contacts(state, arrays)
        mean_rel, max_rel = final_batch.overlap_stats()
        state.mean_relative_overlap = mean_rel
        state.history.append((state.iteration, mean_rel, max_rel, final_batch.n_contacts))

    contacts = [
        SnapshotContact(
            id_i=assembly[int(a)].id,
            id_j=assembly[int(b)].id,
            point_i=final_batch.point_i[k].copy(),
            point_j=final_batch.point_j[k].copy(),
            delta=final_batch.delta[k].copy(),
        )
        for k, (a, b) in enumerate(zip(final_batch.idx_i, final_batch.idx_j))
    ]

    if config.boundary == "periodic":
        domain = PeriodicCube(edge=edge)
    elif config.boundary == "hard_walls":
        domain = FreeCloud(lo=np.zeros(3), hi=np.full(3, edge))
    else:
        r_b = arrays.r_bound
        domain = FreeCloud(
            lo=np.min(state.positions - r_b[:, None], axis=0),
            hi=np.max(state.positions + r_b[:, None], axis=0),
        )

    max_rel_final = state.history[-1][2]
    meta = {
        "converged": bool(converged),
        "iterations": state.iteration,
        "tolerance": config.tolerance,
        "phi0": config.phi0,
        "boundary": config.boundary,
        "mean_relative_overlap": state.mean_relative_overlap,
        "max_relative_overlap": max_rel_final,
        "initial_domain_edge": edge,
        "seed": config.seed,
    }
    snap = PackingSnapshot(
        particles=state.particles,
        domain=domain,
        provenance="MC",
        contacts=contacts,
        meta=meta,
    )
    snap.history = state.history  # run trace for the history CSV
    return snap


def history_rows(snapshot: PackingSnapshot) -> list[tuple[int, float, float, int]]:
    return getattr(snapshot, "history", [])
