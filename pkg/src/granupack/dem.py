"""DEM gravitational deposition with Hertz-Mindlin contacts.

Particles are seeded without overlaps on a jittered grid above the floor
of an open-top container, released from rest under gravity, and stepped
with central-difference (leapfrog) integration of m a = F and the
body-frame Euler equations until the assembly comes to rest.

Contact model: Hertz normal force (4/3) E* sqrt(R*) depth^(3/2) with
viscous normal damping -2 beta sqrt(S_n m*) v_n clamped non-tensile, and
incremental Mindlin tangential stiffness 8 G* sqrt(R* depth) acting on
accumulated tangential displacement, capped by Coulomb friction mu |F_n|
with the memory rescaled to the cap on slip. Effective radii use the
local mean curvature radii at the contact points, falling back to the
volume-equivalent radius when the curvature evaluation is ill-conditioned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .broadphase import PairCache, broad_phase
from .contact import NonConvergence, ShapeArrays, pair_contacts, wall_contacts
from .shapes import Particle, octant_semi_axes
from .snapshot import ContainerDomain, PackingSnapshot, SnapshotContact
from .vecmath import (
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    random_unit_quats,
)

log = logging.getLogger(__name__)


class FillOverflow(RuntimeError):
    pass


class InstabilityDetected(RuntimeError):
    pass


class NotAtRest(RuntimeError):
    def __init__(self, ke_per_mass: float, steps: int):
        self.ke_per_mass = ke_per_mass
        self.steps = steps
        super().__init__(
            f"assembly not at rest after {steps} steps "
            f"(kinetic energy {ke_per_mass:.3e} J/kg)"
        )


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 1e8
    poisson_ratio: float = 0.3
    friction_coefficient: float = 0.5
    damping_ratio: float = 0.3

    def __post_init__(self):
        if self.youngs_modulus <= 0.0:
            raise ValueError("Young's modulus must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must be in [0, 0.5)")
        if self.friction_coefficient < 0.0:
            raise ValueError("friction coefficient must be non-negative")
        if not 0.0 <= self.damping_ratio < 1.0:
            raise ValueError("damping ratio must be in [0, 1)")

    @property
    def shear_modulus(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))


@dataclass(frozen=True)
class Container:
    """Open-top box: floor at z=0, side walls at 0/width in x and y."""

    width_x: float
    width_y: float

    def __post_init__(self):
        if self.width_x <= 0.0 or self.width_y <= 0.0:
            raise ValueError("container widths must be positive")

    @property
    def planes(self):
        return [
            ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),  # floor, wall id -1
            ((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),  # -2
            ((self.width_x, 0.0, 0.0), (-1.0, 0.0, 0.0)),  # -3
            ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0)),  # -4
            ((0.0, self.width_y, 0.0), (0.0, -1.0, 0.0)),  # -5
        ]


@dataclass
class DemConfig:
    material: Material = field(default_factory=Material)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    dt: float | str = "auto"
    rest_ke_threshold: float = 1e-6  # J/kg
    rest_window: int = 1000
    max_steps: int = 200_000
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if isinstance(self.dt, str):
            if self.dt != "auto":
                raise ValueError(f"dt must be a positive number or 'auto', got {self.dt!r}")
        elif self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.rest_ke_threshold <= 0.0 or self.rest_window < 1 or self.max_steps < 1:
            raise ValueError("rest thresholds and step limits must be positive")


@dataclass
class DemState:
    assembly: list[Particle]
    positions: np.ndarray
    quats: np.ndarray
    velocities: np.ndarray
    omega_body: np.ndarray  # angular velocity, body principal frame
    step: int = 0
    time: float = 0.0
    started: bool = False  # half-kick applied
    tang_keys: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    tang_disp: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    trace: list[tuple[int, float, float, float, int]] = field(default_factory=list)

    @property
    def particles(self) -> list[Particle]:
        out = []
        for k, p in enumerate(self.assembly):
            out.append(
                Particle(
                    id=p.id, shape=p.shape, position=self.positions[k].copy(),
                    orientation=self.quats[k].copy(), mass=p.mass,
                    inertia=p.inertia.copy(), density=p.density,
                )
            )
        return out


# ---------------------------------------------------------------------------
# Initial fill
# ---------------------------------------------------------------------------

FILL_GAP = 0.08  # clearance fraction of the layer radius


def initial_fill(assembly: list[Particle], container: Container, seed: int) -> DemState:
    """Non-overlapping jittered-grid placement above the floor.

    Particles are sorted large-first and packed shelf-wise: each layer's
    grid pitch comes from the largest remaining particle, so clearances
    are positive by construction. Raises FillOverflow when the column
    would exceed ten times the dense-packing height estimate.
    """
    from .shapes import volume

    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    arrays = ShapeArrays(assembly)
    n = len(assembly)
    order = np.argsort(-arrays.r_bound, kind="stable")

    total_volume = float(sum(volume(p.shape) for p in assembly))
    area = container.width_x * container.width_y
    dense_height = total_volume / (0.6 * area)
    max_height = 10.0 * max(dense_height, 2.0 * float(np.max(arrays.r_bound)))

    positions = np.zeros((n, 3))
    placed = 0
    z_base = 0.0
    while placed < n:
        r_layer = float(arrays.r_bound[order[placed]])
        pitch = 2.0 * r_layer * (1.0 + FILL_GAP)
        nx = int(np.floor(container.width_x / pitch))
        ny = int(np.floor(container.width_y / pitch))
        if nx < 1 or ny < 1:
            raise FillOverflow(
                f"container {container.width_x} x {container.width_y} too narrow for "
                f"a particle of bounding radius {r_layer}"
            )
        count = min(nx * ny, n - placed)
        z = z_base + r_layer * (1.0 + FILL_GAP)
        if z + r_layer > max_height:
            raise FillOverflow(
                f"fill column exceeds {max_height:.1f} m "
                f"(10x dense-packing estimate) after {placed} particles"
            )
        cells = rng.permutation(nx * ny)[:count]
        for k in range(count):
            idx = order[placed + k]
            cx, cy = divmod(int(cells[k]), ny)
            slack = pitch / 2.0 - float(arrays.r_bound[idx]) - 0.01 * r_layer
            slack = max(slack, 0.0)
            jitter = rng.uniform(-slack, slack, size=2)
            positions[idx] = (
                (cx + 0.5) * pitch + jitter[0],
                (cy + 0.5) * pitch + jitter[1],
                z,
            )
        placed += count
        z_base = z + r_layer * (1.0 + FILL_GAP)

    quats = random_unit_quats(n, rng)
    return DemState(
        assembly=assembly,
        positions=positions,
        quats=quats,
        velocities=np.zeros((n, 3)),
        omega_body=np.zeros((n, 3)),
    )


# ---------------------------------------------------------------------------
# Contact mechanics
# ---------------------------------------------------------------------------

def effective_modulus(mat: Material) -> float:
    return 1.0 / (2.0 * (1.0 - mat.poisson_ratio**2) / mat.youngs_modulus)


def effective_shear(mat: Material) -> float:
    return 1.0 / (2.0 * (2.0 - mat.poisson_ratio) / mat.shear_modulus)


def curvature_radius_batch(arrays: ShapeArrays, quats, idx, points_world, positions):
    """Mean-curvature radius of each body surface at a world point.

    Uses the level-set mean curvature of the local octant ellipsoid;
    ill-conditioned values (non-finite or wildly far from the equivalent
    radius) fall back to the volume-equivalent radius.
    """
    if np.all(arrays.is_sphere[idx]):
        return arrays.s6[idx, 0].copy()
    rot = quat_to_matrix(quats[idx])
    junction = positions - np.einsum("mij,mj->mi", rot, arrays.offset[idx])
    local = np.einsum("mji,mj->mi", rot, points_world - junction)
    signs = np.where(local >= 0.0, 1.0, -1.0)
    semis = octant_semi_axes(arrays.s6[idx], signs)
    inv2 = 1.0 / semis**2
    grad = 2.0 * local * inv2
    gnorm = np.linalg.norm(grad, axis=1)
    num = np.einsum("mi,mi->m", grad**2, 2.0 * inv2) - gnorm**2 * np.sum(2.0 * inv2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_mean = num / (2.0 * gnorm**3)
        radius = 1.0 / np.abs(h_mean)
    r_eq = arrays.r_eq[idx]
    bad = ~np.isfinite(radius) | (radius < 1e-8 * r_eq) | (radius > 1e8 * r_eq)
    return np.where(bad, r_eq, radius)


def hertz_normal_force(
    c, material: Material, rel_normal_velocity: float, p_i: Particle, p_j: Particle | None = None
) -> np.ndarray:
    """Normal contact force on particle i (p_j None means a wall contact).

    `rel_normal_velocity` is the component of i's velocity relative to j
    along the contact normal (positive = separating).
    """
    e_star = effective_modulus(material)
    arrays = ShapeArrays([p_i] if p_j is None else [p_i, p_j])
    quats = np.array([p_i.orientation] if p_j is None else [p_i.orientation, p_j.orientation])
    r_i = curvature_radius_batch(
        arrays, quats, np.array([0]), c.point_i[None, :], p_i.position[None, :]
    )[0]
    if p_j is None:
        r_star = r_i
        m_star = p_i.mass
    else:
        r_j = curvature_radius_batch(
            arrays, quats, np.array([1]), c.point_j[None, :], p_j.position[None, :]
        )[0]
        r_star = 1.0 / (1.0 / r_i + 1.0 / r_j)
        m_star = p_i.mass * p_j.mass / (p_i.mass + p_j.mass)
    f_el = (4.0 / 3.0) * e_star * np.sqrt(r_star) * c.depth**1.5
    s_n = 2.0 * e_star * np.sqrt(r_star * c.depth)
    f_visc = -2.0 * material.damping_ratio * np.sqrt(s_n * m_star) * rel_normal_velocity
    return max(0.0, f_el + f_visc) * c.normal


def mindlin_tangential_force(
    c,
    material: Material,
    tangential_memory: np.ndarray,
    rel_tangential_velocity: np.ndarray,
    normal_force_mag: float,
    r_star: float,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Tangential force on particle i and the updated displacement memory."""
    xi = np.asarray(tangential_memory, dtype=float)
    xi = xi - np.dot(xi, c.normal) * c.normal  # rotate into the contact plane
    xi = xi + np.asarray(rel_tangential_velocity) * dt
    k_t = 8.0 * effective_shear(material) * np.sqrt(r_star * c.depth)
    f_t = -k_t * xi
    cap = material.friction_coefficient * normal_force_mag
    mag = np.linalg.norm(f_t)
    if mag > cap:
        f_t = f_t * (cap / mag) if mag > 0 else f_t
        xi = -f_t / k_t if k_t > 0 else xi
    return f_t, xi


@dataclass
class _StepForces:
    force: np.ndarray  # (N, 3) including gravity
    torque_world: np.ndarray  # (N, 3)
    keys: np.ndarray
    disp: np.ndarray
    n_contacts: int
    contact_rows: dict
    max_tangential_ratio: float
    wall_support: np.ndarray  # net contact force from walls on particles
    elastic_energy: float


def _pair_key(n: int, idx_i, idx_j):
    return idx_i * np.int64(n + 8) + idx_j


def _wall_key(n: int, idx, wall_id):
    return idx * np.int64(n + 8) + np.int64(n) + (-wall_id - 1)


def _hertz_mindlin_batch(material, depth, normal, v_rel, r_star, m_star, xi, dt):
    """Normal + tangential forces and updated memory for one contact batch."""
    e_star = effective_modulus(material)
    g_star = effective_shear(material)

    v_n = np.einsum("mi,mi->m", v_rel, normal)
    v_t = v_rel - v_n[:, None] * normal

    f_el = (4.0 / 3.0) * e_star * np.sqrt(r_star) * depth**1.5
    s_n = 2.0 * e_star * np.sqrt(r_star * depth)
    f_n = np.maximum(0.0, f_el - 2.0 * material.damping_ratio * np.sqrt(s_n * m_star) * v_n)
    elastic = float(np.sum((8.0 / 15.0) * e_star * np.sqrt(r_star) * depth**2.5))

    xi = xi - np.einsum("mi,mi->m", xi, normal)[:, None] * normal
    if dt is not None:
        xi = xi + v_t * dt
    k_t = 8.0 * g_star * np.sqrt(r_star * depth)
    f_t = -k_t[:, None] * xi
    mag = np.linalg.norm(f_t, axis=1)
    cap = material.friction_coefficient * f_n
    slip = mag > cap
    scale = np.where(slip & (mag > 0), cap / np.where(mag > 0, mag, 1.0), 1.0)
    f_t = f_t * scale[:, None]
    xi = np.where(slip[:, None], -f_t / np.where(k_t[:, None] > 0, k_t[:, None], 1.0), xi)

    ratio = 0.0
    if np.any(f_n > 0):
        ratio = float(np.max(np.linalg.norm(f_t, axis=1) / np.maximum(f_n, 1e-300)))
    return f_n, f_t, xi, elastic, ratio


def compute_forces(
    state: DemState,
    container: Container | None,
    material: Material,
    dt: float | None,
    arrays: ShapeArrays | None = None,
    gravity=(0.0, 0.0, -9.81),
    pair_cache=None,
) -> _StepForces:
    """All contact forces and torques for the current state.

    When dt is None the tangential memory is read but not advanced (pure
    query). Raises NonConvergence if any narrow-phase pair fails to settle.
    """
    if arrays is None:
        arrays = ShapeArrays(state.assembly)
    n = arrays.n
    gravity = np.asarray(gravity, dtype=float)
    force = arrays.mass[:, None] * gravity
    torque = np.zeros((n, 3))
    wall_support = np.zeros(3)

    rot = quat_to_matrix(state.quats)
    omega_world = np.einsum("nij,nj->ni", rot, state.omega_body)

    if pair_cache is not None:
        idx_i, idx_j = pair_cache.pairs(state.positions, arrays.r_bound)
    else:
        idx_i, idx_j = broad_phase(state.positions, arrays.r_bound)
    res = pair_contacts(
        arrays, state.quats, state.positions[idx_i], state.positions[idx_j], idx_i, idx_j
    )
    if not np.all(res["settled"]):
        bad = np.nonzero(~res["settled"])[0]
        raise NonConvergence(list(zip(idx_i[bad].tolist(), idx_j[bad].tolist())))
    sel = np.nonzero(res["found"])[0]

    all_keys = []
    all_disp = []
    rows = {}
    max_ratio = 0.0
    elastic = 0.0

    if len(sel):
        i = idx_i[sel]
        j = idx_j[sel]
        depth = res["depth"][sel]
        normal = res["normal"][sel]
        point = 0.5 * (res["point_i"][sel] + res["point_j"][sel])

        r_i = curvature_radius_batch(arrays, state.quats, i, res["point_i"][sel], state.positions[i])
        r_j = curvature_radius_batch(arrays, state.quats, j, res["point_j"][sel], state.positions[j])
        r_star = 1.0 / (1.0 / r_i + 1.0 / r_j)
        m_star = arrays.mass[i] * arrays.mass[j] / (arrays.mass[i] + arrays.mass[j])

        v_i = state.velocities[i] + np.cross(omega_world[i], point - state.positions[i])
        v_j = state.velocities[j] + np.cross(omega_world[j], point - state.positions[j])

        keys = _pair_key(n, i, j)
        xi0 = _lookup_memory(state, keys)
        f_n, f_t, xi, e_batch, ratio = _hertz_mindlin_batch(
            material, depth, normal, v_i - v_j, r_star, m_star, xi0, dt
        )
        elastic += e_batch
        max_ratio = max(max_ratio, ratio)

        f_total = f_n[:, None] * normal + f_t
        np.add.at(force, i, f_total)
        np.add.at(force, j, -f_total)
        np.add.at(torque, i, np.cross(point - state.positions[i], f_total))
        np.add.at(torque, j, np.cross(point - state.positions[j], -f_total))

        all_keys.append(keys)
        all_disp.append(xi)
        rows["pair"] = (i, j, res["point_i"][sel], res["point_j"][sel],
                        res["delta"][sel], f_total, f_n)

    if container is not None:
        w_idx, w_id, w_pi, w_pj, w_delta, w_depth, w_normal = wall_contacts(
            arrays, state.quats, state.positions, container.planes
        )
        if len(w_idx):
            r_star = curvature_radius_batch(
                arrays, state.quats, w_idx, w_pi, state.positions[w_idx]
            )  # plane curvature radius is infinite
            m_star = arrays.mass[w_idx]
            point = 0.5 * (w_pi + w_pj)
            v_rel = state.velocities[w_idx] + np.cross(
                omega_world[w_idx], point - state.positions[w_idx]
            )

            keys = _wall_key(n, w_idx, w_id)
            xi0 = _lookup_memory(state, keys)
            f_n, f_t, xi, e_batch, ratio = _hertz_mindlin_batch(
                material, w_depth, w_normal, v_rel, r_star, m_star, xi0, dt
            )
            elastic += e_batch
            max_ratio = max(max_ratio, ratio)

            f_total = f_n[:, None] * w_normal + f_t
            np.add.at(force, w_idx, f_total)
            np.add.at(torque, w_idx, np.cross(point - state.positions[w_idx], f_total))
            wall_support = np.sum(f_total, axis=0)

            all_keys.append(keys)
            all_disp.append(xi)
            rows["wall"] = (w_idx, w_id, w_pi, w_pj, w_delta, f_total, f_n)

    if all_keys:
        keys = np.concatenate(all_keys)
        disp = np.concatenate(all_disp)
        order = np.argsort(keys, kind="stable")
        keys, disp = keys[order], disp[order]
    else:
        keys = np.empty(0, dtype=np.int64)
        disp = np.zeros((0, 3))

    n_contacts = sum(len(v[0]) for v in rows.values())
    return _StepForces(
        force=force,
        torque_world=torque,
        keys=keys,
        disp=disp,
        n_contacts=n_contacts,
        contact_rows=rows,
        max_tangential_ratio=max_ratio,
        wall_support=wall_support,
        elastic_energy=elastic,
    )


def _lookup_memory(state: DemState, keys: np.ndarray) -> np.ndarray:
    """Tangential displacement carried over for persisting contacts."""
    out = np.zeros((len(keys), 3))
    if len(state.tang_keys) == 0 or len(keys) == 0:
        return out
    pos = np.searchsorted(state.tang_keys, keys)
    pos = np.clip(pos, 0, len(state.tang_keys) - 1)
    hit = state.tang_keys[pos] == keys
    out[hit] = state.tang_disp[pos[hit]]
    return out


def resultant_loads(
    state: DemState,
    container: Container | None,
    material: Material,
    gravity=(0.0, 0.0, -9.81),
) -> tuple[np.ndarray, np.ndarray]:
    """Resultant force (world) and moment (body principal frame) per particle."""
    step = compute_forces(state, container, material, dt=None, gravity=gravity)
    rot = quat_to_matrix(state.quats)
    torque_body = np.einsum("nji,nj->ni", rot, step.torque_world)
    return step.force, torque_body


def auto_timestep(assembly: list[Particle], material: Material) -> float:
    """0.2 sqrt(m_min / k_max) with k_max the stiffest Hertz tangent
    stiffness at a reference depth of 1e-3 of the smallest size."""
    arrays = ShapeArrays(assembly)
    r_min = float(np.min(arrays.r_eq))
    r_max = float(np.max(arrays.r_bound))
    m_min = float(np.min(arrays.mass))
    k_max = 2.0 * effective_modulus(material) * np.sqrt(r_max * 1e-3 * r_min)
    return 0.2 * float(np.sqrt(m_min / k_max))


def central_difference_step(
    state: DemState,
    loads: tuple[np.ndarray, np.ndarray],
    dt: float,
    mass: np.ndarray | None = None,
    inertia: np.ndarray | None = None,
) -> DemState:
    """Leapfrog update; the first call applies a half kick from rest.

    Velocities live at half steps: v += (F/m) dt (dt/2 on the first call),
    x += v dt; angular velocities follow the body-frame Euler equations
    with the gyroscopic term and an incremental quaternion rotation.
    """
    force, torque_body = loads
    if mass is None:
        mass = np.array([p.mass for p in state.assembly])
    if inertia is None:
        inertia = np.array([p.inertia for p in state.assembly])

    kick = 0.5 * dt if not state.started else dt
    state.started = True
    state.velocities = state.velocities + force / mass[:, None] * kick
    gyro = np.cross(state.omega_body, inertia * state.omega_body)
    state.omega_body = state.omega_body + (torque_body - gyro) / inertia * kick

    state.positions = state.positions + state.velocities * dt
    rot = quat_to_matrix(state.quats)
    omega_world = np.einsum("nij,nj->ni", rot, state.omega_body)
    spinning = np.einsum("ni,ni->n", omega_world, omega_world) > 0.0
    if np.any(spinning):
        angle = np.linalg.norm(omega_world[spinning], axis=1) * dt
        dq = quat_from_axis_angle(omega_world[spinning], angle)
        state.quats[spinning] = quat_normalize(quat_multiply(dq, state.quats[spinning]))
    state.step += 1
    state.time += dt
    return state


def kinetic_energy(state: DemState) -> tuple[float, float]:
    """Total kinetic energy (translational + rotational) and max speed."""
    mass = np.array([p.mass for p in state.assembly])
    inertia = np.array([p.inertia for p in state.assembly])
    ke = 0.5 * float(np.sum(mass * np.einsum("ni,ni->n", state.velocities, state.velocities)))
    ke += 0.5 * float(np.sum(inertia * state.omega_body**2))
    vmax = float(np.sqrt(np.max(np.einsum("ni,ni->n", state.velocities, state.velocities))))
    return ke, vmax


def run_deposition(
    assembly: list[Particle], config: DemConfig, container: Container
) -> PackingSnapshot:
    """Drop the assembly into the container and step until rest.

    Always returns a snapshot; `meta["at_rest"]` records the outcome and
    the caller may raise NotAtRest on demand.
    """
    state = initial_fill(assembly, container, config.seed)
    arrays = ShapeArrays(assembly)
    dt = auto_timestep(assembly, config.material) if config.dt == "auto" else float(config.dt)
    gravity = np.asarray(config.gravity, dtype=float)
    g_mag = float(np.linalg.norm(gravity))

    fill_top = float(np.max(state.positions[:, 2] + arrays.r_bound))
    speed_limit = 10.0 * np.sqrt(max(2.0 * g_mag * fill_top, 1e-12))
    total_mass = float(np.sum(arrays.mass))

    mass = arrays.mass
    inertia = np.array([p.inertia for p in assembly])
    cache = PairCache(skin=0.5 * float(np.min(arrays.r_eq)))

    rest_run = 0
    at_rest = False
    for _ in range(config.max_steps):
        step_data = compute_forces(
            state, container, config.material, dt, arrays=arrays, gravity=gravity,
            pair_cache=cache,
        )
        state.tang_keys = step_data.keys
        state.tang_disp = step_data.disp

        rot = quat_to_matrix(state.quats)
        torque_body = np.einsum("nji,nj->ni", rot, step_data.torque_world)
        central_difference_step(state, (step_data.force, torque_body), dt, mass, inertia)

        ke, vmax = kinetic_energy(state)
        ke_per_mass = ke / total_mass
        if state.step % config.trace_every == 0 or state.step == 1:
            state.trace.append((state.step, state.time, ke, vmax, step_data.n_contacts))
        if vmax > speed_limit:
            raise InstabilityDetected(
                f"particle speed {vmax:.2f} m/s exceeds blow-up guard "
                f"{speed_limit:.2f} m/s at step {state.step}"
            )

        if ke_per_mass < config.rest_ke_threshold:
            rest_run += 1
            if rest_run >= config.rest_window:
                at_rest = True
                break
        else:
            rest_run = 0

    # Final contact network with forces for the snapshot.
    final = compute_forces(state, container, config.material, dt=None, arrays=arrays, gravity=gravity)
    contacts = []
    if "pair" in final.contact_rows:
        i, j, p_i, p_j, delta, f_total, _ = final.contact_rows["pair"]
        for k in range(len(i)):
            contacts.append(
                SnapshotContact(
                    id_i=assembly[int(i[k])].id, id_j=assembly[int(j[k])].id,
                    point_i=p_i[k].copy(), point_j=p_j[k].copy(),
                    delta=delta[k].copy(), force=f_total[k].copy(),
                )
            )
    if "wall" in final.contact_rows:
        w_idx, w_id, p_i, p_j, delta, f_total, _ = final.contact_rows["wall"]
        for k in range(len(w_idx)):
            contacts.append(
                SnapshotContact(
                    id_i=assembly[int(w_idx[k])].id, id_j=int(w_id[k]),
                    point_i=p_i[k].copy(), point_j=p_j[k].copy(),
                    delta=delta[k].copy(), force=f_total[k].copy(),
                )
            )

    ke, vmax = kinetic_energy(state)
    # Free surface: 99th percentile of particle top heights, so a few
    # stragglers resting on the bed do not inflate the measurement region.
    top = float(np.percentile(state.positions[:, 2] + arrays.r_bound, 99.0))
    meta = {
        "at_rest": bool(at_rest),
        "steps": state.step,
        "dt": dt,
        "time": state.time,
        "kinetic_energy_per_mass": ke / total_mass,
        "max_speed": vmax,
        "rest_ke_threshold": config.rest_ke_threshold,
        "wall_support_z": float(final.wall_support[2]),
        "total_weight": total_mass * g_mag,
        "max_tangential_ratio": final.max_tangential_ratio,
        "seed": config.seed,
    }
    snap = PackingSnapshot(
        particles=state.particles,
        domain=ContainerDomain(
            width_x=container.width_x, width_y=container.width_y, free_surface_z=top
        ),
        provenance="DEM",
        contacts=contacts,
        meta=meta,
    )
    snap.trace = state.trace
    return snap


def trace_rows(snapshot: PackingSnapshot) -> list[tuple[int, float, float, float, int]]:
    return getattr(snapshot, "trace", [])
