"""Packing microstructure metrics and MC-vs-DEM comparison.

Metrics operate on PackingSnapshot objects from either packer: packing
fraction (stratified point-sampling of boundary-straddling particles),
coordination number, radial distribution function (minimum-image in
periodic domains, shell edge-correction in bounded ones), contact-normal
fabric tensor, and force-chain extraction for snapshots that carry
contact forces.

Snapshots without forces (MC) get their contact network recomputed
geometrically at a configurable near-contact tolerance; DEM snapshots use
their stored force-bearing contacts.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .broadphase import broad_phase, minimum_image
from .contact import ShapeArrays, pair_contacts
from .shapes import contains_local, equivalent_radius, volume
from .snapshot import (
    ContainerDomain,
    FreeCloud,
    PackingSnapshot,
    PeriodicCube,
    snapshot_to_bytes,
)
from .vecmath import quat_to_matrix


class EmptyRegion(ValueError):
    pass


class NoContacts(ValueError):
    pass


class RequiresForces(ValueError):
    pass


class IncompatibleBinning(ValueError):
    pass


class BinTooFine(UserWarning):
    pass


@dataclass
class RdfCurve:
    bin_centers: np.ndarray
    g: np.ndarray
    bin_width: float
    sparse_bins: bool = False  # statistical warning: expected pairs/bin < 5


@dataclass
class ForceChainGraph:
    nodes: list[int]
    edges: list[tuple[int, int, float]]  # (id_i, id_j, normal force)
    chains: list[list[int]]
    chain_mean_forces: list[float]

    @property
    def summary(self) -> dict:
        lengths = [len(c) for c in self.chains]
        return {
            "n_strong_edges": len(self.edges),
            "n_chains": len(self.chains),
            "chain_lengths": lengths,
            "mean_chain_length": float(np.mean(lengths)) if lengths else 0.0,
            "max_chain_length": int(max(lengths)) if lengths else 0,
            "mean_chain_force": float(np.mean(self.chain_mean_forces))
            if self.chain_mean_forces
            else 0.0,
        }


@dataclass
class PackingMetrics:
    fraction: float
    mean_cn: float
    cn_hist: list[tuple[int, int]]
    rdf: RdfCurve
    fabric: np.ndarray
    chains: dict | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Regions and packing fraction
# ---------------------------------------------------------------------------

def _max_diameter(s: PackingSnapshot) -> float:
    from .shapes import bounding_radius

    return 2.0 * max(bounding_radius(p.shape) for p in s.particles)


def default_region(s: PackingSnapshot) -> tuple[np.ndarray, np.ndarray]:
    """Measurement box for a snapshot: (lo, hi) corners.

    Periodic cubes use the whole cell; containers keep the cross-section
    between 0.5 d_max above the floor and 2 d_max below the free surface;
    free clouds shrink the centroid bounding box by d_max per face to
    drop the fuzzy surface layer.
    """
    d = s.domain
    if isinstance(d, PeriodicCube):
        return np.zeros(3), np.full(3, d.edge)
    dmax = _max_diameter(s)
    if isinstance(d, ContainerDomain):
        lo = np.array([0.0, 0.0, 0.5 * dmax])
        hi = np.array([d.width_x, d.width_y, d.free_surface_z - 2.0 * dmax])
    else:
        pos = np.array([p.position for p in s.particles])
        lo = pos.min(axis=0) + dmax
        hi = pos.max(axis=0) - dmax
    if np.any(hi <= lo):
        raise EmptyRegion(f"measurement region is empty: lo={lo}, hi={hi}")
    return lo, hi


FRACTION_SAMPLES = 100_000  # stratified points per boundary-straddling particle


def _snapshot_seed(s: PackingSnapshot) -> int:
    digest = hashlib.sha256(snapshot_to_bytes(s)).digest()
    return int.from_bytes(digest[:8], "little")


def _body_points_world(p, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified sample of points inside the body, world frame."""
    s6 = p.shape.semis6
    lo = -s6[1::2]
    hi = s6[0::2]
    side = max(2, int(round(n_samples ** (1.0 / 3.0))))
    edges = [np.linspace(lo[k], hi[k], side + 1) for k in range(3)]
    starts = np.stack(np.meshgrid(*[e[:-1] for e in edges], indexing="ij"), axis=-1).reshape(-1, 3)
    widths = (hi - lo) / side
    pts = starts + rng.random(starts.shape) * widths
    from .shapes import centroid_offset

    local = pts - centroid_offset(p.shape)  # junction box -> centroid frame
    inside = contains_local(p.shape, local)
    rot = quat_to_matrix(p.orientation)
    return p.position + local[inside] @ rot.T


def packing_fraction(
    s: PackingSnapshot,
    region: tuple[np.ndarray, np.ndarray] | None = None,
    samples: int = FRACTION_SAMPLES,
) -> float:
    """Solid volume inside the region divided by the region volume.

    Particles entirely inside count exactly; boundary-straddling ones are
    integrated by deterministic stratified sampling seeded from the
    snapshot hash. Periodic snapshots measured over the full cell reduce
    to the exact sum of volumes.
    """
    if region is None:
        lo, hi = default_region(s)
    else:
        lo, hi = (np.asarray(region[0], dtype=float), np.asarray(region[1], dtype=float))
    if np.any(hi <= lo):
        raise EmptyRegion(f"region is empty: lo={lo}, hi={hi}")
    region_volume = float(np.prod(hi - lo))

    periodic_edge = s.domain.edge if isinstance(s.domain, PeriodicCube) else None
    full_cell = periodic_edge is not None and np.allclose(lo, 0.0) and np.allclose(
        hi, periodic_edge
    )

    from .shapes import bounding_radius

    rng = np.random.Generator(np.random.Philox(key=np.uint64(_snapshot_seed(s))))
    solid = 0.0
    for p in s.particles:
        v = volume(p.shape)
        if full_cell:
            solid += v
            continue
        rb = bounding_radius(p.shape)
        pos = p.position
        if periodic_edge is not None:
            pos = pos - periodic_edge * np.floor(pos / periodic_edge)
        if np.all(pos - rb >= lo) and np.all(pos + rb <= hi):
            solid += v
            continue
        if periodic_edge is None and (np.any(pos + rb <= lo) or np.any(pos - rb >= hi)):
            continue
        pts = _body_points_world(p, samples, rng)
        if len(pts) == 0:
            continue
        if periodic_edge is not None:
            pts = pts - periodic_edge * np.floor(pts / periodic_edge)
        frac_in = float(np.mean(np.all((pts >= lo) & (pts <= hi), axis=1)))
        solid += v * frac_in
    return solid / region_volume


# ---------------------------------------------------------------------------
# Contact network for metric purposes
# ---------------------------------------------------------------------------

def _geometric_contacts(s: PackingSnapshot, tolerance: float):
    """Pairs within `tolerance` surface gap, and their normals."""
    particles = s.particles
    arrays = ShapeArrays(particles)
    positions = np.array([p.position for p in particles])
    periodic_edge = s.domain.edge if isinstance(s.domain, PeriodicCube) else None
    idx_i, idx_j = broad_phase(
        positions, arrays.r_bound, periodic_edge, margin=0.5 * tolerance + 1e-12
    )
    pos_i = positions[idx_i]
    pos_j = positions[idx_j]
    if periodic_edge is not None and len(idx_i):
        pos_j = minimum_image(pos_i, pos_j, periodic_edge)
    quats = np.array([p.orientation for p in particles])
    res = pair_contacts(arrays, quats, pos_i, pos_j, idx_i, idx_j)
    near = res["gap"] <= tolerance
    delta = res["delta"][near]
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    # Touching pairs have a vanishing overlap vector; fall back to the
    # branch direction (fabric and CN are sign-blind).
    branch = pos_j[near] - pos_i[near]
    branch_norm = np.linalg.norm(branch, axis=1, keepdims=True)
    scale = float(np.mean(arrays.r_eq))
    use_delta = norms > 1e-9 * scale
    raw = np.where(use_delta, delta, branch)
    raw_norm = np.where(use_delta, norms, branch_norm)
    normals = np.where(raw_norm > 0, raw / np.where(raw_norm > 0, raw_norm, 1.0), [1.0, 0.0, 0.0])
    return idx_i[near], idx_j[near], normals


def default_contact_tolerance(s: PackingSnapshot) -> float:
    r_mean = float(np.mean([equivalent_radius(p.shape) for p in s.particles]))
    return 1e-3 * r_mean


def contact_network(s: PackingSnapshot, contact_tolerance: float | None = None):
    """(idx_i, idx_j, normals) of the metric contact set, walls excluded.

    DEM snapshots use their stored force-bearing contacts; MC snapshots
    recompute geometric contacts at the tolerance (default 1e-3 of the
    mean equivalent radius).
    """
    if s.has_forces and s.contacts:
        id_to_index = {p.id: k for k, p in enumerate(s.particles)}
        rows = [c for c in s.contacts if c.id_j >= 0]
        idx_i = np.array([id_to_index[c.id_i] for c in rows], dtype=np.int64)
        idx_j = np.array([id_to_index[c.id_j] for c in rows], dtype=np.int64)
        delta = np.array([c.delta for c in rows]).reshape(-1, 3)
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        normals = np.where(norms > 0, delta / np.where(norms > 0, norms, 1.0), [1.0, 0.0, 0.0])
        return idx_i, idx_j, normals
    tol = default_contact_tolerance(s) if contact_tolerance is None else contact_tolerance
    return _geometric_contacts(s, tol)


def coordination_number(
    s: PackingSnapshot, contact_tolerance: float | None = None
) -> tuple[float, list[tuple[int, int]]]:
    """Mean contacts per particle and the (cn, count) histogram."""
    idx_i, idx_j, _ = contact_network(s, contact_tolerance)
    n = len(s.particles)
    counts = np.zeros(n, dtype=np.int64)
    np.add.at(counts, idx_i, 1)
    np.add.at(counts, idx_j, 1)
    values, freq = np.unique(counts, return_counts=True)
    hist = [(int(v), int(c)) for v, c in zip(values, freq)]
    return float(np.mean(counts)), hist


# ---------------------------------------------------------------------------
# Radial distribution function
# ---------------------------------------------------------------------------

FIBONACCI_DIRECTIONS = 256


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n, dtype=float)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    z = 1.0 - 2.0 * (k + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def rdf(s: PackingSnapshot, bin_width: float, r_max: float) -> RdfCurve:
    """Centroid pair correlation g(r).

    Periodic domains use minimum-image distances and require
    r_max <= edge/2; bounded snapshots restrict centers to the default
    measurement box and weight each shell by the fraction lying inside it
    (sampled over Fibonacci directions).
    """
    if bin_width <= 0.0:
        raise ValueError(f"bin width must be positive, got {bin_width}")
    positions = np.array([p.position for p in s.particles])
    periodic_edge = s.domain.edge if isinstance(s.domain, PeriodicCube) else None

    n_bins = max(1, int(np.ceil(r_max / bin_width)))
    edges = bin_width * np.arange(n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])

    if periodic_edge is not None:
        if r_max > periodic_edge / 2 + 1e-12:
            raise ValueError(
                f"r_max {r_max} exceeds half the periodic edge {periodic_edge / 2}"
            )
        pos = positions - periodic_edge * np.floor(positions / periodic_edge)
        n = len(pos)
        ii, jj = np.triu_indices(n, k=1)
        d = pos[jj] - pos[ii]
        d -= periodic_edge * np.round(d / periodic_edge)
        dist = np.linalg.norm(d, axis=1)
        counts, _ = np.histogram(dist, bins=edges)
        vol = periodic_edge**3
        shell = (4.0 / 3.0) * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
        expected = (n * (n - 1) / 2.0) * shell / vol
    else:
        lo, hi = default_region(s)
        inside = np.all((positions >= lo) & (positions <= hi), axis=1)
        pos = positions[inside]
        n = len(pos)
        if n < 2:
            raise EmptyRegion("fewer than two particles in the RDF measurement region")
        ii, jj = np.triu_indices(n, k=1)
        dist = np.linalg.norm(pos[jj] - pos[ii], axis=1)
        counts, _ = np.histogram(dist, bins=edges)
        vol = float(np.prod(hi - lo))
        dirs = _fibonacci_sphere(FIBONACCI_DIRECTIONS)
        # Shell fraction inside the box per center, one bin at a time to
        # bound memory.
        weights = np.empty((n, n_bins))
        for b in range(n_bins):
            pts = pos[:, None, :] + centers[b] * dirs[None, :, :]
            ok = np.all((pts >= lo) & (pts <= hi), axis=2)
            weights[:, b] = ok.mean(axis=1)
        shell = (4.0 / 3.0) * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
        density = (n - 1) / vol
        expected = 0.5 * density * shell[None, :] * weights  # per center
        expected = expected.sum(axis=0)

    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(expected > 0, counts / np.where(expected > 0, expected, 1.0), 0.0)

    sparse = bool(expected[-1] < 5.0)
    if sparse:
        warnings.warn(
            f"expected pairs per bin at r_max is {expected[-1]:.2f} < 5; "
            "the RDF tail is statistically noisy",
            BinTooFine,
        )
    return RdfCurve(bin_centers=centers, g=g, bin_width=bin_width, sparse_bins=sparse)


# ---------------------------------------------------------------------------
# Fabric tensor and force chains
# ---------------------------------------------------------------------------

def fabric_tensor(s: PackingSnapshot, contact_tolerance: float | None = None) -> np.ndarray:
    """Mean outer product of unit contact normals (unit trace)."""
    _, _, normals = contact_network(s, contact_tolerance)
    if len(normals) == 0:
        raise NoContacts("snapshot has no contacts to build a fabric tensor from")
    return np.einsum("mi,mj->ij", normals, normals) / len(normals)


def force_chains(
    s: PackingSnapshot, force_factor: float = 1.0, angle_limit_deg: float = 45.0
) -> ForceChainGraph:
    """Quasi-linear paths of above-average normal forces (DEM only).

    Strong contacts carry normal force >= force_factor * mean; chains grow
    greedily from the strongest unassigned contact, extending while the
    branch direction turns by less than the angle limit.
    """
    if not s.has_forces:
        raise RequiresForces("force chains need a snapshot with contact forces (DEM)")
    id_to_index = {p.id: k for k, p in enumerate(s.particles)}
    positions = np.array([p.position for p in s.particles])

    rows = [c for c in s.contacts if c.id_j >= 0 and c.force is not None]
    if not rows:
        return ForceChainGraph(nodes=[], edges=[], chains=[], chain_mean_forces=[])
    normals = []
    fn = []
    for c in rows:
        d = np.linalg.norm(c.delta)
        nrm = c.delta / d if d > 0 else np.array([1.0, 0.0, 0.0])
        normals.append(nrm)
        fn.append(abs(float(np.dot(c.force, nrm))))
    fn = np.array(fn)
    strong = fn >= force_factor * fn.mean()

    edges = [
        (id_to_index[rows[k].id_i], id_to_index[rows[k].id_j], float(fn[k]))
        for k in np.nonzero(strong)[0]
    ]
    adjacency: dict[int, list[tuple[int, int]]] = {}
    for e_idx, (a, b, f) in enumerate(edges):
        adjacency.setdefault(a, []).append((b, e_idx))
        adjacency.setdefault(b, []).append((a, e_idx))

    cos_limit = float(np.cos(np.radians(angle_limit_deg)))
    order = sorted(range(len(edges)), key=lambda k: -edges[k][2])
    used = np.zeros(len(edges), dtype=bool)
    chains = []
    chain_forces = []

    def extend(chain, forces):
        grew = True
        while grew:
            grew = False
            for end, prev in ((chain[-1], chain[-2]), (chain[0], chain[1])):
                v = positions[end] - positions[prev]
                v = v / np.linalg.norm(v)
                best = None
                for nbr, e_idx in adjacency.get(end, ()):  # strong edges only
                    if used[e_idx] or nbr in chain:
                        continue
                    w = positions[nbr] - positions[end]
                    w = w / np.linalg.norm(w)
                    if float(np.dot(v, w)) < cos_limit:
                        continue
                    if best is None or edges[e_idx][2] > edges[best[1]][2]:
                        best = (nbr, e_idx)
                if best is not None:
                    nbr, e_idx = best
                    used[e_idx] = True
                    forces.append(edges[e_idx][2])
                    if end == chain[-1]:
                        chain.append(nbr)
                    else:
                        chain.insert(0, nbr)
                    grew = True

    for k in order:
        if used[k]:
            continue
        a, b, f = edges[k]
        used[k] = True
        chain = [a, b]
        forces = [f]
        extend(chain, forces)
        if len(chain) >= 3:
            chains.append(chain)
            chain_forces.append(float(np.mean(forces)))

    nodes = sorted({n for e in edges for n in e[:2]})
    return ForceChainGraph(
        nodes=nodes, edges=edges, chains=chains, chain_mean_forces=chain_forces
    )


# ---------------------------------------------------------------------------
# Aggregate metrics and comparison
# ---------------------------------------------------------------------------

def compute_metrics(
    s: PackingSnapshot,
    rdf_bin_width: float = 0.2,
    rdf_r_max: float | None = None,
    contact_tolerance: float | None = None,
    force_factor: float = 1.0,
    angle_limit_deg: float = 45.0,
    fraction_samples: int = FRACTION_SAMPLES,
) -> PackingMetrics:
    """All applicable metrics for one snapshot (chains skip without forces)."""
    if rdf_r_max is None:
        if isinstance(s.domain, PeriodicCube):
            rdf_r_max = s.domain.edge / 2.0
        else:
            lo, hi = default_region(s)
            rdf_r_max = float(np.min(hi - lo)) / 2.0
    fraction = packing_fraction(s, samples=fraction_samples)
    mean_cn, hist = coordination_number(s, contact_tolerance)
    curve = rdf(s, rdf_bin_width, rdf_r_max)
    try:
        fabric = fabric_tensor(s, contact_tolerance)
    except NoContacts:
        fabric = np.full((3, 3), np.nan)
    chains = None
    if s.has_forces:
        chains = force_chains(s, force_factor, angle_limit_deg).summary
    return PackingMetrics(
        fraction=fraction,
        mean_cn=mean_cn,
        cn_hist=hist,
        rdf=curve,
        fabric=fabric,
        chains=chains,
        extra={"provenance": s.provenance, "rdf_r_max": rdf_r_max},
    )


def deviatoric(t: np.ndarray) -> np.ndarray:
    return t - np.trace(t) / 3.0 * np.eye(3)


def compare(a: PackingMetrics, b: PackingMetrics) -> dict:
    """Side-by-side comparison with scalar deltas.

    Chains appear only when both sides carry forces. Raises
    IncompatibleBinning when the RDF grids differ.
    """
    if (
        abs(a.rdf.bin_width - b.rdf.bin_width) > 1e-12
        or len(a.rdf.bin_centers) != len(b.rdf.bin_centers)
        or not np.allclose(a.rdf.bin_centers, b.rdf.bin_centers)
    ):
        raise IncompatibleBinning(
            f"RDF binning differs: width {a.rdf.bin_width} x {len(a.rdf.bin_centers)} bins "
            f"vs width {b.rdf.bin_width} x {len(b.rdf.bin_centers)} bins"
        )
    rdf_l2 = float(np.sqrt(np.sum((a.rdf.g - b.rdf.g) ** 2 * a.rdf.bin_width)))
    fabric_dev = float(np.linalg.norm(deviatoric(a.fabric) - deviatoric(b.fabric)))
    report = {
        "a": _metrics_json(a),
        "b": _metrics_json(b),
        "deltas": {
            "fraction": a.fraction - b.fraction,
            "mean_cn": a.mean_cn - b.mean_cn,
            "rdf_l2": rdf_l2,
            "fabric_deviatoric_norm": fabric_dev,
        },
    }
    if a.chains is not None and b.chains is not None:
        report["deltas"]["n_chains"] = a.chains["n_chains"] - b.chains["n_chains"]
    return report


def _metrics_json(m: PackingMetrics) -> dict:
    out = {
        "fraction": m.fraction,
        "mean_cn": m.mean_cn,
        "cn_hist": m.cn_hist,
        "fabric": m.fabric.tolist(),
        "rdf": {
            "bin_width": m.rdf.bin_width,
            "r": m.rdf.bin_centers.tolist(),
            "g": m.rdf.g.tolist(),
            "sparse_bins": m.rdf.sparse_bins,
        },
        "extra": m.extra,
    }
    if m.chains is not None:
        out["force_chains"] = m.chains
    else:
        out["force_chains_skipped"] = "force data absent"
    return out


def comparison_table(report: dict) -> str:
    """Human-readable side-by-side table for a comparison report."""
    a, b, d = report["a"], report["b"], report["deltas"]
    rows = [
        ("metric", a["extra"].get("provenance", "A"), b["extra"].get("provenance", "B"), "delta"),
        ("fraction", f"{a['fraction']:.4f}", f"{b['fraction']:.4f}", f"{d['fraction']:+.4f}"),
        ("mean CN", f"{a['mean_cn']:.3f}", f"{b['mean_cn']:.3f}", f"{d['mean_cn']:+.3f}"),
        ("RDF L2 distance", "", "", f"{d['rdf_l2']:.4f}"),
        ("fabric dev. diff", "", "", f"{d['fabric_deviatoric_norm']:.5f}"),
    ]
    if "n_chains" in d:
        rows.append(
            (
                "force chains",
                str(a["force_chains"]["n_chains"]),
                str(b["force_chains"]["n_chains"]),
                f"{d['n_chains']:+d}",
            )
        )
    elif "force_chains" in a or "force_chains" in b:
        va = a.get("force_chains", {}).get("n_chains", "-")
        vb = b.get("force_chains", {}).get("n_chains", "-")
        rows.append(("force chains", str(va), str(vb), "n/a"))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    lines = []
    for r in rows:
        lines.append("  ".join(str(r[k]).ljust(widths[k]) for k in range(4)))
    return "\n".join(lines)
