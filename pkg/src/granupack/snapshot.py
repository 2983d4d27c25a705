"""Packing snapshots: the common output of both packers, plus binary I/O.

A snapshot file is little-endian binary: an 8-byte magic, a format version,
a length-prefixed JSON header (provenance, domain, counts, flags, config
hash), a particle record array, and an optional contact record array.
A plain-JSON sidecar summary is written next to the binary for inspection.
Writing then reading then writing again is byte-identical.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shapes import Ellipsoid, Particle, PolyEllipsoid, Sphere, make_particle

MAGIC = b"GPKSNAP1"
FORMAT_VERSION = 1

SHAPE_KIND_CODES = {"sphere": 0, "ellipsoid": 1, "poly_ellipsoid": 2}
SHAPE_KIND_NAMES = {v: k for k, v in SHAPE_KIND_CODES.items()}

PARTICLE_DTYPE = np.dtype(
    [
        ("id", "<i8"),
        ("kind", "<u1"),
        ("semis", "<f8", (6,)),
        ("position", "<f8", (3,)),
        ("orientation", "<f8", (4,)),  # scalar-first unit quaternion
        ("mass", "<f8"),
        ("density", "<f8"),
    ]
)

CONTACT_DTYPE = np.dtype(
    [
        ("id_i", "<i8"),
        ("id_j", "<i8"),
        ("point_i", "<f8", (3,)),
        ("point_j", "<f8", (3,)),
        ("delta", "<f8", (3,)),
        ("force", "<f8", (3,)),  # zeros when the snapshot carries no forces
    ]
)


@dataclass
class PeriodicCube:
    edge: float


@dataclass
class ContainerDomain:
    width_x: float
    width_y: float
    free_surface_z: float


@dataclass
class FreeCloud:
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class SnapshotContact:
    id_i: int
    id_j: int  # negative ids denote walls
    point_i: np.ndarray
    point_j: np.ndarray
    delta: np.ndarray
    force: np.ndarray | None = None


@dataclass
class PackingSnapshot:
    particles: list[Particle]
    domain: PeriodicCube | ContainerDomain | FreeCloud
    provenance: str  # "MC" or "DEM"
    contacts: list[SnapshotContact] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def has_forces(self) -> bool:
        return self.provenance == "DEM"


def shape_kind(shape) -> str:
    if isinstance(shape, Sphere):
        return "sphere"
    if isinstance(shape, Ellipsoid):
        return "ellipsoid"
    if isinstance(shape, PolyEllipsoid):
        return "poly_ellipsoid"
    raise TypeError(f"unknown shape {shape!r}")


def shape_from_record(kind_code: int, semis: np.ndarray):
    kind = SHAPE_KIND_NAMES[int(kind_code)]
    if kind == "sphere":
        return Sphere(float(semis[0]))
    if kind == "ellipsoid":
        return Ellipsoid(float(semis[0]), float(semis[2]), float(semis[4]))
    return PolyEllipsoid(*(float(s) for s in semis))


def _domain_to_json(domain) -> dict:
    if isinstance(domain, PeriodicCube):
        return {"type": "periodic_cube", "edge": domain.edge}
    if isinstance(domain, ContainerDomain):
        return {
            "type": "container",
            "width_x": domain.width_x,
            "width_y": domain.width_y,
            "free_surface_z": domain.free_surface_z,
        }
    if isinstance(domain, FreeCloud):
        return {
            "type": "free_cloud",
            "lo": list(map(float, domain.lo)),
            "hi": list(map(float, domain.hi)),
        }
    raise TypeError(f"unknown domain {domain!r}")


def _domain_from_json(d: dict):
    t = d["type"]
    if t == "periodic_cube":
        return PeriodicCube(edge=float(d["edge"]))
    if t == "container":
        return ContainerDomain(
            width_x=float(d["width_x"]),
            width_y=float(d["width_y"]),
            free_surface_z=float(d["free_surface_z"]),
        )
    if t == "free_cloud":
        return FreeCloud(lo=np.array(d["lo"], dtype=float), hi=np.array(d["hi"], dtype=float))
    raise ValueError(f"unknown domain type {t!r}")


def snapshot_to_bytes(s: PackingSnapshot) -> bytes:
    precs = np.zeros(len(s.particles), dtype=PARTICLE_DTYPE)
    for k, p in enumerate(s.particles):
        precs[k] = (
            p.id,
            SHAPE_KIND_CODES[shape_kind(p.shape)],
            np.asarray(p.shape.semis6, dtype=float),
            p.position,
            p.orientation,
            p.mass,
            p.density,
        )
    crecs = np.zeros(len(s.contacts), dtype=CONTACT_DTYPE)
    for k, c in enumerate(s.contacts):
        force = c.force if c.force is not None else np.zeros(3)
        crecs[k] = (c.id_i, c.id_j, c.point_i, c.point_j, c.delta, force)

    header = {
        "format_version": FORMAT_VERSION,
        "provenance": s.provenance,
        "domain": _domain_to_json(s.domain),
        "n_particles": len(s.particles),
        "n_contacts": len(s.contacts),
        "has_forces": s.has_forces,
        "meta": _json_safe(s.meta),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(header_bytes))
    out += header_bytes
    out += precs.tobytes()
    out += crecs.tobytes()
    return bytes(out)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def snapshot_from_bytes(data: bytes) -> PackingSnapshot:
    if data[:8] != MAGIC:
        raise ValueError("not a snapshot file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(
            f"snapshot format version {version} not supported (expected {FORMAT_VERSION})"
        )
    (hlen,) = struct.unpack_from("<I", data, 12)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    off = 16 + hlen
    n_p = header["n_particles"]
    n_c = header["n_contacts"]
    precs = np.frombuffer(data, dtype=PARTICLE_DTYPE, count=n_p, offset=off)
    off += n_p * PARTICLE_DTYPE.itemsize
    crecs = np.frombuffer(data, dtype=CONTACT_DTYPE, count=n_c, offset=off)

    particles = []
    for rec in precs:
        shape = shape_from_record(rec["kind"], rec["semis"])
        p = make_particle(
            int(rec["id"]), shape, float(rec["density"]),
            position=np.array(rec["position"]),
            orientation=np.array(rec["orientation"]),
        )
        particles.append(p)
    has_forces = header["has_forces"]
    contacts = [
        SnapshotContact(
            id_i=int(rec["id_i"]),
            id_j=int(rec["id_j"]),
            point_i=np.array(rec["point_i"]),
            point_j=np.array(rec["point_j"]),
            delta=np.array(rec["delta"]),
            force=np.array(rec["force"]) if has_forces else None,
        )
        for rec in crecs
    ]
    return PackingSnapshot(
        particles=particles,
        domain=_domain_from_json(header["domain"]),
        provenance=header["provenance"],
        contacts=contacts,
        meta=header.get("meta", {}),
    )


def write_snapshot(s: PackingSnapshot, path) -> None:
    path = Path(path)
    data = snapshot_to_bytes(s)
    path.write_bytes(data)
    sidecar = {
        "file": path.name,
        "sha256": hashlib.sha256(data).hexdigest(),
        "provenance": s.provenance,
        "domain": _domain_to_json(s.domain),
        "n_particles": len(s.particles),
        "n_contacts": len(s.contacts),
        "has_forces": s.has_forces,
        "meta": _json_safe(s.meta),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def read_snapshot(path) -> PackingSnapshot:
    return snapshot_from_bytes(Path(path).read_bytes())


def snapshot_hash(s: PackingSnapshot) -> str:
    return hashlib.sha256(snapshot_to_bytes(s)).hexdigest()
