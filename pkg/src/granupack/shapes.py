"""Particle shapes, mass properties, and surface geometry.

Three shape kinds are supported: spheres, triaxial ellipsoids, and
poly-ellipsoids. A poly-ellipsoid is the convex union of eight ellipsoid
octants sharing a junction point; octant (sx, sy, sz) uses the signed
semi-lengths (a_sx, b_sy, c_sz), so adjacent octants share the two
semi-lengths of their common coordinate plane and the surface is C1
across the octant planes.

All shapes share a uniform six-semi-length description
(a+, a-, b+, b-, c+, c-); spheres and ellipsoids simply repeat their
semi-axes. Shape-local coordinates place the origin at the *centroid* of
the body. For asymmetric poly-ellipsoids the octant junction sits at
-centroid_offset in local coordinates, with
centroid_offset = 3/8 * (a+ - a-, b+ - b-, c+ - c-).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .vecmath import IDENTITY_QUAT, quat_normalize

# Octant sign triples, index = 4*(sx<0) + 2*(sy<0) + (sz<0).
OCTANT_SIGNS = np.array(
    [
        [+1, +1, +1],
        [+1, +1, -1],
        [+1, -1, +1],
        [+1, -1, -1],
        [-1, +1, +1],
        [-1, +1, -1],
        [-1, -1, +1],
        [-1, -1, -1],
    ],
    dtype=float,
)


@dataclass(frozen=True)
class Sphere:
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    @property
    def semis6(self) -> np.ndarray:
        r = self.radius
        return np.array([r, r, r, r, r, r])


@dataclass(frozen=True)
class Ellipsoid:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a >= self.b >= self.c > 0.0):
            raise ValueError(
                f"ellipsoid semi-axes must satisfy a >= b >= c > 0, got "
                f"({self.a}, {self.b}, {self.c})"
            )

    @property
    def semis6(self) -> np.ndarray:
        return np.array([self.a, self.a, self.b, self.b, self.c, self.c])


@dataclass(frozen=True)
class PolyEllipsoid:
    """Eight-octant composite; semi-lengths (a+, a-, b+, b-, c+, c-)."""

    a_pos: float
    a_neg: float
    b_pos: float
    b_neg: float
    c_pos: float
    c_neg: float

    def __post_init__(self):
        vals = (self.a_pos, self.a_neg, self.b_pos, self.b_neg, self.c_pos, self.c_neg)
        if not all(v > 0.0 for v in vals):
            raise ValueError(f"poly-ellipsoid semi-lengths must be positive, got {vals}")

    @property
    def semis6(self) -> np.ndarray:
        return np.array(
            [self.a_pos, self.a_neg, self.b_pos, self.b_neg, self.c_pos, self.c_neg]
        )


ParticleShape = Union[Sphere, Ellipsoid, PolyEllipsoid]


def semis6(shape: ParticleShape) -> np.ndarray:
    return shape.semis6


def octant_semi_axes(s6: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Semi-axes of the octant ellipsoid(s) selected by sign triples.

    s6: (..., 6), signs: (..., 3) of +-1; returns (..., 3).
    """
    s6 = np.asarray(s6, dtype=float)
    pos = s6[..., 0::2]
    neg = s6[..., 1::2]
    return np.where(np.asarray(signs) > 0, pos, neg)


def centroid_offset(shape: ParticleShape) -> np.ndarray:
    """Centroid position relative to the octant junction, local frame."""
    s6 = shape.semis6
    return 0.375 * (s6[0::2] - s6[1::2])


def volume(shape: ParticleShape) -> float:
    """Exact volume; the poly-ellipsoid sum of octants collapses to a product."""
    s6 = shape.semis6
    return (np.pi / 6.0) * (s6[0] + s6[1]) * (s6[2] + s6[3]) * (s6[4] + s6[5])


def equivalent_radius(shape: ParticleShape) -> float:
    """Radius of the equal-volume sphere."""
    return float((3.0 * volume(shape) / (4.0 * np.pi)) ** (1.0 / 3.0))


def bounding_radius(shape: ParticleShape) -> float:
    """Circumscribing sphere radius about the centroid (upper bound)."""
    s6 = shape.semis6
    return float(np.max(s6) + np.linalg.norm(centroid_offset(shape)))


def inertia_tensor(shape: ParticleShape, density: float) -> np.ndarray:
    """3x3 inertia tensor about the centroid in the shape-local frame.

    Assembled from per-octant ellipsoid closed forms about the junction
    (including the octant products of inertia, which are nonzero when two
    or more semi-length pairs are asymmetric) followed by the reverse
    parallel-axis shift to the composite centroid.
    """
    s6 = np.asarray(shape.semis6, dtype=float)
    semis = octant_semi_axes(s6, OCTANT_SIGNS)  # (8, 3)
    a, b, c = semis[:, 0], semis[:, 1], semis[:, 2]
    m_oct = density * (np.pi / 6.0) * a * b * c
    ixx = np.sum(m_oct * (b**2 + c**2) / 5.0)
    iyy = np.sum(m_oct * (a**2 + c**2) / 5.0)
    izz = np.sum(m_oct * (a**2 + b**2) / 5.0)
    # Products about junction axes: integral of x*y over octant (A,B,C)
    # is sx*sy * rho * A^2 B^2 C / 15, cyclic for the other pairs.
    sx, sy, sz = OCTANT_SIGNS[:, 0], OCTANT_SIGNS[:, 1], OCTANT_SIGNS[:, 2]
    pxy = density / 15.0 * np.sum(sx * sy * a**2 * b**2 * c)
    pxz = density / 15.0 * np.sum(sx * sz * a**2 * b * c**2)
    pyz = density / 15.0 * np.sum(sy * sz * a * b**2 * c**2)
    tensor_junction = np.array(
        [
            [ixx, -pxy, -pxz],
            [-pxy, iyy, -pyz],
            [-pxz, -pyz, izz],
        ]
    )
    m = density * volume(shape)
    d = centroid_offset(shape)
    shift = m * (np.dot(d, d) * np.eye(3) - np.outer(d, d))
    return tensor_junction - shift


def inertia(shape: ParticleShape, density: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mass, three principal moments, and junction-to-centroid offset.

    For all shapes with at most one asymmetric semi-length pair (every
    built-in family) the local axes are principal and the moments are the
    tensor diagonal; otherwise the eigenvalues are returned, matched to the
    local axis each eigenvector is most aligned with.
    """
    if density <= 0.0:
        raise ValueError(f"density must be positive, got {density}")
    tensor = inertia_tensor(shape, density)
    mass = density * volume(shape)
    off_diag = np.max(np.abs(tensor - np.diag(np.diag(tensor))))
    if off_diag <= 1e-12 * np.trace(tensor):
        moments = np.diag(tensor).copy()
    else:
        vals, vecs = np.linalg.eigh(tensor)
        order = np.argmax(np.abs(vecs), axis=0)
        moments = np.empty(3)
        moments[order] = vals
    return float(mass), moments, centroid_offset(shape)


@dataclass
class Particle:
    """Shape plus pose and mass properties; the unit both packers share."""

    id: int
    shape: ParticleShape
    position: np.ndarray
    orientation: np.ndarray
    mass: float
    inertia: np.ndarray
    density: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=float))


def make_particle(
    pid: int,
    shape: ParticleShape,
    density: float,
    position=(0.0, 0.0, 0.0),
    orientation=IDENTITY_QUAT,
) -> Particle:
    mass, moments, _ = inertia(shape, density)
    return Particle(
        id=pid,
        shape=shape,
        position=np.asarray(position, dtype=float),
        orientation=np.asarray(orientation, dtype=float),
        mass=mass,
        inertia=moments,
        density=density,
    )


def implicit_value(shape: ParticleShape, points_local: np.ndarray) -> np.ndarray:
    """Composite implicit function at local (centroid-origin) points.

    Negative inside, zero on the surface, positive outside. Continuous
    across octant planes because adjacent octants share the semi-lengths
    of their common plane.
    """
    pts = np.atleast_2d(np.asarray(points_local, dtype=float))
    rel = pts + centroid_offset(shape)  # coordinates relative to the junction
    signs = np.where(rel >= 0.0, 1.0, -1.0)
    semis = octant_semi_axes(shape.semis6, signs)
    g = np.sum((rel / semis) ** 2, axis=-1) - 1.0
    return g if np.asarray(points_local).ndim > 1 else g[0]


def contains_local(shape: ParticleShape, points_local: np.ndarray) -> np.ndarray:
    return implicit_value(shape, points_local) <= 0.0


def support_point_local(shape: ParticleShape, direction_local: np.ndarray) -> np.ndarray:
    """Surface point maximizing the projection onto a local direction.

    Evaluates the full-ellipsoid support point of each octant about the
    junction and keeps candidates lying in their own octant; the composite
    support point always belongs to the patch whose full ellipsoid yields
    it, so at least one candidate validates.
    """
    d = np.asarray(direction_local, dtype=float)
    d = d / np.linalg.norm(d)
    s6 = shape.semis6
    junction = -centroid_offset(shape)
    best_point = None
    best_proj = -np.inf
    tol = 1e-9 * float(np.max(s6))
    for signs in OCTANT_SIGNS:
        semis = octant_semi_axes(s6, signs)
        w = semis**2 * d
        denom = np.sqrt(np.sum((semis * d) ** 2))
        if denom == 0.0:
            continue
        p = w / denom  # support of the full octant ellipsoid, junction frame
        if np.all(p * signs >= -tol):
            proj = float(np.dot(d, junction + p))
            if proj > best_proj:
                best_proj = proj
                best_point = junction + p
    assert best_point is not None
    return best_point


def surface_points_local(shape: ParticleShape, n: int) -> np.ndarray:
    """Deterministic quasi-uniform surface sampling (Fibonacci directions).

    Each unit direction u maps onto the surface of the owning octant
    ellipsoid via the scaled-sphere parameterization, which stays on the
    composite surface because u and the mapped point share an octant.
    """
    k = np.arange(n, dtype=float)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    z = 1.0 - 2.0 * (k + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    signs = np.where(u >= 0.0, 1.0, -1.0)
    semis = octant_semi_axes(shape.semis6, signs)
    return semis * u - centroid_offset(shape)
