"""Granular packing toolkit.

Generates random packings of spheres, ellipsoids, and poly-ellipsoids by
two independent methods (Monte Carlo overlap relaxation and DEM
gravitational deposition) and compares the resulting packings via
packing fraction, coordination number, radial distribution function,
fabric tensor, and force-chain statistics.
"""

__version__ = "0.1.0"

from .shapes import Ellipsoid, Particle, PolyEllipsoid, Sphere, inertia, make_particle, volume
from .sizes import AssemblySpec, ShapeFamily, SizeDistribution, build_assembly
from .snapshot import PackingSnapshot, read_snapshot, write_snapshot

__all__ = [
    "AssemblySpec",
    "Ellipsoid",
    "PackingSnapshot",
    "Particle",
    "PolyEllipsoid",
    "ShapeFamily",
    "SizeDistribution",
    "Sphere",
    "build_assembly",
    "inertia",
    "make_particle",
    "read_snapshot",
    "volume",
    "write_snapshot",
]
