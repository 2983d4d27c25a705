"""Run configuration: schema-validated YAML with explicit defaults.

Unknown keys are rejected. Loading expands every default and resolves
derived seeds, so the effective config written next to run outputs
round-trips to the same effective config. The config hash covers the
canonical JSON of the effective config.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import dem, mc, sizes


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FamilyConfig(_Strict):
    kind: str = "sphere"
    ratios: list[float] | None = None

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        if v not in sizes.FAMILY_RATIOS:
            raise ValueError(f"unknown shape family {v!r}; choose from {sorted(sizes.FAMILY_RATIOS)}")
        return v

    def build(self) -> sizes.ShapeFamily:
        ratios = tuple(self.ratios) if self.ratios is not None else None
        return sizes.ShapeFamily(self.kind, ratios)


class DistributionConfig(_Strict):
    r0: float = 1.0
    sigma: float = 0.25
    r_min: float = 0.2
    r_max: float = 2.5

    def build(self) -> sizes.SizeDistribution:
        return sizes.SizeDistribution(self.r0, self.sigma, self.r_min, self.r_max)


class AssemblyConfig(_Strict):
    n: int = 1000
    family: FamilyConfig = Field(default_factory=FamilyConfig)
    distribution: DistributionConfig = Field(default_factory=DistributionConfig)
    density: float = sizes.DEFAULT_DENSITY
    seed: int | None = None

    def build(self) -> sizes.AssemblySpec:
        return sizes.AssemblySpec(
            n=self.n,
            family=self.family.build(),
            distribution=self.distribution.build(),
            density=self.density,
            seed=self.seed if self.seed is not None else 0,
        )


class McSection(_Strict):
    phi0: float = 0.86
    tolerance: float = 1e-4
    max_iterations: int = 100_000
    rotation_scale: float = 1.0
    boundary: str = "free"
    average_moves: bool = False
    seed: int | None = None

    def build(self) -> mc.McConfig:
        return mc.McConfig(
            phi0=self.phi0,
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            rotation_scale=self.rotation_scale,
            boundary=self.boundary,
            average_moves=self.average_moves,
            seed=self.seed if self.seed is not None else 0,
        )


class MaterialConfig(_Strict):
    youngs_modulus: float = 1e8
    poisson_ratio: float = 0.3
    friction_coefficient: float = 0.5
    damping_ratio: float = 0.3

    def build(self) -> dem.Material:
        return dem.Material(
            youngs_modulus=self.youngs_modulus,
            poisson_ratio=self.poisson_ratio,
            friction_coefficient=self.friction_coefficient,
            damping_ratio=self.damping_ratio,
        )


class ContainerConfig(_Strict):
    width_x: float = 20.0
    width_y: float = 20.0

    def build(self) -> dem.Container:
        return dem.Container(self.width_x, self.width_y)


class DemSection(_Strict):
    material: MaterialConfig = Field(default_factory=MaterialConfig)
    container: ContainerConfig = Field(default_factory=ContainerConfig)
    gravity: list[float] = Field(default_factory=lambda: [0.0, 0.0, -9.81])
    dt: float | str = "auto"
    rest_ke_threshold: float = 1e-6
    rest_window: int = 1000
    max_steps: int = 200_000
    trace_every: int = 10
    seed: int | None = None

    @field_validator("dt")
    @classmethod
    def _dt_valid(cls, v):
        if isinstance(v, str) and v != "auto":
            raise ValueError("dt must be a positive number or 'auto'")
        if not isinstance(v, str) and v <= 0:
            raise ValueError("dt must be positive")
        return v

    def build(self) -> dem.DemConfig:
        return dem.DemConfig(
            material=self.material.build(),
            gravity=tuple(self.gravity),
            dt=self.dt,
            rest_ke_threshold=self.rest_ke_threshold,
            rest_window=self.rest_window,
            max_steps=self.max_steps,
            trace_every=self.trace_every,
            seed=self.seed if self.seed is not None else 0,
        )


class MetricsSection(_Strict):
    rdf_bin_width: float = 0.2
    rdf_r_max: float | None = None
    contact_tolerance: float | None = None
    force_factor: float = 1.0
    angle_limit_deg: float = 45.0
    fraction_samples: int = 100_000
    histogram_bins: int = 20


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "out"
    assembly: AssemblyConfig = Field(default_factory=AssemblyConfig)
    mc: McSection = Field(default_factory=McSection)
    dem: DemSection = Field(default_factory=DemSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    def resolved(self, seed_override: int | None = None) -> "RunConfig":
        """Effective config: defaults expanded, derived seeds made explicit.

        Section seeds default to global seed, +1 (MC), +2 (DEM) so the
        streams stay distinct but reproducible from one number.
        """
        cfg = self.model_copy(deep=True)
        if seed_override is not None:
            cfg.seed = seed_override
        if cfg.assembly.seed is None:
            cfg.assembly.seed = cfg.seed
        if cfg.mc.seed is None:
            cfg.mc.seed = cfg.seed + 1
        if cfg.dem.seed is None:
            cfg.dem.seed = cfg.seed + 2
        return cfg


class ConfigError(ValueError):
    pass


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigError("; ".join(lines))


def effective_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(effective_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_effective_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir) / "effective_config.yaml"
    out.write_text(yaml.safe_dump(effective_dict(cfg), sort_keys=True))
