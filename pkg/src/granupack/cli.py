"""Batch CLI chaining assembly generation, both packers, and analysis.

Commands: assemble, pack-mc, pack-dem, analyze, compare, export. Every
failure exits nonzero with a single machine-parsable line
`ERROR <CODE>: message` on stderr. Output directories are guarded by a
lockfile against concurrent writers, and the effective (defaults-expanded)
config is written next to the outputs for provenance.
"""
from __future__ import annotations

import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import dem, mc, metrics, sizes
from .config import ConfigError, config_hash, load_config, write_effective_config
from .snapshot import (
    FreeCloud,
    PackingSnapshot,
    read_snapshot,
    snapshot_hash,
    write_snapshot,
)

EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_NOT_AT_REST = 4
EXIT_VERSION = 5
EXIT_BINNING = 6
EXIT_LOCKED = 7
EXIT_IO = 8

LOCK_NAME = ".granupack.lock"
THREADS_ENV = "GRANUPACK_THREADS"


def _fail(code: str, exit_code: int, message: str):
    click.echo(f"ERROR {code}: {message}", err=True)
    sys.exit(exit_code)


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            _fail("CONFIG", EXIT_CONFIG, f"{THREADS_ENV} must be an integer, got {env!r}")
    return 1


@contextmanager
def _locked_output(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        _fail(
            "LOCKED", EXIT_LOCKED,
            f"output directory {out_dir} is locked by another writer ({lock})",
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _load(config_path, seed):
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _fail("CONFIG", EXIT_CONFIG, str(exc))
    return cfg.resolved(seed_override=seed)


def _read_snapshot_checked(path):
    try:
        return read_snapshot(path)
    except FileNotFoundError:
        _fail("IO", EXIT_IO, f"snapshot file not found: {path}")
    except ValueError as exc:
        _fail("VERSION", EXIT_VERSION, str(exc))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(), help="run config YAML")(fn)
    fn = click.option("--out", "out_dir", default=None, type=click.Path(), help="output directory (default: config output_dir)")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the global seed")(fn)
    fn = click.option("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")(fn)
    return fn


@click.group()
def main():
    """Granular packing toolkit: generate, pack, analyze, compare."""


@main.command()
@_common_options
def assemble(config_path, out_dir, seed, threads):
    """Sample a particle assembly and write it with a size histogram."""
    cfg = _load(config_path, seed)
    _resolve_threads(threads)
    out = Path(out_dir or cfg.output_dir)
    with _locked_output(out):
        spec = cfg.assembly.build()
        assembly = sizes.build_assembly(spec)
        snap = PackingSnapshot(
            particles=assembly,
            domain=FreeCloud(lo=np.zeros(3), hi=np.zeros(3)),
            provenance="ASSEMBLY",
            meta={"config_hash": config_hash(cfg), "n": spec.n, "family": cfg.assembly.family.kind},
        )
        write_snapshot(snap, out / "assembly.gpk")
        table = sizes.histogram_report(
            assembly, spec.distribution, cfg.metrics.histogram_bins, spec.family
        )
        _write_csv(
            out / "size_histogram.csv",
            ("bin_center", "empirical", "analytic"),
            [tuple(row) for row in table],
        )
        write_effective_config(cfg, out)
        click.echo(f"assembly: {len(assembly)} particles -> {out / 'assembly.gpk'}")


@main.command("pack-mc")
@click.argument("assembly_file", type=click.Path())
@_common_options
@click.option("--allow-unconverged", is_flag=True, help="exit 0 even when tolerance is not reached")
def pack_mc(assembly_file, config_path, out_dir, seed, threads, allow_unconverged):
    """Relax an assembly with the Monte Carlo packer."""
    cfg = _load(config_path, seed)
    _resolve_threads(threads)
    assembly = _read_snapshot_checked(assembly_file).particles
    out = Path(out_dir or cfg.output_dir)
    with _locked_output(out):
        snap = mc.run(assembly, cfg.mc.build())
        snap.meta["config_hash"] = config_hash(cfg)
        write_snapshot(snap, out / "mc_snapshot.gpk")
        _write_csv(
            out / "mc_history.csv",
            ("iteration", "mean_rel_overlap", "max_rel_overlap", "n_contacts"),
            mc.history_rows(snap),
        )
        write_effective_config(cfg, out)
        click.echo(
            f"mc: converged={snap.meta['converged']} iterations={snap.meta['iterations']} "
            f"mean_overlap={snap.meta['mean_relative_overlap']:.3e} -> {out / 'mc_snapshot.gpk'}"
        )
        if not snap.meta["converged"] and not allow_unconverged:
            _fail(
                "NOT_CONVERGED", EXIT_NOT_CONVERGED,
                f"mean relative overlap {snap.meta['mean_relative_overlap']:.3e} above "
                f"tolerance {cfg.mc.tolerance} after {snap.meta['iterations']} iterations",
            )


@main.command("pack-dem")
@click.argument("assembly_file", type=click.Path())
@_common_options
@click.option("--allow-unconverged", is_flag=True, help="exit 0 even when rest is not reached")
def pack_dem(assembly_file, config_path, out_dir, seed, threads, allow_unconverged):
    """Deposit an assembly into the container under gravity."""
    cfg = _load(config_path, seed)
    _resolve_threads(threads)
    assembly = _read_snapshot_checked(assembly_file).particles
    out = Path(out_dir or cfg.output_dir)
    with _locked_output(out):
        try:
            snap = dem.run_deposition(assembly, cfg.dem.build(), cfg.dem.container.build())
        except dem.FillOverflow as exc:
            _fail("FILL_OVERFLOW", EXIT_CONFIG, str(exc))
        except dem.InstabilityDetected as exc:
            _fail("INSTABILITY", EXIT_CONFIG, str(exc))
        snap.meta["config_hash"] = config_hash(cfg)
        write_snapshot(snap, out / "dem_snapshot.gpk")
        _write_csv(
            out / "dem_trace.csv",
            ("step", "time", "kinetic_energy", "max_speed", "n_contacts"),
            dem.trace_rows(snap),
        )
        write_effective_config(cfg, out)
        click.echo(
            f"dem: at_rest={snap.meta['at_rest']} steps={snap.meta['steps']} "
            f"ke/mass={snap.meta['kinetic_energy_per_mass']:.3e} -> {out / 'dem_snapshot.gpk'}"
        )
        if not snap.meta["at_rest"] and not allow_unconverged:
            _fail(
                "NOT_AT_REST", EXIT_NOT_AT_REST,
                f"kinetic energy {snap.meta['kinetic_energy_per_mass']:.3e} J/kg above "
                f"threshold {cfg.dem.rest_ke_threshold} after {snap.meta['steps']} steps",
            )


def _metrics_for(snap, cfg):
    return metrics.compute_metrics(
        snap,
        rdf_bin_width=cfg.metrics.rdf_bin_width,
        rdf_r_max=cfg.metrics.rdf_r_max,
        contact_tolerance=cfg.metrics.contact_tolerance,
        force_factor=cfg.metrics.force_factor,
        angle_limit_deg=cfg.metrics.angle_limit_deg,
        fraction_samples=cfg.metrics.fraction_samples,
    )


@main.command()
@click.argument("snapshot_file", type=click.Path())
@_common_options
def analyze(snapshot_file, config_path, out_dir, seed, threads):
    """Compute all applicable metrics for a snapshot."""
    cfg = _load(config_path, seed)
    _resolve_threads(threads)
    snap = _read_snapshot_checked(snapshot_file)
    out = Path(out_dir or cfg.output_dir)
    stem = Path(snapshot_file).stem
    with _locked_output(out):
        try:
            m = _metrics_for(snap, cfg)
        except (metrics.EmptyRegion, ValueError) as exc:
            _fail("CONFIG", EXIT_CONFIG, str(exc))
        doc = metrics._metrics_json(m)
        doc["snapshot"] = {"file": str(snapshot_file), "sha256": snapshot_hash(snap)}
        (out / f"metrics_{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _write_csv(
            out / f"rdf_{stem}.csv", ("r", "g"),
            list(zip(m.rdf.bin_centers.tolist(), m.rdf.g.tolist())),
        )
        _write_csv(out / f"cn_hist_{stem}.csv", ("cn", "count"), m.cn_hist)
        write_effective_config(cfg, out)
        note = "" if m.chains is not None else " (force chains skipped: force data absent)"
        click.echo(
            f"analyze: fraction={m.fraction:.4f} mean_cn={m.mean_cn:.3f}{note} "
            f"-> {out / f'metrics_{stem}.json'}"
        )


@main.command()
@click.argument("snapshot_a", type=click.Path())
@click.argument("snapshot_b", type=click.Path())
@_common_options
@click.option("--config-b", "config_b_path", type=click.Path(), default=None,
              help="separate metrics config for snapshot B (defaults to --config)")
def compare(snapshot_a, snapshot_b, config_path, out_dir, seed, threads, config_b_path):
    """Compare two snapshots metric by metric."""
    cfg = _load(config_path, seed)
    cfg_b = _load(config_b_path, seed) if config_b_path else cfg
    _resolve_threads(threads)
    snap_a = _read_snapshot_checked(snapshot_a)
    snap_b = _read_snapshot_checked(snapshot_b)
    out = Path(out_dir or cfg.output_dir)
    with _locked_output(out):
        try:
            m_a = _metrics_for(snap_a, cfg)
            m_b = _metrics_for(snap_b, cfg_b)
            report = metrics.compare(m_a, m_b)
        except metrics.IncompatibleBinning as exc:
            _fail("BINNING", EXIT_BINNING, str(exc))
        except (metrics.EmptyRegion, ValueError) as exc:
            _fail("CONFIG", EXIT_CONFIG, str(exc))
        (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        table = metrics.comparison_table(report)
        (out / "comparison.txt").write_text(table + "\n")
        write_effective_config(cfg, out)
        click.echo(table)


@main.command()
@click.argument("snapshot_file", type=click.Path())
@_common_options
@click.option("--format", "fmt", type=click.Choice(["csv"]), default="csv")
def export(snapshot_file, config_path, out_dir, seed, threads, fmt):
    """Export per-particle pose records for external plotting."""
    cfg = _load(config_path, seed)
    _resolve_threads(threads)
    snap = _read_snapshot_checked(snapshot_file)
    out = Path(out_dir or cfg.output_dir)
    stem = Path(snapshot_file).stem
    with _locked_output(out):
        from .snapshot import shape_kind

        rows = []
        for p in snap.particles:
            s6 = p.shape.semis6
            rows.append(
                (p.id, shape_kind(p.shape), *s6, *p.position, *p.orientation, p.mass)
            )
        _write_csv(
            out / f"particles_{stem}.csv",
            ("id", "kind", "a_pos", "a_neg", "b_pos", "b_neg", "c_pos", "c_neg",
             "x", "y", "z", "qw", "qx", "qy", "qz", "mass"),
            rows,
        )
        click.echo(f"export: {len(rows)} particles -> {out / f'particles_{stem}.csv'}")


if __name__ == "__main__":
    main()
