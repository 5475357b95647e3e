"""Command-line interface: ``eitshape <command> [options]``.

Every command writes plain-text artifacts to the output directory:
``grid_*.csv`` (x, y, value), ``contour_*.csv`` (polyline id, x, y),
``history.csv`` (iter, J, dt, sigma1), NtD matrix files, a ``shapes.txt``
initial guess that ``levelset --init`` accepts, and ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grid_fem import build_crossed_grid
from .kv_levelset import Circle, Ellipse, LevelSetField, init_signed_distance, levelset_reconstruct
from .ntd import NtdMatrix
from .pipeline import (
    PHANTOMS,
    ExperimentConfig,
    InitialGuess,
    MonotonicityData,
    PipelineError,
    _Stage,
    extract_initial_guess,
    get_phantom,
    monotonicity_data,
    parse_config,
    phantom_measurements,
    run_regularization,
    run_scan,
    simultaneous_reconstruct,
    symmetric_difference,
)

FMT = "%.17g"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# writers


def write_grid(path: Path, x, y, values) -> None:
    data = np.column_stack([np.ravel(x), np.ravel(y), np.ravel(values).astype(float)])
    np.savetxt(path, data, fmt=FMT, delimiter=",", header="x,y,value", comments="")


def write_contours(path: Path, field: LevelSetField) -> None:
    rows = [np.column_stack([np.full(len(seg), i), seg]) for i, seg in enumerate(field.contours())]
    data = np.vstack(rows) if rows else np.zeros((0, 3))
    np.savetxt(path, data, fmt=["%d", FMT, FMT], delimiter=",", header="polyline,x,y", comments="")


def write_history(path: Path, history) -> None:
    data = np.array([[r.iteration, r.J, r.dt, np.nan if r.sigma1 is None else r.sigma1] for r in history])
    np.savetxt(path, data, fmt=["%d", FMT, FMT, FMT], delimiter=",", header="iter,J,dt,sigma1", comments="")


def format_shapes(shapes) -> str:
    lines = ["# kind cx cy a b angle (circle: a = b = radius, angle = 0)"]
    for s in shapes:
        if isinstance(s, Circle):
            lines.append(f"circle {s.cx!r} {s.cy!r} {s.r!r} {s.r!r} 0.0")
        else:
            lines.append(f"ellipse {s.cx!r} {s.cy!r} {s.a!r} {s.b!r} {s.angle!r}")
    return "\n".join(lines) + "\n"


def parse_shapes(text: str) -> list:
    shapes = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *vals = line.split()
        cx, cy, a, b, angle = map(float, vals)
        if kind == "circle":
            shapes.append(Circle(cx, cy, a))
        elif kind == "ellipse":
            shapes.append(Ellipse(cx, cy, a, b, angle))
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
    return shapes


def _plain(v):
    return float(v) if isinstance(v, np.floating) else v


def write_manifest(out: Path, command: str, config: ExperimentConfig, extra: dict) -> None:
    import contourpy
    import scipy

    lines = [f"command = {command}", f"eitshape = {__version__}", f"python = {platform.python_version()}",
             f"numpy = {np.__version__}", f"scipy = {scipy.__version__}", f"contourpy = {contourpy.__version__}",
             "", "[config]", config.as_text().rstrip(), "", "[results]"]
    for k, v in extra.items():
        lines.append(f"{k} = {_plain(v)!r}" if isinstance(v, (float, np.floating)) else f"{k} = {v}")
    lines.append("[files]")
    for p in sorted(out.iterdir()):
        if p.name != "manifest.txt":
            lines.append(p.name)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def _pixel_centers(per_side: int):
    c = (np.arange(per_side) + 0.5) / per_side
    return np.meshgrid(c, c)


def _data(config: ExperimentConfig, phantom, orthonormalize: bool, ntd_path: str | None) -> MonotonicityData:
    data = monotonicity_data(config, phantom, orthonormalize)
    if ntd_path:
        target = NtdMatrix.load(ntd_path)
        if target.m != config.m:
            raise ValueError(f"NtD file holds m={target.m}, config has m={config.m}")
        data.target = target
    return data


def cmd_scan(config: ExperimentConfig, args, out: Path) -> dict:
    phantom = get_phantom(config.phantom, config.sigma0, config.sigma1)
    with _Stage("scan-data"):
        data = _data(config, phantom, False, args.ntd)
    balls = run_scan(config, phantom, data)
    data.target.save(out / "ntd_target.txt")
    write_grid(out / "grid_balls.csv", balls.centers[:, 0], balls.centers[:, 1], balls.marked)
    X, Y, count = balls.heat_map(50)
    write_grid(out / "grid_heat.csv", X, Y, count)
    return {"marked_balls": int(balls.marked.sum())}


def _write_partition(out: Path, config: ExperimentConfig, partition) -> None:
    X, Y = _pixel_centers(config.pixels)
    write_grid(out / "grid_coefficients.csv", X, Y, partition.coefficients)
    write_grid(out / "grid_bounds.csv", X, Y, partition.bounds)
    write_grid(out / "grid_support.csv", X, Y, partition.support)


def _regularize(config: ExperimentConfig, args, out: Path, phantom):
    with _Stage("regularize-data"):
        data = _data(config, phantom, True, getattr(args, "ntd", None))
    data.target.save(out / "ntd_target.txt")
    partition = run_regularization(config, phantom, data)
    _write_partition(out, config, partition)
    with _Stage("initial-guess"):
        guess = extract_initial_guess(partition)
        if not guess.shapes:
            raise ValueError("initial guess is empty: no component survived the size filter")
    (out / "shapes.txt").write_text(format_shapes(guess.shapes))
    return partition, guess


def cmd_regularize(config: ExperimentConfig, args, out: Path) -> dict:
    phantom = get_phantom(config.phantom, config.sigma0, config.sigma1)
    partition, guess = _regularize(config, args, out, phantom)
    return {"support_pixels": int(partition.support.sum()), "qp_sweeps": partition.qp_sweeps,
            "initial_shapes": len(guess)}


def _levelset(config: ExperimentConfig, out: Path, phantom, shapes) -> dict:
    recon = build_crossed_grid(config.recon_n)
    with _Stage("initial-levelset"):
        phi0 = init_signed_distance(shapes, recon)
    write_contours(out / "contour_initial.csv", phi0)
    with _Stage("voltages"):
        meas = phantom_measurements(config, phantom, recon_mesh=recon)
    with _Stage("levelset"):
        res = levelset_reconstruct(phi0, meas, config.descent_config(), snapshots=False)
    _write_levelset(out, res.field, res.history)
    return {"iterations": res.iterations, "stop_reason": res.stop_reason, "final_J": res.history[-1].J,
            "symmetric_difference": symmetric_difference(res.field, phantom)}


def _write_levelset(out: Path, field: LevelSetField, history) -> None:
    write_contours(out / "contour_final.csv", field)
    write_history(out / "history.csv", history)
    x = field.mesh.grid_x
    X, Y = np.meshgrid(x, x)
    write_grid(out / "grid_levelset.csv", X, Y, field.phi)


def _read_shapes(path: str) -> list:
    with _Stage("read-shapes"):
        shapes = parse_shapes(Path(path).read_text())
        if not shapes:
            raise ValueError(f"{path} holds no shapes")
        return shapes


def cmd_levelset(config: ExperimentConfig, args, out: Path) -> dict:
    phantom = get_phantom(config.phantom, config.sigma0, config.sigma1)
    shapes = _read_shapes(args.init) if args.init else [Circle(0.5, 0.5, 0.25)]
    (out / "shapes.txt").write_text(format_shapes(shapes))
    return _levelset(config, out, phantom, shapes)


def cmd_combined(config: ExperimentConfig, args, out: Path) -> dict:
    phantom = get_phantom(config.phantom, config.sigma0, config.sigma1)
    partition, guess = _regularize(config, args, out, phantom)
    result = _levelset(config, out, phantom, guess.shapes)
    result["initial_shapes"] = len(guess)
    return result


def cmd_simultaneous(config: ExperimentConfig, args, out: Path) -> dict:
    phantom = get_phantom(config.phantom, config.sigma0, config.sigma1)
    if args.init:
        shapes = _read_shapes(args.init)
        (out / "shapes.txt").write_text(format_shapes(shapes))
    else:
        shapes = _regularize(config, args, out, phantom)[1].shapes
    recon = build_crossed_grid(config.recon_n)
    with _Stage("initial-levelset"):
        phi0 = init_signed_distance(shapes, recon)
    write_contours(out / "contour_initial.csv", phi0)
    with _Stage("voltages"):
        meas = phantom_measurements(config, phantom, recon_mesh=recon)
    with _Stage("simultaneous"):
        res = simultaneous_reconstruct(config, phantom, phi0, meas)
    _write_levelset(out, res.field, res.history)
    return {"sigma1": res.sigma1, "iterations": res.history[-1].iteration, "stop_reason": res.stop_reason,
            "symmetric_difference": symmetric_difference(res.field, phantom)}


COMMANDS = {"scan": cmd_scan, "regularize": cmd_regularize, "levelset": cmd_levelset,
            "combined": cmd_combined, "simultaneous": cmd_simultaneous}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eitshape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eitshape {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--phantom", choices=sorted(PHANTOMS))
    common.add_argument("--delta", type=float, help="relative operator noise")
    common.add_argument("--eta", type=float, help="relative voltage noise")
    common.add_argument("--seed", type=int, help="RNG seed (required for noisy runs)")
    common.add_argument("--output", "-o", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")

    p = sub.add_parser("scan", parents=[common], help="linearized monotonicity test on a ball grid")
    p.add_argument("--ntd", help="read the data matrix from an NtD file instead of simulating it")
    p = sub.add_parser("regularize", parents=[common], help="monotonicity-based regularization")
    p.add_argument("--bounds", choices=["monotone", "simplified"])
    p.add_argument("--ntd", help="read the data matrix from an NtD file instead of simulating it")
    p = sub.add_parser("levelset", parents=[common], help="level-set refinement from a shapes file")
    p.add_argument("--init", help="shapes file (as written by regularize)")
    p = sub.add_parser("combined", parents=[common], help="regularization followed by level-set refinement")
    p.add_argument("--bounds", choices=["monotone", "simplified"])
    p = sub.add_parser("simultaneous", parents=[common], help="joint shape and sigma1 recovery")
    p.add_argument("--bounds", choices=["monotone", "simplified"])
    p.add_argument("--init", help="shapes file; default: run the regularization first")

    ph = sub.add_parser("phantom", help="phantom gallery")
    ph.add_argument("action", choices=["list"])
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(parse_config(Path(args.config).read_text()))
    for item in args.set:
        values.update(parse_config(item))
    for key in ("phantom", "delta", "eta", "seed", "output", "bounds"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return ExperimentConfig(**values)


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.command == "phantom":
        for name, ph in PHANTOMS.items():
            print(f"{name}: {ph.description}")
        return 0
    try:
        config = resolve_config(args)
    except (ValueError, TypeError, OSError) as exc:
        parser.error(str(exc))
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        extra = COMMANDS[args.command](config, args, out)
    except PipelineError as exc:
        print(f"eitshape {args.command}: {exc}", file=sys.stderr)
        return 1
    write_manifest(out, args.command, config, extra)
    for k, v in extra.items():
        print(f"{k} = {_plain(v)}")
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
