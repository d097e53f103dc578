"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bone_model import RegionLabel, default_priors
from .evaluation import AccuracyReport, accuracy_report, point_to_mesh_distance, sample_surface, shell_accuracy
from .measurement_model import DEFAULT_THETA_AXIS, TABLE_FORMAT, ScannerConfig, TableAxis, build_table, read_table, write_table
from .mesh import make_template, read_mesh, write_mesh
from .phantom import PRESETS, preset, rasterize, read_ground_truth, simulate_scan, write_ground_truth
from .pipeline import read_config, run
from .volume import read_volume, write_volume

log = logging.getLogger("cortexfit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cortexfit", description="Cortex center surface fitting for calibrated CT volumes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("make-phantom", help="rasterize and scan a synthetic cylindrical phantom")
    ph.add_argument("--preset", choices=sorted(PRESETS), default="medium")
    for name in ("diameter", "height", "wall", "endplate", "cortical", "trabecular", "background"):
        ph.add_argument(f"--{name}", type=float, help=f"override the preset {name}")
    ph.add_argument("--supersampling", type=int, help="sub-voxel samples per axis (>= 2)")
    ph.add_argument("--fine-spacing", type=float, default=0.1, help="rasterization spacing, mm (default 0.1)")
    ph.add_argument("--spacing", type=float, nargs=3, default=(0.4, 0.4, 1.0), metavar=("SX", "SY", "SZ"),
                    help="output voxel spacing, mm (default 0.4 0.4 1.0)")
    ph.add_argument("--sigma", type=float, default=0.5, help="in-plane PSF sd, mm (default 0.5)")
    ph.add_argument("--slice-width", type=float, help="slice profile width, mm (default: z spacing)")
    ph.add_argument("--noise-sd", type=float, default=10.0, help="noise sd, mg/cc (default 10)")
    ph.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    ph.add_argument("--out", required=True, help="output volume header path")
    ph.add_argument("--truth", required=True, help="output ground-truth text path")

    tp = sub.add_parser("make-template", help="write a labeled capped-cylinder template mesh")
    tp.add_argument("--radius", type=float, default=17.5)
    tp.add_argument("--height", type=float, default=24.0)
    tp.add_argument("--subdivisions", type=int, default=96)
    tp.add_argument("--rim-margin", type=float, default=3.0)
    tp.add_argument("--center", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    tp.add_argument("--out", required=True, help="output OBJ path (labels go to a sibling .labels file)")

    bm = sub.add_parser("build-model", help="tabulate the measurement model")
    bm.add_argument("--config", required=True, help="config file (scanner and priors are read)")
    bm.add_argument("--out", required=True, help="output table path")
    bm.add_argument("--theta-count", type=int, default=DEFAULT_THETA_AXIS.count,
                    help=f"angle samples over [0, 90] degrees (default {DEFAULT_THETA_AXIS.count})")
    bm.add_argument("--threads", type=_threads, default=1)

    ft = sub.add_parser("fit", help="fit a template to a volume")
    ft.add_argument("--config", required=True)
    ft.add_argument("--volume", required=True)
    ft.add_argument("--template", required=True)
    ft.add_argument("--table", help="override the config's table path")
    ft.add_argument("--out", required=True, help="output fitted mesh path")
    ft.add_argument("--report", help="write the per-iteration report here")
    ft.add_argument("--threads", type=_threads, default=1)

    ev = sub.add_parser("evaluate", help="accuracy of a fitted mesh")
    ev.add_argument("--mesh", required=True)
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--truth", help="phantom ground-truth file")
    src.add_argument("--reference", help="reference mesh for signed surface distances")
    ev.add_argument("--samples", type=int, default=10000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="output table path (default: stdout)")

    info = sub.add_parser("info", help="describe a volume, mesh or table file")
    info.add_argument("path")
    return p


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_make_phantom(args):
    overrides = {
        k: getattr(args, k)
        for k in ("diameter", "height", "wall", "endplate", "cortical", "trabecular", "background", "supersampling")
        if getattr(args, k) is not None
    }
    spec = preset(args.preset, noise_sd=args.noise_sd, **overrides)
    scanner = ScannerConfig(args.slice_width if args.slice_width is not None else args.spacing[2], args.sigma)
    fine = rasterize(spec, args.fine_spacing)
    vol = simulate_scan(fine, scanner, args.spacing, args.noise_sd, args.seed)
    write_volume(vol, args.out)
    write_ground_truth(
        spec,
        args.truth,
        preset=args.preset,
        seed=args.seed,
        scanner_slice_width=scanner.slice_width,
        scanner_sigma=scanner.sigma,
    )
    log.info("wrote %s with dims %s", args.out, vol.dims)


def cmd_make_template(args):
    mesh = make_template(args.radius, args.height, args.subdivisions, args.rim_margin, tuple(args.center))
    write_mesh(mesh, args.out)


def cmd_build_model(args):
    cfg = read_config(args.config, require_table=False)
    priors = cfg.priors if cfg.priors is not None else default_priors()
    theta_axis = TableAxis(0.0, 90.0, args.theta_count)
    table = build_table(cfg.scanner, priors, theta_axis=theta_axis, n_jobs=args.threads)
    write_table(table, args.out)


def cmd_fit(args):
    cfg = read_config(args.config, require_table=args.table is None)
    cfg = replace(cfg, threads=args.threads)
    table_path = args.table or cfg.table
    table = read_table(table_path)
    volume = read_volume(args.volume)
    template = read_mesh(args.template)
    mesh, report, _ = run(volume, template, table, cfg)
    write_mesh(mesh, args.out)
    if args.report:
        Path(args.report).write_text(report.to_table())
    log.info("fit finished after %d iterations (converged=%s)", report.n_iterations, report.converged)


def cmd_evaluate(args):
    mesh = read_mesh(args.mesh)
    lines = ["quantity\t" + AccuracyReport.header()]
    if args.truth:
        truth = read_ground_truth(args.truth)
        for key in ("center_radius", "center_height"):
            if key not in truth:
                raise KeyError(f"{args.truth}: missing key {key!r}")
        res = shell_accuracy(mesh, truth["center_radius"], truth["center_height"], args.samples, args.seed)
        lines.append("radius\t" + res["radius"].as_row())
        lines.append("height\t" + res["height"].as_row())
    else:
        ref = read_mesh(args.reference)
        samples = sample_surface(mesh, args.samples, args.seed)
        d = point_to_mesh_distance(samples.points, ref, candidates=16)
        lines.append("distance\t" + accuracy_report(d).as_row())
    _write_text(args.out, "\n".join(lines) + "\n")


def _info_table(path):
    t = read_table(path)
    print(f"format: {TABLE_FORMAT}")
    print(f"scanner: slice_width={t.scanner.slice_width!r} sigma={t.scanner.sigma!r}")
    print("regions: " + " ".join(r.name for r in t.regions))
    print(f"axes: t={t.t_axis} theta={t.theta_axis} z={t.z_axis}")


def _info_mesh(path):
    m = read_mesh(path)
    lo, hi = m.vertices.min(axis=0), m.vertices.max(axis=0)
    print(f"vertices: {m.n_vertices}")
    print(f"triangles: {len(m.triangles)}")
    counts = np.bincount(m.labels, minlength=len(RegionLabel))
    print("labels: " + " ".join(f"{r.name}={counts[r.value]}" for r in RegionLabel))
    print("bounds: " + " ".join(f"{a!r}" for a in lo.tolist()) + " / " + " ".join(f"{b!r}" for b in hi.tolist()))


def cmd_info(args):
    path = Path(args.path)
    head = path.read_bytes()[:64]
    if head.startswith(b"format = " + TABLE_FORMAT.encode()):
        _info_table(path)
    elif path.suffix.lower() == ".obj":
        _info_mesh(path)
    else:
        v = read_volume(path)
        print("dims: " + " ".join(str(d) for d in v.dims))
        print("spacing: " + " ".join(repr(float(s)) for s in v.spacing))
        print("origin: " + " ".join(repr(float(o)) for o in v.origin))
        print(f"range: {float(np.min(v.data))!r} {float(np.max(v.data))!r}")


COMMANDS = {
    "make-phantom": cmd_make_phantom,
    "make-template": cmd_make_template,
    "build-model": cmd_build_model,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.filename}: {exc.strerror}"
        print(f"cortexfit {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
