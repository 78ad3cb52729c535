"""Command-line interface.

Exit codes: 0 success, 2 argument error, 3 data error, 4 solver error.
Every subcommand writes a ``manifest.ini`` into its output directory; passing
it back with ``--config`` reproduces the outputs bit for bit.
"""

import argparse
import configparser
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .deform import format_parts, lbrp_project, load_parts
from .errors import ArgumentError, DataError, MorphError
from .mesh import per_vertex_nearest_distance, read_obj, write_obj
from .pipeline import (
    ADAPTATIONS,
    PipelineConfig,
    adapt_template,
    config_to_ini,
    cumulative_curve,
    evaluate_against_ground_truth,
    load_config,
    resolve_config,
    run_batch,
    run_registration,
)
from .rigid import format_scan_landmarks, format_template_landmarks, load_landmarks, procrustes
from .synthetic import SyntheticSpec, make_synthetic_case

log = logging.getLogger("adaptmorph")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ArgumentError.exit_code, f"{self.prog}: error: {message}\n")


def _common(p, paths=(), adaptation=False):
    for name in paths:
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), metavar="PATH")
    if adaptation:
        p.add_argument("--adaptation", choices=ADAPTATIONS)
        p.add_argument("--lambda", dest="lam", type=float, metavar="LAMBDA",
                       help="Laplacian stiffness (default 0.1)")
    p.add_argument("--config", metavar="INI", help="config or manifest file; flags override it")
    p.add_argument("--out", metavar="DIR", help="output directory")


def build_parser():
    parser = _Parser(prog="adaptmorph", description="Adaptive-template ICPD mesh registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="full pipeline on one scan")
    _common(p, ("template", "scan", "template-landmarks", "scan-landmarks", "parts", "truth"), adaptation=True)

    p = sub.add_parser("adapt", help="adapt the template to scan landmarks only")
    _common(p, ("template", "template-landmarks", "scan-landmarks", "parts"), adaptation=True)

    p = sub.add_parser("project", help="Laplacian-regularised projection of a deformed template onto a scan")
    _common(p, ("deformed", "scan"))
    p.add_argument("--lambda", dest="lam", type=float, metavar="LAMBDA")

    p = sub.add_parser("synth", help="write seeded synthetic cases")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, help="number of cases (seeds seed..seed+count-1)")
    p.add_argument("--part-shift", type=float, help="fraction of bbox diagonal (default 0.03)")
    p.add_argument("--warp", type=float, help="fraction of bbox diagonal (default 0.05)")
    p.add_argument("--warp-length", type=float, help="fraction of bbox diagonal (default 0.8)")
    p.add_argument("--noise", type=float, help="fraction of bbox diagonal (default 0.002)")
    p.add_argument("--occlusion", type=float, help="fraction of scan vertices cropped (default 0)")
    p.add_argument("--rotation", type=float, help="degrees (default 0)")
    p.add_argument("--base", choices=("head", "sphere"))
    p.add_argument("--subdivisions", type=int)
    p.add_argument("--config", metavar="INI")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("evaluate", help="metrics of a registered mesh against ground truth and/or a scan")
    _common(p, ("registered", "truth", "scan", "template-landmarks", "scan-landmarks"))

    p = sub.add_parser("batch", help="register every scan in a directory")
    _common(p, ("template", "template-landmarks", "parts"), adaptation=True)
    p.add_argument("--in", dest="in_dir", metavar="DIR", help="NAME.obj + NAME_landmarks.txt [+ NAME_truth.obj]")
    p.add_argument("--jobs", type=int, help="worker processes (default: one per scan, capped at CPU count)")
    return parser


def _abs(path):
    return None if path is None else str(Path(path).resolve())


def _config(args, path_names):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    for name in path_names:
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    if getattr(args, "adaptation", None) is not None:
        updates["adaptation"] = args.adaptation
    if getattr(args, "lam", None) is not None:
        updates["lam"] = args.lam
    cfg = replace(cfg, **updates)
    # absolute paths keep the manifest valid from any working directory
    return replace(cfg, **{k: _abs(getattr(cfg, k)) for k in (*path_names, "out")})


def _out_dir(cfg):
    if cfg.out is None:
        raise ArgumentError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_register(args):
    cfg = _config(args, ("template", "scan", "template_landmarks", "scan_landmarks", "parts", "truth"))
    _, report = run_registration(cfg)
    print(f"mean nearest-point distance {report.mean_nn_distance:.6g}, "
          f"mean landmark error {report.mean_landmark_error:.6g}, "
          f"ICPD inner iterations {report.icpd_inner_iterations}")
    for stage, seconds in report.timings.items():
        log.info("%s: %.3f s", stage, seconds)
    return 0


def cmd_adapt(args):
    cfg = _config(args, ("template", "template_landmarks", "scan_landmarks", "parts"))
    cfg.check_paths(("template", "template_landmarks", "scan_landmarks", "out"))
    if cfg.adaptation == "none":
        raise ArgumentError("adapt needs --adaptation lb or gp")
    out = _out_dir(cfg)
    template = read_obj(cfg.template)
    lm = load_landmarks(cfg.template_landmarks, cfg.scan_landmarks)
    parts = load_parts(cfg.parts) if cfg.parts else None
    cfg = resolve_config(cfg, template)
    (out / "manifest.ini").write_text(config_to_ini(cfg))
    # landmarks are moved into the template frame first, as in the full pipeline
    lm.check(template)
    lm_al = lm.transformed(procrustes(lm.scan_points, lm.template_points(template)))
    adapted = adapt_template(template, lm_al, cfg.adaptation, parts, cfg.lam, cfg.gp_kernel)
    (out / "adapted_template.obj").write_bytes(write_obj(adapted))
    err = np.linalg.norm(adapted.vertices[lm_al.template_indices] - lm_al.scan_points, axis=1)
    print(f"mean landmark residual {err.mean():.6g}")
    return 0


def cmd_project(args):
    cfg = _config(args, ("deformed", "scan"))
    cfg.check_paths(("deformed", "scan", "out"))
    out = _out_dir(cfg)
    (out / "manifest.ini").write_text(config_to_ini(cfg))
    deformed = read_obj(cfg.deformed)
    scan = read_obj(cfg.scan)
    proj, pairs = lbrp_project(deformed, scan, cfg.projection_lambda, return_pairs=True)
    d, mean = per_vertex_nearest_distance(proj, scan)
    (out / "projected.obj").write_bytes(write_obj(proj))
    (out / "projected_error.obj").write_bytes(write_obj(proj, d))
    print(f"{len(pairs)} mutual-NN constraints, mean nearest-point distance {mean:.6g}")
    return 0


_SYNTH_DEFAULTS = dict(
    seed=0, count=1, part_shift=0.03, warp=0.05, warp_length=0.8, noise=0.002,
    occlusion=0.0, rotation=0.0, base="head", subdivisions=3,
)
_SYNTH_KINDS = dict(seed=int, count=int, base=str, subdivisions=int)


def _synth_settings(args):
    settings = dict(_SYNTH_DEFAULTS)
    if args.config:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(Path(args.config).read_text())
        except (OSError, configparser.Error) as exc:
            raise ArgumentError(f"cannot read config {args.config}: {exc}") from None
        if parser.has_section("synth"):
            for key, text in parser.items("synth"):
                if key not in settings:
                    raise ArgumentError(f"unknown config key [synth] {key}")
                try:
                    settings[key] = _SYNTH_KINDS.get(key, float)(text.strip())
                except ValueError:
                    raise ArgumentError(f"config key {key!r}: cannot parse {text!r}") from None
        if args.out is None and parser.has_option("paths", "out"):
            args.out = parser.get("paths", "out")
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["count"] < 1:
        raise ArgumentError("--count must be >= 1")
    return settings


def cmd_synth(args):
    s = _synth_settings(args)
    if args.out is None:
        raise ArgumentError("--out is required")
    out = Path(args.out).resolve()
    scans = out / "scans"
    scans.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        part_shift=s["part_shift"], warp=s["warp"], warp_length=s["warp_length"], noise=s["noise"],
        occlusion=s["occlusion"], rotation_deg=s["rotation"],
    )
    for k in range(s["count"]):
        seed = s["seed"] + k
        case = make_synthetic_case(seed, spec, base=s["base"], subdivisions=s["subdivisions"])
        if k == 0:
            (out / "template.obj").write_bytes(write_obj(case.template))
            (out / "template_landmarks.txt").write_text(format_template_landmarks(case.landmarks.template_indices))
            (out / "parts.txt").write_text(format_parts(case.parts))
        name = f"case_{seed:04d}"
        (scans / f"{name}.obj").write_bytes(write_obj(case.scan))
        (scans / f"{name}_landmarks.txt").write_text(
            format_scan_landmarks(case.landmarks.scan_points, case.landmarks.part_labels)
        )
        (scans / f"{name}_truth.obj").write_bytes(write_obj(case.template.with_vertices(case.truth)))
    first = f"case_{s['seed']:04d}"
    cfg = PipelineConfig(
        template=str(out / "template.obj"),
        template_landmarks=str(out / "template_landmarks.txt"),
        parts=str(out / "parts.txt"),
        scan=str(scans / f"{first}.obj"),
        scan_landmarks=str(scans / f"{first}_landmarks.txt"),
        truth=str(scans / f"{first}_truth.obj"),
        out=str(out),
    )
    (out / "manifest.ini").write_text(config_to_ini(cfg, extra={"synth": s}))
    print(f"wrote {s['count']} case(s) to {out}")
    return 0


def cmd_evaluate(args):
    cfg = _config(args, ("registered", "truth", "scan", "template_landmarks", "scan_landmarks"))
    cfg.check_paths(("registered", "out"))
    if cfg.truth is None and cfg.scan is None:
        raise ArgumentError("evaluate needs --truth and/or --scan")
    out = _out_dir(cfg)
    (out / "manifest.ini").write_text(config_to_ini(cfg))
    reg = read_obj(cfg.registered)
    cols, rows = [], []
    summary = []
    if cfg.truth is not None:
        truth = read_obj(cfg.truth)
        err, curve = evaluate_against_ground_truth(reg, truth)
        cols.append(("truth_error", err))
        summary.append(("mean_truth_error", float(err.mean())))
        summary += [(f"truth_fraction_le_{t:g}", float(f)) for t, f in zip((0.5, 1, 2, 3, 5), curve)]
    if cfg.scan is not None:
        scan = read_obj(cfg.scan)
        d, mean = per_vertex_nearest_distance(reg, scan)
        cols.append(("nn_distance", d))
        summary.append(("mean_nn_distance", mean))
        summary += [(f"nn_fraction_le_{t:g}", float(f)) for t, f in zip((0.5, 1, 2, 3, 5), cumulative_curve(d))]
        summary.append(("scan_bbox_diagonal", scan.bbox_diagonal()))
    if cfg.template_landmarks is not None and cfg.scan_landmarks is not None:
        lm = load_landmarks(cfg.template_landmarks, cfg.scan_landmarks)
        lm.check(reg)
        e = np.linalg.norm(reg.vertices[lm.template_indices] - lm.scan_points, axis=1)
        summary.append(("mean_landmark_error", float(e.mean())))
    lines = ["metric,value"] + [f"{k},{v!r}" for k, v in summary]
    (out / "evaluation.csv").write_text("\n".join(lines) + "\n")
    header = ",".join(["vertex"] + [c for c, _ in cols])
    body = [",".join([str(i)] + [repr(float(v[i])) for _, v in cols]) for i in range(reg.n_vertices)]
    (out / "per_vertex.csv").write_text("\n".join([header] + body) + "\n")
    for k, v in summary:
        print(f"{k} {v:.6g}")
    return 0


def cmd_batch(args):
    cfg = _config(args, ("template", "template_landmarks", "parts"))
    cfg.check_paths(("template", "template_landmarks", "out"))
    if args.in_dir is None and args.config:
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(Path(args.config).read_text())
        if parser.has_option("batch", "in"):
            args.in_dir = parser.get("batch", "in")
    if args.in_dir is None:
        raise ArgumentError("--in is required")
    in_dir = _abs(args.in_dir)
    out = _out_dir(cfg)
    template = read_obj(cfg.template)
    cfg = resolve_config(replace(cfg, scan=None, scan_landmarks=None, truth=None), template)
    (out / "manifest.ini").write_text(config_to_ini(cfg, extra={"batch": {"in": in_dir}}))
    rows = run_batch(cfg, in_dir, out, jobs=args.jobs)
    failed = [r for r in rows if r[1] != "ok"]
    print(f"{len(rows) - len(failed)} of {len(rows)} scans registered")
    if failed:
        for name, _, message, _ in failed:
            print(f"{name}: {message}", file=sys.stderr)
        return int(failed[0][3].get("exit_code", DataError.exit_code))
    return 0


COMMANDS = dict(
    register=cmd_register, adapt=cmd_adapt, project=cmd_project,
    synth=cmd_synth, evaluate=cmd_evaluate, batch=cmd_batch,
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except MorphError as exc:
        print(f"adaptmorph {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
