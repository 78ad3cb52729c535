"""End-to-end registration: rigid alignment, template adaptation, ICPD, LBRP.

The in-memory entry point is :func:`register_meshes`; :func:`run_registration`
wraps it with file I/O driven by a :class:`PipelineConfig`. Every output
directory gets a ``manifest.ini`` holding the resolved configuration, which
can be passed back as ``--config`` to reproduce the run bit for bit.
"""

import configparser
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .deform import DEFAULT_LAMBDA, adapt_template_lb, load_parts, lbrp_project
from .errors import ArgumentError, DataError, MorphError, SolverError
from .gpmm import GpKernelConfig, adapt_template_gp
from .icpd import IcpdConfig, icpd_register, inner_log_csv, outer_log_csv
from .mesh import TriMesh, nearest_neighbors, read_obj, write_obj
from .rigid import LandmarkSpec, align_scan_to_template, load_landmarks

ADAPTATIONS = ("none", "lb", "gp")
CURVE_THRESHOLDS = (0.5, 1.0, 2.0, 3.0, 5.0)
STAGES = ("load", "align", "adapt", "icpd", "project", "evaluate")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that determines a registration run.

    ``lam`` is the Laplacian stiffness of the adaptation solve and
    ``projection_lam`` that of the final projection (``None``: same as
    ``lam``). ``gp_kernel=None`` sizes the default kernel from the template.
    """

    template: str = None
    scan: str = None
    template_landmarks: str = None
    scan_landmarks: str = None
    parts: str = None
    truth: str = None
    deformed: str = None
    registered: str = None
    out: str = None
    adaptation: str = "lb"
    lam: float = DEFAULT_LAMBDA
    projection_lam: float = None
    icpd: IcpdConfig = field(default_factory=IcpdConfig)
    gp_kernel: GpKernelConfig = None

    def __post_init__(self):
        if self.adaptation not in ADAPTATIONS:
            raise ArgumentError(
                f"adaptation must be one of {', '.join(ADAPTATIONS)}, got {self.adaptation!r}"
            )
        if not float(self.lam) > 0:
            raise ArgumentError("lambda must be > 0")
        if self.projection_lam is not None and not float(self.projection_lam) > 0:
            raise ArgumentError("projection_lambda must be > 0")

    @property
    def projection_lambda(self):
        return self.lam if self.projection_lam is None else self.projection_lam

    def check_paths(self, required=("template", "scan", "template_landmarks", "scan_landmarks", "out")):
        for name in required:
            if getattr(self, name) is None:
                raise ArgumentError(f"missing required path: {name.replace('_', '-')}")
        for name in _PATH_KEYS[:-1]:
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise DataError(f"{name.replace('_', '-')} file not found: {p}")


_PATH_KEYS = (
    "template", "scan", "template_landmarks", "scan_landmarks", "parts", "truth", "deformed", "registered", "out",
)
_CPD_KEYS = ("w", "beta", "lambda_cpd", "max_iter", "tol", "prior_strength", "sigma2_init", "normalize")
_ICPD_KEYS = ("outer_max_iter", "corr_stable_fraction", "subsample_target", "affine_every_iteration")


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, kind, key):
    t = text.strip()
    if t.lower() in ("none", "auto", ""):
        return None
    try:
        if kind is bool:
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
    except ValueError:
        raise ArgumentError(f"config key {key!r}: cannot parse {text!r}") from None
    return t


_KINDS = dict(
    w=float, beta=float, lambda_cpd=float, max_iter=int, tol=float, prior_strength=float,
    sigma2_init=float, normalize=bool, outer_max_iter=int, corr_stable_fraction=float,
    subsample_target=int, affine_every_iteration=bool,
)


def _section(parser, name, keys):
    out = {}
    if not parser.has_section(name):
        return out
    for key, text in parser.items(name):
        if key not in keys:
            raise ArgumentError(f"unknown config key [{name}] {key}")
        out[key] = _parse_value(text, _KINDS.get(key, str), key)
    return out


def _parse_scales(text):
    scales = []
    for chunk in text.split(","):
        tok = chunk.split()
        if not tok:
            continue
        if len(tok) != 2:
            raise ArgumentError(f"gp scales: expected 'amplitude length' pairs, got {chunk.strip()!r}")
        try:
            scales.append((float(tok[0]), float(tok[1])))
        except ValueError:
            raise ArgumentError(f"gp scales: bad number in {chunk.strip()!r}") from None
    return tuple(scales)


def config_from_ini(text, base=None):
    """Overlay an INI-style config onto ``base`` (defaults if ``None``).

    Sections: ``[paths]``, ``[pipeline]`` (adaptation, lambda,
    projection_lambda), ``[icpd]``, ``[cpd_affine]``, ``[cpd_nonrigid]`` and
    ``[gp]`` (scales as ``a l, a l``; noise_variance). Unknown keys are errors.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ArgumentError(f"malformed config: {exc}") from None
    # [synth] and [batch] belong to those subcommands and are read there
    known = {"paths", "pipeline", "icpd", "cpd_affine", "cpd_nonrigid", "gp", "synth", "batch"}
    for name in parser.sections():
        if name not in known:
            raise ArgumentError(f"unknown config section [{name}]")
    cfg = base or PipelineConfig()
    paths = _section(parser, "paths", _PATH_KEYS)
    pipe = dict(parser.items("pipeline")) if parser.has_section("pipeline") else {}
    for key in pipe:
        if key not in ("adaptation", "lambda", "projection_lambda"):
            raise ArgumentError(f"unknown config key [pipeline] {key}")
    updates = dict(paths)
    if "adaptation" in pipe:
        updates["adaptation"] = pipe["adaptation"].strip().lower()
    if _parse_value(pipe.get("lambda", "none"), float, "lambda") is not None:
        updates["lam"] = _parse_value(pipe["lambda"], float, "lambda")
    if "projection_lambda" in pipe:
        updates["projection_lam"] = _parse_value(pipe["projection_lambda"], float, "projection_lambda")
    icpd = cfg.icpd
    aff = _section(parser, "cpd_affine", _CPD_KEYS)
    nr = _section(parser, "cpd_nonrigid", _CPD_KEYS)
    try:
        icpd = replace(
            icpd,
            **_section(parser, "icpd", _ICPD_KEYS),
            affine=replace(icpd.affine, **aff),
            nonrigid=replace(icpd.nonrigid, **nr),
        )
    except TypeError as exc:
        raise ArgumentError(str(exc)) from None
    updates["icpd"] = icpd
    if parser.has_section("gp"):
        g = dict(parser.items("gp"))
        for key in g:
            if key not in ("scales", "noise_variance"):
                raise ArgumentError(f"unknown config key [gp] {key}")
        scales = g.get("scales", "auto").strip()
        if scales.lower() in ("auto", "none", ""):
            updates["gp_kernel"] = None
        else:
            noise = _parse_value(g.get("noise_variance", "none"), float, "noise_variance")
            parsed = _parse_scales(scales)
            if noise is None:
                noise = 1e-4 * sum(a for a, _ in parsed)
            updates["gp_kernel"] = GpKernelConfig(parsed, noise)
    return replace(cfg, **updates)


def load_config(path, base=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArgumentError(f"cannot read config {path}: {exc}") from None
    return config_from_ini(text, base)


def config_to_ini(cfg, extra=None):
    """Serialise ``cfg`` with every value spelled out (the run manifest).

    ``extra`` maps additional section names to ``{key: value}`` dicts.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser["paths"] = {k: _fmt(getattr(cfg, k)) for k in _PATH_KEYS}
    parser["pipeline"] = {
        "adaptation": cfg.adaptation,
        "lambda": _fmt(float(cfg.lam)),
        "projection_lambda": _fmt(float(cfg.projection_lambda)),
    }
    parser["icpd"] = {k: _fmt(getattr(cfg.icpd, k)) for k in _ICPD_KEYS}
    for name, c, variant in (("cpd_affine", cfg.icpd.affine, "affine"), ("cpd_nonrigid", cfg.icpd.nonrigid, "nonrigid")):
        values = {k: _fmt(getattr(c, k)) for k in _CPD_KEYS}
        values["max_iter"] = _fmt(c.iterations(variant))
        values["prior_strength"] = _fmt(c.gamma(variant == "nonrigid"))
        parser[name] = values
    if cfg.gp_kernel is None:
        parser["gp"] = {"scales": "auto", "noise_variance": "auto"}
    else:
        parser["gp"] = {
            "scales": ", ".join(f"{a!r} {l!r}" for a, l in cfg.gp_kernel.scales),
            "noise_variance": _fmt(float(cfg.gp_kernel.noise_variance)),
        }
    for name, values in (extra or {}).items():
        parser[name] = {k: _fmt(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def resolve_config(cfg, template):
    """Pin data-dependent defaults (the GP kernel) so the manifest is explicit."""
    if cfg.gp_kernel is None:
        cfg = replace(cfg, gp_kernel=GpKernelConfig.default_for(template))
    return cfg


# ---------------------------------------------------------------------------
# Evaluation


def cumulative_curve(errors, thresholds=CURVE_THRESHOLDS):
    """Fraction of ``errors`` at or below each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if e.size == 0:
        return np.zeros_like(t)
    return (e[None, :] <= t[:, None]).mean(axis=1)


def evaluate_against_ground_truth(registered, truth_positions, thresholds=CURVE_THRESHOLDS):
    """Per-vertex Euclidean error and its cumulative curve.

    Returns ``(errors, curve)`` with ``curve[k]`` the fraction of vertices with
    error ``<= thresholds[k]``.
    """
    R = registered.vertices if isinstance(registered, TriMesh) else np.asarray(registered, dtype=np.float64)
    T = truth_positions.vertices if isinstance(truth_positions, TriMesh) else np.asarray(truth_positions, dtype=np.float64)
    if R.shape != T.shape or R.ndim != 2 or R.shape[1] != 3:
        raise ArgumentError(f"shape mismatch: registered {R.shape} vs truth {T.shape}")
    errors = np.linalg.norm(R - T, axis=1)
    return errors, cumulative_curve(errors, thresholds)


@dataclass
class EvaluationReport:
    """Metrics of one registration, distances in the scan's units.

    ``template_landmark_errors`` measure the start template (after
    adaptation, before ICPD); ``landmark_errors`` the final result.
    """

    nn_distances: np.ndarray
    landmark_errors: np.ndarray
    template_landmark_errors: np.ndarray
    scan_bbox_diagonal: float
    adaptation: str
    icpd_outer_iterations: int
    icpd_inner_iterations: int
    thresholds: tuple = CURVE_THRESHOLDS
    truth_errors: np.ndarray = None
    timings: dict = field(default_factory=dict)

    @property
    def mean_nn_distance(self):
        return float(self.nn_distances.mean())

    @property
    def mean_landmark_error(self):
        return float(self.landmark_errors.mean())

    @property
    def mean_template_landmark_error(self):
        return float(self.template_landmark_errors.mean())

    @property
    def nn_curve(self):
        return cumulative_curve(self.nn_distances, self.thresholds)

    @property
    def truth_curve(self):
        return None if self.truth_errors is None else cumulative_curve(self.truth_errors, self.thresholds)

    def summary(self):
        """Deterministic ``metric -> value`` rows (no timings)."""
        pct = 100.0 / self.scan_bbox_diagonal
        rows = [
            ("adaptation", self.adaptation),
            ("n_vertices", len(self.nn_distances)),
            ("scan_bbox_diagonal", self.scan_bbox_diagonal),
            ("mean_nn_distance", self.mean_nn_distance),
            ("mean_nn_distance_pct_bbox", self.mean_nn_distance * pct),
            ("mean_landmark_error", self.mean_landmark_error),
            ("mean_landmark_error_pct_bbox", self.mean_landmark_error * pct),
            ("mean_template_landmark_error", self.mean_template_landmark_error),
            ("icpd_outer_iterations", self.icpd_outer_iterations),
            ("icpd_inner_iterations", self.icpd_inner_iterations),
        ]
        rows += [(f"nn_fraction_le_{t:g}", f) for t, f in zip(self.thresholds, self.nn_curve)]
        if self.truth_errors is not None:
            mean = float(self.truth_errors.mean())
            rows += [("mean_truth_error", mean), ("mean_truth_error_pct_bbox", mean * pct)]
            rows += [(f"truth_fraction_le_{t:g}", f) for t, f in zip(self.thresholds, self.truth_curve)]
            rows.append(("truth_fraction_le_2pct_bbox", float(np.mean(self.truth_errors <= 0.02 * self.scan_bbox_diagonal))))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for k, v in self.summary():
            writer.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])
        return buf.getvalue()


def per_vertex_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["vertex", "nn_distance"] + (["truth_error"] if report.truth_errors is not None else [])
    writer.writerow(cols)
    for i, d in enumerate(report.nn_distances.tolist()):
        row = [i, repr(d)]
        if report.truth_errors is not None:
            row.append(repr(float(report.truth_errors[i])))
        writer.writerow(row)
    return buf.getvalue()


def landmark_csv(report, lm):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["landmark", "template_index", "part", "template_error", "final_error"])
    labels = lm.part_labels or ["-"] * len(lm)
    for k in range(len(lm)):
        writer.writerow([
            k, int(lm.template_indices[k]), labels[k],
            repr(float(report.template_landmark_errors[k])), repr(float(report.landmark_errors[k])),
        ])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Registration


@dataclass
class RegistrationResult:
    """All products of :func:`register_meshes`; meshes are in scan coordinates
    except ``adapted_template`` (template frame)."""

    registered: TriMesh
    smooth: TriMesh
    adapted_template: TriMesh
    report: EvaluationReport
    transform: object
    icpd: object
    landmarks: LandmarkSpec


class _StageTracker:
    def __init__(self):
        self.timings = {}
        self.current = None

    @contextmanager
    def stage(self, name):
        self.current = name
        t0 = time.perf_counter()
        try:
            yield
        except MorphError as exc:
            _tag(exc, name)
            raise
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            err = SolverError(f"{name}: {exc}")
            err.stage = name
            raise err from exc
        finally:
            self.timings[name] = time.perf_counter() - t0


def _tag(exc, stage):
    if getattr(exc, "stage", None) is None:
        exc.stage = stage
        if exc.args:
            exc.args = (f"{stage}: {exc.args[0]}",) + tuple(exc.args[1:])


def adapt_template(template, lm, adaptation, parts=None, lam=DEFAULT_LAMBDA, gp_kernel=None):
    if adaptation == "none":
        return template
    if adaptation == "lb":
        return adapt_template_lb(template, lm, parts, lam)
    if adaptation == "gp":
        return adapt_template_gp(template, lm, gp_kernel)
    raise ArgumentError(f"unknown adaptation {adaptation!r}")


def register_meshes(template, scan, lm, cfg=None, parts=None, truth=None, on_stage=None):
    """Register ``template`` onto ``scan`` in memory.

    Parameters
    ----------
    template, scan : TriMesh
    lm : LandmarkSpec
        Template vertex indices with their scan-space points.
    cfg : PipelineConfig, optional
        Only the algorithmic fields are used; paths are ignored.
    parts : dict, optional
        Part label -> landmark ordinals; defaults to ``lm``'s labels.
    truth : array (p, 3), optional
        Ground-truth scan-space position of every template vertex.
    on_stage : callable, optional
        Called as ``on_stage(name, products)`` after each stage completes.

    Returns
    -------
    RegistrationResult
    """
    cfg = cfg or PipelineConfig()
    tracker = _StageTracker()
    notify = on_stage or (lambda name, products: None)
    with tracker.stage("align"):
        scan_al, T, lm_al = align_scan_to_template(scan, lm, template)
    back = T.inverse()
    with tracker.stage("adapt"):
        start = adapt_template(template, lm_al, cfg.adaptation, parts, cfg.lam, cfg.gp_kernel)
    notify("adapt", dict(adapted_template=start))
    with tracker.stage("icpd"):
        res = icpd_register(start, scan_al, cfg.icpd)
    smooth = res.deformed_template.with_vertices(back.apply(res.deformed_template.vertices))
    notify("icpd", dict(smooth=smooth, icpd=res))
    with tracker.stage("project"):
        proj = lbrp_project(res.deformed_template, scan_al, cfg.projection_lambda)
    registered = proj.with_vertices(back.apply(proj.vertices))
    with tracker.stage("evaluate"):
        _, nn = nearest_neighbors(registered.vertices, scan.vertices)
        lm_final = np.linalg.norm(registered.vertices[lm.template_indices] - lm.scan_points, axis=1)
        lm_start = np.linalg.norm(start.vertices[lm_al.template_indices] - lm_al.scan_points, axis=1)
        truth_err = None
        if truth is not None:
            truth_err, _ = evaluate_against_ground_truth(registered, truth)
        report = EvaluationReport(
            nn_distances=nn,
            landmark_errors=lm_final,
            template_landmark_errors=lm_start,
            scan_bbox_diagonal=scan.bbox_diagonal(),
            adaptation=cfg.adaptation,
            icpd_outer_iterations=len(res.outer_log),
            icpd_inner_iterations=res.total_inner_iterations,
            truth_errors=truth_err,
        )
    report.timings = dict(tracker.timings)
    return RegistrationResult(registered, smooth, start, report, T, res, lm)


def _write(path, data):
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)


def load_inputs(cfg):
    """Read template, scan, landmarks, parts and optional truth named by ``cfg``."""
    cfg.check_paths()
    template = read_obj(cfg.template)
    scan = read_obj(cfg.scan)
    lm = load_landmarks(cfg.template_landmarks, cfg.scan_landmarks)
    lm.check(template)
    parts = load_parts(cfg.parts) if cfg.parts else None
    truth = None
    if cfg.truth:
        truth = read_obj(cfg.truth).vertices
        if truth.shape != template.vertices.shape:
            raise DataError(
                f"truth has {len(truth)} vertices, template has {template.n_vertices}"
            )
    return template, scan, lm, parts, truth


def run_registration(cfg):
    """Run the full pipeline on files and write all outputs to ``cfg.out``.

    Outputs: ``registered.obj`` (scan coordinates), ``registered_error.obj``
    (vertex colours from nearest-point distance), ``smooth.obj`` (ICPD
    result), ``adapted_template.obj`` (template frame), ``report.csv``,
    ``per_vertex.csv``, ``landmarks.csv``, ``icpd_outer.csv``,
    ``cpd_iterations.csv``, ``manifest.ini`` and ``timings.json``. On failure
    the products of completed stages are kept and a ``FAILED`` file names the
    stage and error.

    Returns
    -------
    registered : TriMesh
    report : EvaluationReport
    """
    if cfg.out is None:
        raise ArgumentError("missing required path: out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    stage = "load"
    try:
        t0 = time.perf_counter()
        try:
            template, scan, lm, parts, truth = load_inputs(cfg)
        except MorphError as exc:
            _tag(exc, "load")
            raise
        load_seconds = time.perf_counter() - t0
        cfg = resolve_config(cfg, template)
        _write(out / "manifest.ini", config_to_ini(cfg))

        def save(name, products):
            nonlocal stage
            stage = name
            if "adapted_template" in products:
                _write(out / "adapted_template.obj", write_obj(products["adapted_template"]))
            if "smooth" in products:
                _write(out / "smooth.obj", write_obj(products["smooth"]))
                res = products["icpd"]
                _write(out / "icpd_outer.csv", outer_log_csv(res.outer_log, include_seconds=False))
                _write(out / "cpd_iterations.csv", inner_log_csv(res.inner_logs))

        result = register_meshes(template, scan, lm, cfg, parts, truth, on_stage=save)
    except MorphError as exc:
        _write(failed, f"stage: {getattr(exc, 'stage', stage)}\nerror: {type(exc).__name__}: {exc}\n")
        raise
    report = result.report
    report.timings = {"load": load_seconds, **report.timings}
    _write(out / "registered.obj", write_obj(result.registered))
    _write(out / "registered_error.obj", write_obj(result.registered, report.nn_distances))
    _write(out / "report.csv", report.to_csv())
    _write(out / "per_vertex.csv", per_vertex_csv(report))
    _write(out / "landmarks.csv", landmark_csv(report, lm))
    _write(out / "timings.json", json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
    return result.registered, report


# ---------------------------------------------------------------------------
# Batch


def discover_batch(in_dir):
    """Scans in ``in_dir``: ``NAME.obj`` with ``NAME_landmarks.txt`` and,
    optionally, ``NAME_truth.obj``. Sorted by name."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise DataError(f"batch input is not a directory: {in_dir}")
    items = []
    for obj in sorted(in_dir.glob("*.obj")):
        name = obj.stem
        if name.endswith("_truth"):
            continue
        lmk = in_dir / f"{name}_landmarks.txt"
        if not lmk.is_file():
            raise DataError(f"batch: {obj.name} has no {lmk.name}")
        truth = in_dir / f"{name}_truth.obj"
        items.append((name, str(obj), str(lmk), str(truth) if truth.is_file() else None))
    if not items:
        raise DataError(f"batch: no scans found in {in_dir}")
    return items


def _batch_one(args):
    name, cfg = args
    try:
        _, report = run_registration(cfg)
        return name, "ok", "", dict(report.summary())
    except MorphError as exc:
        return name, "FAILED", f"{type(exc).__name__}: {exc}", {"exit_code": exc.exit_code}


AGGREGATE_COLUMNS = (
    "mean_nn_distance", "mean_nn_distance_pct_bbox", "mean_landmark_error",
    "mean_template_landmark_error", "icpd_outer_iterations", "icpd_inner_iterations",
    "mean_truth_error", "truth_fraction_le_2pct_bbox",
)


def run_batch(cfg, in_dir, out_dir, jobs=None):
    """Register every scan in ``in_dir`` (one worker process per scan).

    ``cfg`` supplies the template, its landmarks, parts and algorithm
    settings. Writes ``out_dir/NAME/...`` per scan plus ``aggregate.csv``.
    Returns the aggregate rows as ``(name, status, message, summary)``.
    """
    items = discover_batch(in_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (name, replace(cfg, scan=scan, scan_landmarks=lmk, truth=truth, out=str(out_dir / name)))
        for name, scan, lmk, truth in items
    ]
    for _, c in tasks:
        c.check_paths()
    jobs = jobs or min(len(tasks), os.cpu_count() or 1)
    if jobs <= 1:
        rows = [_batch_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_batch_one, tasks))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scan", "status"] + list(AGGREGATE_COLUMNS) + ["message"])
    for name, status, message, summary in rows:
        vals = []
        for c in AGGREGATE_COLUMNS:
            v = summary.get(c, "")
            vals.append(repr(float(v)) if isinstance(v, (float, np.floating)) else v)
        writer.writerow([name, status] + vals + [message])
    _write(out_dir / "aggregate.csv", buf.getvalue())
    return rows


# ---------------------------------------------------------------------------
# Estimators


class TemplateAdapter(BaseEstimator):
    """Landmark-driven template adaptation as an estimator.

    ``fit(template, landmarks)`` computes ``adapted_template_``;
    ``transform(template)`` returns it for the fitted template.
    """

    def __init__(self, method="lb", lam=DEFAULT_LAMBDA, parts=None, gp_kernel=None):
        self.method = method
        self.lam = lam
        self.parts = parts
        self.gp_kernel = gp_kernel

    def fit(self, template, landmarks):
        if self.method not in ("lb", "gp"):
            raise ArgumentError(f"method must be 'lb' or 'gp', got {self.method!r}")
        self.adapted_template_ = adapt_template(
            template, landmarks, self.method, self.parts, self.lam, self.gp_kernel
        )
        self.displacement_ = self.adapted_template_.vertices - template.vertices
        return self

    def transform(self, template):
        check_is_fitted(self, "adapted_template_")
        if not np.array_equal(template.faces, self.adapted_template_.faces):
            raise ArgumentError("template connectivity differs from the fitted template")
        return self.adapted_template_

    def fit_transform(self, template, landmarks):
        return self.fit(template, landmarks).adapted_template_


class AdaptiveTemplateRegistration(BaseEstimator):
    """The full pipeline as an estimator.

    ``fit(scan, landmarks)`` registers the template given at construction
    onto ``scan``; ``predict()`` returns the registered mesh.

    Parameters
    ----------
    template : TriMesh
    adaptation : {'none', 'lb', 'gp'}
    lam : float
        Laplacian stiffness of adaptation and projection.
    icpd : IcpdConfig, optional
    gp_kernel : GpKernelConfig, optional
    parts : dict, optional
    """

    def __init__(self, template=None, adaptation="lb", lam=DEFAULT_LAMBDA, icpd=None, gp_kernel=None, parts=None):
        self.template = template
        self.adaptation = adaptation
        self.lam = lam
        self.icpd = icpd
        self.gp_kernel = gp_kernel
        self.parts = parts

    def _config(self):
        return PipelineConfig(
            adaptation=self.adaptation, lam=self.lam,
            icpd=self.icpd or IcpdConfig(), gp_kernel=self.gp_kernel,
        )

    def fit(self, scan, landmarks, truth=None):
        if self.template is None:
            raise ArgumentError("template is required")
        res = register_meshes(self.template, scan, landmarks, self._config(), self.parts, truth)
        self.result_ = res
        self.registered_ = res.registered
        self.report_ = res.report
        return self

    def predict(self, scan=None):
        check_is_fitted(self, "registered_")
        return self.registered_


__all__ = [
    "ADAPTATIONS",
    "CURVE_THRESHOLDS",
    "AdaptiveTemplateRegistration",
    "EvaluationReport",
    "PipelineConfig",
    "RegistrationResult",
    "TemplateAdapter",
    "adapt_template",
    "config_from_ini",
    "config_to_ini",
    "cumulative_curve",
    "discover_batch",
    "evaluate_against_ground_truth",
    "load_config",
    "load_inputs",
    "register_meshes",
    "resolve_config",
    "run_batch",
    "run_registration",
]
