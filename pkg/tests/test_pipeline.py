import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptmorph.cpd import CpdConfig
from adaptmorph.errors import ArgumentError, DataError, MorphError
from adaptmorph.gpmm import GpKernelConfig
from adaptmorph.icpd import IcpdConfig
from adaptmorph.pipeline import (
    AdaptiveTemplateRegistration,
    PipelineConfig,
    TemplateAdapter,
    config_from_ini,
    config_to_ini,
    cumulative_curve,
    discover_batch,
    evaluate_against_ground_truth,
    register_meshes,
    run_batch,
    run_registration,
)
from adaptmorph.rigid import LandmarkSpec
from adaptmorph.synthetic import SyntheticSpec, face_landmark_indices, make_synthetic_case


def _case_cfg(paths, out, **kw):
    return PipelineConfig(
        template=paths["template"], scan=paths["scan"],
        template_landmarks=paths["template_landmarks"], scan_landmarks=paths["scan_landmarks"],
        parts=paths["parts"], truth=paths["truth"], out=str(out), **kw,
    )


# ---------------------------------------------------------------------------
# Configuration


def test_config_round_trip():
    cfg = PipelineConfig(
        template="/t.obj", adaptation="gp", lam=0.5, projection_lam=0.2,
        icpd=IcpdConfig(outer_max_iter=4, affine_every_iteration=False,
                        nonrigid=CpdConfig(beta=1.5, prior_strength=5.0)),
        gp_kernel=GpKernelConfig(((1.0, 50.0), (0.5, 5.0)), 2e-4),
    )
    back = config_from_ini(config_to_ini(cfg))
    assert back.template == "/t.obj" and back.adaptation == "gp"
    assert back.lam == 0.5 and back.projection_lam == 0.2
    assert back.icpd.outer_max_iter == 4 and back.icpd.affine_every_iteration is False
    assert back.icpd.nonrigid.beta == 1.5 and back.icpd.nonrigid.prior_strength == 5.0
    assert back.gp_kernel == cfg.gp_kernel
    # the manifest spells out resolved defaults and is a fixed point
    assert config_to_ini(back) == config_to_ini(cfg)
    assert "max_iter = 300" in config_to_ini(PipelineConfig())


def test_config_errors():
    for text in ("[bogus]\na = 1\n", "[pipeline]\nspeed = 3\n", "[icpd]\nouter_max_iter = x\n",
                 "[pipeline]\nadaptation = best\n", "not an ini"):
        with pytest.raises(ArgumentError):
            config_from_ini(text)


def test_config_overlay_keeps_base():
    base = PipelineConfig(adaptation="none", lam=0.3)
    cfg = config_from_ini("[cpd_affine]\nw = 0.2\n", base)
    assert cfg.adaptation == "none" and cfg.lam == 0.3 and cfg.icpd.affine.w == 0.2


# ---------------------------------------------------------------------------
# Evaluation


def test_evaluate_examples(rng):
    truth = rng.normal(size=(50, 3))
    err, curve = evaluate_against_ground_truth(truth, truth)
    assert np.all(err == 0) and np.all(curve == 1.0)
    err, _ = evaluate_against_ground_truth(truth + [1.0, 0, 0], truth)
    assert np.allclose(err, 1.0, rtol=0, atol=1e-15)
    reg = truth + rng.normal(size=truth.shape)
    err, curve = evaluate_against_ground_truth(reg, truth)
    ref = np.array([np.sqrt(sum((a - b) ** 2 for a, b in zip(r, t))) for r, t in zip(reg, truth)])
    assert np.allclose(err, ref, rtol=1e-14)
    assert np.allclose(curve, [(ref <= t).mean() for t in (0.5, 1, 2, 3, 5)])
    with pytest.raises(ArgumentError):
        evaluate_against_ground_truth(truth[:3], truth)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50),
       st.lists(st.floats(0, 100), min_size=2, max_size=8))
def test_curve_monotone(errors, thresholds):
    curve = cumulative_curve(errors, sorted(thresholds))
    assert np.all(np.diff(curve) >= 0) and curve.min() >= 0 and curve.max() <= 1


# ---------------------------------------------------------------------------
# Registration


def test_identity_registration(head):
    idx, labels = face_landmark_indices(head)
    lm = LandmarkSpec(idx, head.vertices[idx], labels)
    res = register_meshes(head, head, lm, PipelineConfig(), truth=head.vertices)
    diag = head.bbox_diagonal()
    assert res.report.truth_errors.mean() < 1e-6 * diag
    assert res.report.mean_nn_distance < 1e-6 * diag
    assert all(v > 0 for v in res.report.timings.values())
    assert set(res.report.timings) == {"align", "adapt", "icpd", "project", "evaluate"}


def test_lb_improves_landmarks_on_displaced_parts():
    case = make_synthetic_case(0, SyntheticSpec(part_shift=0.03))
    runs = {a: register_meshes(case.template, case.scan, case.landmarks, PipelineConfig(adaptation=a),
                               case.parts, case.truth).report for a in ("none", "lb")}
    assert runs["lb"].mean_template_landmark_error < runs["none"].mean_template_landmark_error
    assert runs["lb"].mean_landmark_error < runs["none"].mean_landmark_error


def test_run_registration_outputs(tmp_path, write_case):
    case = make_synthetic_case(1, SyntheticSpec(part_shift=0.03, warp=0.03, noise=0.002))
    paths = write_case(tmp_path / "in", case)
    cfg = _case_cfg(paths, tmp_path / "out")
    registered, report = run_registration(cfg)
    out = tmp_path / "out"
    expected = {"registered.obj", "registered_error.obj", "smooth.obj", "adapted_template.obj", "report.csv",
                "per_vertex.csv", "landmarks.csv", "icpd_outer.csv", "cpd_iterations.csv", "manifest.ini",
                "timings.json"}
    assert expected == {p.name for p in out.iterdir()}
    rows = dict(csv.reader((out / "report.csv").read_text().splitlines()[1:]))
    assert float(rows["truth_fraction_le_2pct_bbox"]) > 0.9
    assert registered.n_vertices == case.template.n_vertices
    # the manifest alone reproduces the run
    again = config_from_ini((out / "manifest.ini").read_text())
    again = replace(again, out=str(tmp_path / "again"))
    run_registration(again)
    for name in expected - {"timings.json", "manifest.ini"}:
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("out =")]
    assert strip(out / "manifest.ini") == strip(tmp_path / "again" / "manifest.ini")


def test_failed_marker(tmp_path, write_case):
    case = make_synthetic_case(2)
    paths = write_case(tmp_path / "in", case)
    Path(paths["scan_landmarks"]).write_text("1 2 3\n")
    with pytest.raises(MorphError) as info:
        run_registration(_case_cfg(paths, tmp_path / "out"))
    assert info.value.exit_code == 3
    marker = (tmp_path / "out" / "FAILED").read_text()
    assert marker.startswith("stage: load")


def test_failed_marker_mid_pipeline(tmp_path, write_case):
    case = make_synthetic_case(2)
    paths = write_case(tmp_path / "in", case)
    # a two-landmark part cannot define a rigid motion
    Path(paths["parts"]).write_text("".join(f"{lab} {k}\n" for lab, k in
                                            [("eyes", 0), ("eyes", 1), ("eyes", 2), ("tip", 4), ("tip", 5)]))
    with pytest.raises(ArgumentError):
        run_registration(_case_cfg(paths, tmp_path / "out"))
    assert (tmp_path / "out" / "FAILED").read_text().startswith("stage: adapt")
    assert (tmp_path / "out" / "manifest.ini").exists()


def test_missing_paths(tmp_path):
    with pytest.raises(ArgumentError):
        run_registration(PipelineConfig(out=str(tmp_path)))
    with pytest.raises(ArgumentError):
        PipelineConfig(adaptation="best")


def test_batch(tmp_path, write_case):
    in_dir = tmp_path / "in"
    spec = SyntheticSpec(part_shift=0.03, warp=0.03, noise=0.002)
    for k in range(3):
        paths = write_case(in_dir, make_synthetic_case(k, spec), name=f"case_{k}")
    # template files live elsewhere; template_landmarks.txt would look like a scan's
    tdir = tmp_path / "template"
    tdir.mkdir()
    for key in ("template", "template_landmarks", "parts"):
        paths[key] = str(Path(paths[key]).rename(tdir / Path(paths[key]).name))
    assert [n for n, *_ in discover_batch(in_dir)] == ["case_0", "case_1", "case_2"]
    cfg = PipelineConfig(template=paths["template"], template_landmarks=paths["template_landmarks"],
                         parts=paths["parts"])
    rows = run_batch(cfg, in_dir, tmp_path / "out", jobs=2)
    assert [r[1] for r in rows] == ["ok"] * 3
    agg = list(csv.DictReader((tmp_path / "out" / "aggregate.csv").open()))
    assert [r["scan"] for r in agg] == ["case_0", "case_1", "case_2"]
    assert all(float(r["truth_fraction_le_2pct_bbox"]) > 0.9 for r in agg)
    with pytest.raises(DataError):
        discover_batch(tmp_path / "nope")


def test_estimators(head):
    idx, labels = face_landmark_indices(head)
    pts = head.vertices[idx] + [0.0, 0.0, 2.0]
    lm = LandmarkSpec(idx, pts, labels)
    ad = TemplateAdapter("gp").fit(head, lm)
    assert np.allclose(ad.transform(head).vertices[idx], pts, atol=1e-2)
    assert ad.get_params()["method"] == "gp"
    with pytest.raises(ArgumentError):
        TemplateAdapter("none").fit(head, lm)
    est = AdaptiveTemplateRegistration(template=head, adaptation="none")
    same = LandmarkSpec(idx, head.vertices[idx], labels)
    reg = est.fit(head, same).predict()
    assert np.abs(reg.vertices - head.vertices).max() < 1e-6 * head.bbox_diagonal()
