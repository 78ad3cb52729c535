import numpy as np
import pytest

from adaptmorph.cpd import CpdConfig
from adaptmorph.errors import AlignmentError, ArgumentError
from adaptmorph.icpd import ICPDRegistration, IcpdConfig, icpd_register, inner_log_csv, outer_log_csv
from adaptmorph.mesh import nearest_neighbors
from adaptmorph.synthetic import SyntheticSpec, make_synthetic_case, smooth_field


def _warped(head, seed):
    diag = head.bbox_diagonal()
    f = smooth_field(head.vertices, np.random.default_rng(seed), 0.8 * diag)
    f *= 0.05 * diag / np.linalg.norm(f, axis=1).max()
    return head.vertices + f


def test_copy_converges_immediately(head):
    res = icpd_register(head, head)
    assert len(res.outer_log) == 1
    assert res.outer_log[0]["corr_changed"] == 0
    assert np.abs(res.deformed_template.vertices - head.vertices).max() < 1e-6 * head.bbox_diagonal()
    assert np.array_equal(res.deformed_template.faces, head.faces)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_smooth_warp_recovered(head, seed):
    truth = _warped(head, seed)
    res = icpd_register(head, head.with_vertices(truth))
    err = np.linalg.norm(res.deformed_template.vertices - truth, axis=1)
    assert (err < 0.01 * head.bbox_diagonal()).mean() >= 0.95


_FIXTURE_SPEC = SyntheticSpec(warp=0.05, part_shift=0.03, noise=0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_outer_loop_properties(seed):
    case = make_synthetic_case(seed, _FIXTURE_SPEC)
    res = icpd_register(case.template, case.scan)
    changes = [r["corr_changed"] for r in res.outer_log]
    assert max(changes[1:], default=0) < changes[0]
    _, d0 = nearest_neighbors(case.template.vertices, case.scan.vertices)
    assert res.outer_log[-1]["mean_nn_dist"] <= d0.mean()
    assert res.total_inner_iterations == sum(
        r["inner_affine_iters"] + r["inner_nonrigid_iters"] for r in res.outer_log
    )


@pytest.mark.xfail(strict=False, reason="mutual-NN pairs oscillate by a few pairs near convergence")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_change_counts_nonincreasing_after_two(seed):
    case = make_synthetic_case(seed, _FIXTURE_SPEC)
    changes = [r["corr_changed"] for r in icpd_register(case.template, case.scan).outer_log]
    assert all(b <= a for a, b in zip(changes[1:], changes[2:])), changes


def test_deterministic(head):
    scan = head.with_vertices(_warped(head, 4))
    a = icpd_register(head, scan)
    b = icpd_register(head, scan)
    assert np.array_equal(a.deformed_template.vertices, b.deformed_template.vertices)
    assert outer_log_csv(a.outer_log, False) == outer_log_csv(b.outer_log, False)
    assert inner_log_csv(a.inner_logs) == inner_log_csv(b.inner_logs)


def test_subsample_and_affine_once(head):
    scan = head.with_vertices(_warped(head, 5))
    cfg = IcpdConfig(subsample_target=300, affine_every_iteration=False, outer_max_iter=3)
    res = icpd_register(head, scan, cfg)
    assert len(res.sample_indices) == 300
    assert all(r["inner_affine_iters"] == 0 for r in res.outer_log[1:])
    assert res.final_correspondences.dst.max() < scan.n_vertices
    assert np.isin(res.final_correspondences.dst, res.sample_indices).all()


def test_empty_mutual_pairs(head, monkeypatch):
    from adaptmorph import icpd
    from adaptmorph.mesh import Correspondences

    monkeypatch.setattr(icpd, "mutual_nearest_neighbors", lambda a, b: Correspondences.from_pairs([]))
    with pytest.raises(AlignmentError):
        icpd_register(head, head)


def test_csv_formats():
    row = dict(outer_iter=0, corr_changed=3, mean_nn_dist=0.25, inner_affine_iters=4,
               inner_nonrigid_iters=9, seconds=0.5)
    assert outer_log_csv([row]) == (
        "outer_iter,corr_changed,mean_nn_dist,inner_affine_iters,inner_nonrigid_iters,seconds\n"
        "0,3,0.25,4,9,0.5\n"
    )
    assert outer_log_csv([row], include_seconds=False).splitlines()[1] == "0,3,0.25,4,9"
    inner = [("affine", 0, [dict(iter=0, sigma2=1.5, objective=-2.0, corr_changed=7)])]
    assert inner_log_csv(inner) == "outer_iter,stage,iter,sigma2,objective,corr_changed\n0,affine,0,1.5,-2.0,7\n"


def test_config_validation():
    with pytest.raises(ArgumentError):
        IcpdConfig(outer_max_iter=0)
    with pytest.raises(ArgumentError):
        IcpdConfig(corr_stable_fraction=0.0)
    with pytest.raises(ArgumentError):
        IcpdConfig(subsample_target=2)


def test_estimator(head):
    est = ICPDRegistration(outer_max_iter=2, nonrigid=CpdConfig(max_iter=20)).fit(head, head)
    assert est.transform(head) is est.deformed_template_
    assert est.n_outer_iter_ == 1
