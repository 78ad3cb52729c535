"""Iterative Coherent Point Drift.

Outer loop around CPD that alternates closest-point correspondence
estimation with prior-biased non-rigid CPD:

1. subsample the scan to the template's size (farthest-point sampling);
2. ``idx1``: nearest scan sample for every template vertex;
3. affine CPD between the template and its ``idx1`` partners, applied to the
   template as a small global adjustment;
4. ``idx2``: mutual nearest neighbours of the adjusted template and sample;
5. non-rigid CPD with ``idx2`` as E-step priors;
6. stop once the mutual-NN correspondences settle.
"""

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction
from .cpd import CpdConfig, cpd_affine, cpd_nonrigid
from .errors import AlignmentError, ArgumentError
from .mesh import (
    Correspondences,
    TriMesh,
    farthest_point_sampling,
    mutual_nearest_neighbors,
    nearest_neighbors,
)


@dataclass(frozen=True)
class IcpdConfig:
    outer_max_iter: int = 10
    corr_stable_fraction: float = 0.005
    subsample_target: int = None
    affine_every_iteration: bool = True
    affine: CpdConfig = field(default_factory=CpdConfig)
    nonrigid: CpdConfig = field(default_factory=CpdConfig)

    def __post_init__(self):
        if int(self.outer_max_iter) < 1:
            raise ArgumentError("outer_max_iter must be >= 1")
        check_fraction(self.corr_stable_fraction, "corr_stable_fraction", closed_low=False)
        if self.subsample_target is not None and int(self.subsample_target) < 4:
            raise ArgumentError("subsample_target must be >= 4")


@dataclass
class IcpdResult:
    deformed_template: TriMesh
    final_correspondences: Correspondences
    outer_log: list
    sample_indices: np.ndarray = None
    inner_logs: list = field(default_factory=list)

    @property
    def total_inner_iterations(self):
        return sum(r["inner_affine_iters"] + r["inner_nonrigid_iters"] for r in self.outer_log)


def _pair_change(a, b):
    return len(a.pairs() ^ b.pairs())


def icpd_register(template, scan, cfg=None):
    """Deform ``template`` onto ``scan`` (both already in one frame).

    Returns an :class:`IcpdResult`; ``final_correspondences`` index into the
    full scan vertex array.
    """
    cfg = cfg or IcpdConfig()
    Y = template.vertices
    scan_pts = scan.vertices
    M = len(Y)
    if M < 4 or len(scan_pts) < 4:
        raise ArgumentError("template and scan need at least 4 vertices each")
    budget = cfg.subsample_target if cfg.subsample_target is not None else M
    sample_idx = farthest_point_sampling(scan_pts, min(int(budget), len(scan_pts)))
    sample = scan_pts[sample_idx]

    current = Y.copy()
    prev = mutual_nearest_neighbors(current, sample)
    log, inner = [], []
    for outer in range(int(cfg.outer_max_iter)):
        t0 = time.perf_counter()
        affine_iters = 0
        if cfg.affine_every_iteration or outer == 0:
            idx1, _ = nearest_neighbors(current, sample)
            aff = cpd_affine(current, sample[idx1], cfg.affine)
            current = current @ aff.B.T + aff.t
            affine_iters = aff.n_iter
            inner.append(("affine", outer, aff.log))
        idx2 = mutual_nearest_neighbors(current, sample)
        if len(idx2) == 0:
            raise AlignmentError(
                "no mutual nearest neighbours between template and scan; check the rigid alignment"
            )
        nr = cpd_nonrigid(current, sample, cfg.nonrigid, priors=idx2)
        current = nr.deformed
        inner.append(("nonrigid", outer, nr.log))
        corr = mutual_nearest_neighbors(current, sample)
        changed = _pair_change(corr, prev)
        prev = corr
        _, d = nearest_neighbors(current, scan_pts)
        log.append(
            dict(
                outer_iter=outer,
                corr_changed=changed,
                mean_nn_dist=float(d.mean()),
                inner_affine_iters=affine_iters,
                inner_nonrigid_iters=nr.n_iter,
                seconds=time.perf_counter() - t0,
            )
        )
        if changed < cfg.corr_stable_fraction * M:
            break
    return IcpdResult(
        deformed_template=template.with_vertices(current),
        final_correspondences=prev.remap_dst(sample_idx),
        outer_log=log,
        sample_indices=sample_idx,
        inner_logs=inner,
    )


def inner_log_csv(inner_logs):
    """All inner CPD iteration logs of one ICPD run as a single CSV.

    Columns are ``outer_iter, stage`` followed by the per-run CPD log columns.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["outer_iter", "stage", "iter", "sigma2", "objective", "corr_changed"])
    for stage, outer, rows in inner_logs:
        for r in rows:
            writer.writerow([outer, stage, r["iter"], repr(r["sigma2"]), repr(r["objective"]), r["corr_changed"]])
    return buf.getvalue()


def outer_log_csv(log, include_seconds=True):
    cols = ["outer_iter", "corr_changed", "mean_nn_dist", "inner_affine_iters", "inner_nonrigid_iters"]
    if include_seconds:
        cols.append("seconds")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in log:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


class ICPDRegistration(BaseEstimator):
    """Estimator wrapper: ``fit(template, scan)`` then read ``deformed_template_``.

    ``transform(template)`` returns the deformed template mesh for the fitted
    template (the registration is specific to that pair).
    """

    def __init__(self, outer_max_iter=10, corr_stable_fraction=0.005, subsample_target=None,
                 affine_every_iteration=True, affine=None, nonrigid=None):
        self.outer_max_iter = outer_max_iter
        self.corr_stable_fraction = corr_stable_fraction
        self.subsample_target = subsample_target
        self.affine_every_iteration = affine_every_iteration
        self.affine = affine
        self.nonrigid = nonrigid

    def _config(self):
        return IcpdConfig(
            outer_max_iter=self.outer_max_iter,
            corr_stable_fraction=self.corr_stable_fraction,
            subsample_target=self.subsample_target,
            affine_every_iteration=self.affine_every_iteration,
            affine=self.affine or CpdConfig(),
            nonrigid=self.nonrigid or CpdConfig(),
        )

    def fit(self, template, scan):
        res = icpd_register(template, scan, self._config())
        self.result_ = res
        self.deformed_template_ = res.deformed_template
        self.correspondences_ = res.final_correspondences
        self.n_outer_iter_ = len(res.outer_log)
        return self

    def transform(self, template):
        check_is_fitted(self, "deformed_template_")
        if not np.array_equal(template.faces, self.deformed_template_.faces):
            raise ArgumentError("template connectivity differs from the fitted template")
        return self.deformed_template_
