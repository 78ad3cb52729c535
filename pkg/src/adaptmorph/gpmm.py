"""Gaussian-process deformation prior and posterior-mean template adaptation."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive
from .errors import ArgumentError, ConditioningError
from .mesh import TriMesh

MAX_CONDITION = 1e13


@dataclass(frozen=True)
class GpKernelConfig:
    """Sum of isotropic Gaussian kernels ``sum_j a_j exp(-r^2 / l_j^2)`` plus noise."""

    scales: tuple = ((1.0, 1.0),)
    noise_variance: float = 1e-4

    def __post_init__(self):
        scales = tuple((float(a), float(l)) for a, l in self.scales)
        if not scales:
            raise ArgumentError("kernel needs at least one (amplitude, length) scale")
        for a, l in scales:
            check_positive(a, "kernel amplitude")
            check_positive(l, "kernel length scale")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(
            self, "noise_variance", check_positive(self.noise_variance, "noise_variance", allow_zero=True)
        )

    @classmethod
    def default_for(cls, mesh_or_points):
        """Two-scale default sized to the bounding-box diagonal."""
        pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.asarray(mesh_or_points)
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        scales = ((1.0, 0.25 * diag), (0.25, 0.05 * diag))
        return cls(scales, 1e-4 * sum(a for a, _ in scales))

    @property
    def amplitude_total(self):
        return sum(a for a, _ in self.scales)

    @property
    def max_length(self):
        return max(l for _, l in self.scales)


def kernel_matrix(points_a, points_b, cfg):
    """Scalar kernel matrix ``K[i, j] = sum_s a_s exp(-||p_i - q_j||^2 / l_s^2)``.

    The vector-valued kernel is ``K ⊗ I_3``; coordinates are independent.
    """
    d2 = cdist(np.asarray(points_a, float), np.asarray(points_b, float), "sqeuclidean")
    K = np.zeros_like(d2)
    for a, l in cfg.scales:
        K += a * np.exp(-d2 / (l * l))
    return K


class GaussianProcessDeformation(RegressorMixin, BaseEstimator):
    """Zero-mean GP regression of a 3D displacement field.

    ``fit(points, displacements)`` conditions on observed displacements;
    ``predict(points)`` returns the posterior mean displacement.

    Parameters
    ----------
    kernel : GpKernelConfig or None
        ``None`` picks :meth:`GpKernelConfig.default_for` the fitted points.
    """

    def __init__(self, kernel=None):
        self.kernel = kernel

    def fit(self, X, y):
        X = check_points(X, "X")
        y = check_points(y, "y")
        if len(X) != len(y):
            raise ArgumentError("X and y must have the same number of rows")
        cfg = self.kernel if self.kernel is not None else GpKernelConfig.default_for(X)
        K = kernel_matrix(X, X, cfg)
        K[np.diag_indices_from(K)] += cfg.noise_variance
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise ConditioningError(
                f"landmark kernel matrix is ill-conditioned (cond={cond:.3e}); "
                "increase noise_variance"
            )
        try:
            factor = linalg.cho_factor(K, lower=True)
        except linalg.LinAlgError:
            raise ConditioningError(
                "landmark kernel matrix is not positive definite; increase noise_variance"
            ) from None
        self.kernel_ = cfg
        self.X_fit_ = X
        self.alpha_ = linalg.cho_solve(factor, y)
        return self

    def predict(self, X):
        check_is_fitted(self, "alpha_")
        X = check_points(X, "X")
        return kernel_matrix(X, self.X_fit_, self.kernel_) @ self.alpha_


def gp_posterior_mean(template, lm, cfg=None):
    """Posterior-mean displacement at every template vertex given landmarks."""
    lm.check(template)
    if len(lm) < 1:
        raise ArgumentError("at least one landmark is required")
    if cfg is None:
        cfg = GpKernelConfig.default_for(template)
    anchors = lm.template_points(template)
    gp = GaussianProcessDeformation(cfg).fit(anchors, lm.scan_points - anchors)
    return gp.predict(template.vertices)


def adapt_template_gp(template, lm, cfg=None):
    """Template plus the posterior-mean deformation field."""
    return template.with_vertices(template.vertices + gp_posterior_mean(template, lm, cfg))
