"""Coherent Point Drift: EM registration of a GMM template onto a target cloud.

Notation follows the usual CPD convention: ``Y`` (M x 3) holds the moving
template points (GMM centroids), ``X`` (N x 3) the fixed target points and
``P`` (M x N) the posterior responsibilities ``P[m, n] = p(m | x_n)``.

Correspondence priors bias the mixing weights of the E-step: a prior pair
``(m, n)`` with weight ``c`` gets mixing weight ``1 + (gamma - 1) c`` relative
to 1 for every other centroid, and each target's weights are renormalised to
sum to ``M``. With ``gamma = 1`` this is standard CPD.
"""

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction, check_points, check_positive
from .errors import ArgumentError, DegenerateGeometryError
from .mesh import Correspondences

D = 3
AFFINE_MAX_ITER = 200
NONRIGID_MAX_ITER = 300
DEGENERATE_SIGMA2 = 1e-12


@dataclass(frozen=True)
class CpdConfig:
    w: float = 0.1
    beta: float = 2.0
    lambda_cpd: float = 3.0
    max_iter: int = None
    tol: float = 1e-8
    prior_strength: float = None
    sigma2_init: float = None
    normalize: bool = True

    def __post_init__(self):
        check_fraction(self.w, "w")
        check_positive(self.beta, "beta")
        check_positive(self.lambda_cpd, "lambda_cpd")
        check_positive(self.tol, "tol", allow_zero=True)
        if self.max_iter is not None and int(self.max_iter) < 1:
            raise ArgumentError("max_iter must be >= 1")
        if self.prior_strength is not None and not self.prior_strength >= 1:
            raise ArgumentError("prior_strength must be >= 1")
        if self.sigma2_init is not None:
            check_positive(self.sigma2_init, "sigma2_init")

    def iterations(self, variant):
        if self.max_iter is not None:
            return int(self.max_iter)
        return AFFINE_MAX_ITER if variant == "affine" else NONRIGID_MAX_ITER

    def gamma(self, has_priors):
        if self.prior_strength is not None:
            return float(self.prior_strength)
        return 10.0 if has_priors else 1.0


@dataclass
class EStep:
    P: np.ndarray
    outlier: np.ndarray
    objective: float


@dataclass
class CpdResult:
    """Outcome of a CPD run, in the caller's coordinates.

    ``B``/``t`` are set for the affine variant (``y -> B y + t``); ``W`` for the
    non-rigid one, where the displacement of centroid ``m`` is ``(G W)[m]``
    with ``G`` built on the normalised template (see ``normalization``).
    """

    deformed: np.ndarray
    sigma2: float
    log: list
    n_iter: int
    converged: bool
    degenerate: bool
    B: np.ndarray = None
    t: np.ndarray = None
    W: np.ndarray = None
    normalization: tuple = (np.zeros(3), 1.0)
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building blocks


def initial_sigma2(Y, X):
    """Standard CPD start: mean squared distance over all pairs, per dimension."""
    M, N = len(Y), len(X)
    return float(
        (N * (Y ** 2).sum() + M * (X ** 2).sum() - 2 * Y.sum(axis=0) @ X.sum(axis=0))
        / (D * M * N)
    )


def _log_mixing(M, N, priors, gamma):
    """Dense (N x M) log mixing weights, or None when uniform."""
    if priors is None or len(priors) == 0 or gamma == 1.0:
        return None
    pi = np.ones((N, M))
    pi[priors.dst, priors.src] = 1.0 + (gamma - 1.0) * priors.weight
    pi *= M / pi.sum(axis=1, keepdims=True)
    return np.log(pi)


def estep(Y, X, sigma2, w, priors=None, gamma=1.0):
    """Responsibilities of template centroids ``Y`` for target points ``X``.

    Returns an :class:`EStep` with ``P`` (M x N), the per-target outlier mass
    and the negative log-likelihood ``-sum_n log(sum_m pi_mn k_mn + c) +
    N D/2 log sigma2`` (constant terms dropped).
    """
    if not sigma2 > 0:
        raise ArgumentError(f"sigma2 must be positive, got {sigma2}")
    M, N = len(Y), len(X)
    if priors is not None:
        priors.check(M, N)
    logk = cdist(X, Y, "sqeuclidean") / (-2.0 * sigma2)
    logpi = _log_mixing(M, N, priors, gamma)
    if logpi is not None:
        logk = logk + logpi
    # shift by the row maximum and normalise the exponentials directly; going
    # through exp(logk - logden) loses ~eps*|logden| relative accuracy
    shift = logk.max(axis=1)
    if w > 0:
        logc = 1.5 * np.log(2 * np.pi * sigma2) + np.log(w / (1 - w)) + np.log(M / N)
        shift = np.maximum(shift, logc)
        c = np.exp(logc - shift)
    else:
        c = np.zeros(N)
    e = np.exp(logk - shift[:, None])
    den = e.sum(axis=1) + c
    P = (e / den[:, None]).T
    outlier = c / den
    logden = shift + np.log(den)
    objective = float(-logden.sum() + N * D / 2.0 * np.log(sigma2))
    return EStep(P, outlier, objective)


def mstep_affine(Y, X, P):
    """Closed-form affine M-step. Returns ``(B, t, sigma2)`` for ``y -> B y + t``."""
    P1 = P.sum(axis=1)
    Pt1 = P.sum(axis=0)
    Np = P1.sum()
    if not Np > 0:
        raise DegenerateGeometryError("total responsibility mass is zero")
    mu_x = X.T @ Pt1 / Np
    mu_y = Y.T @ P1 / Np
    Xh = X - mu_x
    Yh = Y - mu_y
    A = Xh.T @ P.T @ Yh
    YPY = (Yh * P1[:, None]).T @ Yh
    if np.linalg.cond(YPY) > 1e12:
        raise DegenerateGeometryError("weighted template covariance is rank deficient")
    B = linalg.solve(YPY, A.T, assume_a="pos").T
    t = mu_x - B @ mu_y
    sigma2 = (np.einsum("n,ni,ni->", Pt1, Xh, Xh) - np.trace(A @ B.T)) / (Np * D)
    return B, t, float(sigma2)


def gaussian_kernel(Y, beta):
    return np.exp(cdist(Y, Y, "sqeuclidean") / (-2.0 * beta * beta))


def mstep_nonrigid(Y, X, P, G, lambda_cpd, sigma2, diagnostics=None):
    """Non-rigid M-step.

    Solves ``(G + lambda sigma2 d(P1)^-1) W = d(P1)^-1 P X - Y`` and updates
    ``sigma2`` from the residuals of ``T = Y + G W``. Centroids with no mass get
    their ``P1`` floored; a failed Cholesky gets a ``1e-9`` trace-scaled ridge.
    Both events are counted in ``diagnostics`` when a dict is supplied.
    """
    M = len(Y)
    P1 = P.sum(axis=1)
    Pt1 = P.sum(axis=0)
    Np = P1.sum()
    if not Np > 0:
        raise DegenerateGeometryError("total responsibility mass is zero")
    floor = 1e-12 * P1.max()
    low = P1 <= floor
    if low.any():
        P1 = np.maximum(P1, floor)
        if diagnostics is not None:
            diagnostics["p1_floored"] = diagnostics.get("p1_floored", 0) + int(low.sum())
    PX = P @ X
    A = G + np.diag(lambda_cpd * sigma2 / P1)
    rhs = PX / P1[:, None] - Y
    try:
        W = linalg.cho_solve(linalg.cho_factor(A, lower=True), rhs)
    except linalg.LinAlgError:
        ridge = 1e-9 * np.trace(A) / M
        W = linalg.solve(A + ridge * np.eye(M), rhs, assume_a="sym")
        if diagnostics is not None:
            diagnostics["ridge"] = diagnostics.get("ridge", 0) + 1
    T = Y + G @ W
    P1 = P.sum(axis=1)
    sigma2_new = (
        np.einsum("n,ni,ni->", Pt1, X, X) - 2 * np.einsum("mi,mi->", PX, T)
        + np.einsum("m,mi,mi->", P1, T, T)
    ) / (Np * D)
    return W, float(sigma2_new)


# ---------------------------------------------------------------------------
# Drivers


def _normalization(X, enabled):
    if not enabled:
        return np.zeros(3), 1.0
    mu = X.mean(axis=0)
    scale = float(np.sqrt(((X - mu) ** 2).sum(axis=1).mean()))
    return mu, (scale if scale > 0 else 1.0)


def _argmax_change(P, prev):
    best = P.argmax(axis=1)
    changed = int((best != prev).sum()) if prev is not None else int(len(best))
    return best, changed


def _sigma_floor(Xn):
    ext = Xn.max(axis=0) - Xn.min(axis=0)
    return DEGENERATE_SIGMA2 * float(ext @ ext)


def _run_em(variant, Y, X, cfg, priors):
    Y = check_points(Y, "template points", min_points=1)
    X = check_points(X, "target points", min_points=1)
    mu, s = _normalization(X, cfg.normalize)
    Yn = (Y - mu) / s
    Xn = (X - mu) / s
    M, N = len(Yn), len(Xn)
    gamma = cfg.gamma(priors is not None and len(priors) > 0)
    sigma2 = cfg.sigma2_init / s ** 2 if cfg.sigma2_init is not None else initial_sigma2(Yn, Xn)
    floor = _sigma_floor(Xn)
    diagnostics = {}
    log = []
    T = Yn.copy()
    B, t = np.eye(3), np.zeros(3)
    W = np.zeros((M, 3))
    G = gaussian_kernel(Yn, cfg.beta) if variant == "nonrigid" else None
    prev_obj = None
    prev_best = None
    converged = degenerate = False
    n_iter = 0
    if not sigma2 > floor:
        degenerate = True
        max_iter = 0
    else:
        max_iter = cfg.iterations(variant)
    for it in range(max_iter + 1):
        es = estep(T, Xn, sigma2, cfg.w, priors, gamma)
        obj = es.objective
        if variant == "nonrigid":
            obj += 0.5 * cfg.lambda_cpd * float(np.einsum("mi,mi->", W, G @ W))
        prev_best, changed = _argmax_change(es.P, prev_best)
        log.append(dict(iter=it, sigma2=sigma2 * s * s, objective=obj, corr_changed=changed))
        if prev_obj is not None and abs(prev_obj - obj) <= cfg.tol * abs(obj):
            converged = True
            break
        if it == max_iter:
            break
        prev_obj = obj
        if variant == "affine":
            B_new, t_new, sigma2_new = mstep_affine(Yn, Xn, es.P)
            T_new = Yn @ B_new.T + t_new
        else:
            W_new, sigma2_new = mstep_nonrigid(Yn, Xn, es.P, G, cfg.lambda_cpd, sigma2, diagnostics)
            T_new = Yn + G @ W_new
        n_iter += 1
        if not sigma2_new > floor:
            # keep the last state with a usable variance
            degenerate = True
            if variant == "affine":
                B, t = B_new, t_new
            else:
                W = W_new
            T = T_new
            sigma2 = max(sigma2_new, floor)
            break
        if variant == "affine":
            B, t = B_new, t_new
        else:
            W = W_new
        T = T_new
        sigma2 = sigma2_new
    deformed = T * s + mu
    res = CpdResult(
        deformed=deformed,
        sigma2=sigma2 * s * s,
        log=log,
        n_iter=n_iter,
        converged=converged,
        degenerate=degenerate,
        normalization=(mu, s),
        diagnostics=diagnostics,
    )
    if variant == "affine":
        res.B = B
        res.t = s * t + mu - B @ mu
    else:
        res.W = W * s
    return res


def cpd_affine(Y, X, cfg=None):
    """Affine CPD of template points ``Y`` onto target points ``X``."""
    cfg = cfg or CpdConfig()
    return _run_em("affine", Y, X, cfg, None)


def cpd_nonrigid(Y, X, cfg=None, priors=None):
    """Non-rigid (motion-coherent) CPD with optional correspondence priors.

    ``priors`` maps template indices (``src``) to target indices (``dst``).
    """
    cfg = cfg or CpdConfig()
    return _run_em("nonrigid", Y, X, cfg, priors)


def iteration_log_csv(log):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "sigma2", "objective", "corr_changed"])
    for row in log:
        writer.writerow([row["iter"], repr(row["sigma2"]), repr(row["objective"]), row["corr_changed"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Estimators


class AffineCPD(TransformerMixin, BaseEstimator):
    """Affine CPD as a transformer: ``fit(template, target)``, ``transform(points)``."""

    def __init__(self, w=0.1, max_iter=AFFINE_MAX_ITER, tol=1e-8, normalize=True):
        self.w = w
        self.max_iter = max_iter
        self.tol = tol
        self.normalize = normalize

    def fit(self, X, y):
        cfg = CpdConfig(w=self.w, max_iter=self.max_iter, tol=self.tol, normalize=self.normalize)
        res = cpd_affine(X, y, cfg)
        self.B_, self.t_, self.sigma2_ = res.B, res.t, res.sigma2
        self.n_iter_ = res.n_iter
        self.result_ = res
        return self

    def transform(self, X):
        check_is_fitted(self, "B_")
        return check_points(X, "X") @ self.B_.T + self.t_


class NonrigidCPD(TransformerMixin, BaseEstimator):
    """Motion-coherent CPD; ``transform`` evaluates the fitted displacement field."""

    def __init__(self, w=0.1, beta=2.0, lambda_cpd=3.0, max_iter=NONRIGID_MAX_ITER,
                 tol=1e-8, prior_strength=None, normalize=True):
        self.w = w
        self.beta = beta
        self.lambda_cpd = lambda_cpd
        self.max_iter = max_iter
        self.tol = tol
        self.prior_strength = prior_strength
        self.normalize = normalize

    def fit(self, X, y, priors=None):
        cfg = CpdConfig(w=self.w, beta=self.beta, lambda_cpd=self.lambda_cpd,
                        max_iter=self.max_iter, tol=self.tol,
                        prior_strength=self.prior_strength, normalize=self.normalize)
        X = check_points(X, "X")
        res = cpd_nonrigid(X, y, cfg, priors)
        mu, s = res.normalization
        self.centroids_ = (X - mu) / s
        self.W_ = res.W
        self.sigma2_ = res.sigma2
        self.n_iter_ = res.n_iter
        self.result_ = res
        self.normalization_ = res.normalization
        return self

    def transform(self, X):
        check_is_fitted(self, "W_")
        X = check_points(X, "X")
        mu, s = self.normalization_
        G = np.exp(cdist((X - mu) / s, self.centroids_, "sqeuclidean") / (-2.0 * self.beta ** 2))
        return X + G @ self.W_


__all__ = [
    "AffineCPD",
    "CpdConfig",
    "CpdResult",
    "Correspondences",
    "NonrigidCPD",
    "cpd_affine",
    "cpd_nonrigid",
    "estep",
    "gaussian_kernel",
    "mstep_affine",
    "mstep_nonrigid",
    "replace",
]
