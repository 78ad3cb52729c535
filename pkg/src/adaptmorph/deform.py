"""Laplace-Beltrami regularised deformations.

Three solvers share the cotangent Laplacian ``L``:

* :func:`lb_soft_solve` minimises ``||lam L (X - X_ref)||^2 + ||S X - targets||^2``.
  Template adaptation and the final projection onto the scan are both
  instances of it, differing only in where the constraints come from.
* :func:`arap_deform` runs the as-rigid-as-possible local/global iteration
  with hard positional constraints.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from ._validation import check_indices, check_positive
from .errors import ArgumentError, DataError, ProjectionError, SolverError
from .mesh import TriMesh, cotangent_laplacian, cotangent_weights, mutual_nearest_neighbors
from .rigid import PART_LABELS, procrustes

DEFAULT_LAMBDA = 0.1
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SoftConstraintSystem:
    laplacian: sparse.spmatrix
    constrained_indices: np.ndarray
    targets: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        L = sparse.csr_matrix(self.laplacian)
        p = L.shape[0]
        if L.shape != (p, p):
            raise ArgumentError("laplacian must be square")
        idx = check_indices(self.constrained_indices, p, "constrained_indices", unique=True)
        tgt = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(tgt) != idx.size:
            raise ArgumentError("one target row per constrained index required")
        if not np.all(np.isfinite(tgt)):
            raise ArgumentError("targets contain non-finite values")
        object.__setattr__(self, "laplacian", L)
        object.__setattr__(self, "constrained_indices", idx)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "lam", check_positive(self.lam, "lambda"))

    def selection(self):
        l = self.constrained_indices.size
        p = self.laplacian.shape[0]
        return sparse.csr_matrix(
            (np.ones(l), (np.arange(l), self.constrained_indices)), shape=(l, p)
        )

    def objective(self, X, X_ref):
        """Value of the stacked least-squares objective at ``X``."""
        X = np.asarray(X, dtype=np.float64)
        lap = self.lam * (self.laplacian @ (X - X_ref))
        pos = X[self.constrained_indices] - self.targets
        return float((lap ** 2).sum() + (pos ** 2).sum())


def _check_components_constrained(mesh, constrained):
    labels = mesh.components()
    hit = np.zeros(labels.max() + 1, dtype=bool)
    hit[labels[constrained]] = True
    if not hit.all():
        comp = int(np.flatnonzero(~hit)[0])
        members = np.flatnonzero(labels == comp)
        raise SolverError(
            f"mesh component {comp} ({members.size} vertices, first vertex "
            f"{int(members[0])}) has no constraint; the system is singular"
        )


def _spd_solve(A, rhs):
    """Solve a sparse symmetric positive-definite system with a backward-error check."""
    A = sparse.csc_matrix(A)
    try:
        lu = splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from None
    x = lu.solve(rhs)
    res = np.linalg.norm(A @ x - rhs)
    scale = sparse.linalg.norm(A, 1) * np.linalg.norm(x) + np.linalg.norm(rhs)
    if scale > 0 and not res <= RESIDUAL_TOL * scale:
        raise SolverError(f"normal-equation residual {res / scale:.3e} exceeds {RESIDUAL_TOL}")
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values")
    return x


def lb_soft_solve(mesh, constraints):
    """Soft-constrained Laplacian editing of ``mesh``.

    Solves the normal equations of ``[lam L; S] X = [lam L X_ref; targets]``
    in displacement form, ``(lam^2 L^T L + S^T S) D = S^T (targets - S X_ref)``,
    which is algebraically identical and better conditioned for large ``lam``.
    """
    X_ref = mesh.vertices
    if constraints.laplacian.shape[0] != len(X_ref):
        raise ArgumentError("laplacian size does not match the mesh")
    idx = constraints.constrained_indices
    if idx.size == 0:
        raise ArgumentError("at least one constraint is required")
    _check_components_constrained(mesh, idx)
    L = constraints.laplacian
    S = constraints.selection()
    lam2 = constraints.lam ** 2
    N = lam2 * (L.T @ L) + S.T @ S
    rhs = S.T @ (constraints.targets - X_ref[idx])
    return mesh.with_vertices(X_ref + _spd_solve(N, rhs))


# ---------------------------------------------------------------------------
# ARAP


def _neighbor_lists(edges, weights):
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    w = np.concatenate([weights, weights])
    return i, j, w


def fit_rotations(reference, deformed, edges, weights):
    """Best per-vertex rotations for the one-ring edge sets (det forced to +1)."""
    p = len(reference)
    i, j, w = _neighbor_lists(edges, weights)
    e = reference[i] - reference[j]
    ed = deformed[i] - deformed[j]
    cov = np.zeros((p, 3, 3))
    np.add.at(cov, i, w[:, None, None] * e[:, :, None] * ed[:, None, :])
    U, _, Vt = np.linalg.svd(cov)
    R = np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))
    flip = np.linalg.det(R) < 0
    if flip.any():
        U = U.copy()
        U[flip, :, 2] *= -1
        R[flip] = np.transpose(Vt[flip], (0, 2, 1)) @ np.transpose(U[flip], (0, 2, 1))
    return R


def arap_energy(reference, deformed, edges, weights, rotations):
    """``sum_i sum_{j in N(i)} w_ij ||(p'_i - p'_j) - R_i (p_i - p_j)||^2`` (cell weights 1)."""
    i, j, w = _neighbor_lists(edges, weights)
    r = (deformed[i] - deformed[j]) - np.einsum("kab,kb->ka", rotations[i], reference[i] - reference[j])
    return float((w * (r ** 2).sum(axis=1)).sum())


def arap_rhs(reference, edges, weights, rotations):
    """Right-hand side ``b_i = sum_j w_ij/2 (R_i + R_j)(p_i - p_j)``."""
    i, j, w = _neighbor_lists(edges, weights)
    Rs = rotations[i] + rotations[j]
    contrib = 0.5 * w[:, None] * np.einsum("kab,kb->ka", Rs, reference[i] - reference[j])
    b = np.zeros_like(reference)
    np.add.at(b, i, contrib)
    return b


class _HardConstraintSolver:
    """Factorised ``L`` with constrained rows and columns eliminated."""

    def __init__(self, L, constrained, n):
        self.n = n
        self.constrained = constrained
        mask = np.ones(n, dtype=bool)
        mask[constrained] = False
        self.free = np.flatnonzero(mask)
        L = sparse.csr_matrix(L)
        self.L_ff = L[self.free][:, self.free].tocsc()
        self.L_fc = L[self.free][:, constrained]
        self.lu = splu(
            self.L_ff,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )

    def solve(self, b, targets):
        out = np.empty((self.n, 3))
        out[self.constrained] = targets
        if self.free.size:
            rhs = b[self.free] - self.L_fc @ targets
            x = self.lu.solve(rhs)
            res = np.linalg.norm(self.L_ff @ x - rhs)
            scale = sparse.linalg.norm(self.L_ff, 1) * np.linalg.norm(x) + np.linalg.norm(rhs)
            if scale > 0 and not res <= RESIDUAL_TOL * scale:
                raise SolverError(f"ARAP global step residual {res / scale:.3e} too large")
            out[self.free] = x
        return out


def arap_global_step(mesh, rotations, constrained_indices, targets, laplacian=None):
    """One global ARAP solve ``L p' = b`` with constrained vertices substituted."""
    idx = check_indices(constrained_indices, mesh.n_vertices, "constrained_indices", unique=True)
    edges, w = cotangent_weights(mesh)
    L = cotangent_laplacian(mesh) if laplacian is None else laplacian
    _check_components_constrained(mesh, idx)
    b = arap_rhs(mesh.vertices, edges, w, rotations)
    return _HardConstraintSolver(L, idx, mesh.n_vertices).solve(b, np.asarray(targets, float).reshape(-1, 3))


def arap_deform(mesh, constrained_indices, targets, iterations=10, return_energies=False):
    """As-rigid-as-possible deformation with hard positional constraints.

    Each iteration solves the global system with the current rotations and
    then refits the rotations to the result. Rotations start at identity.

    Returns
    -------
    TriMesh, or (TriMesh, list of float) when ``return_energies`` is set. The
    energy list holds the ARAP energy after each iteration, evaluated with the
    rotations refitted to that iterate.
    """
    idx = check_indices(constrained_indices, mesh.n_vertices, "constrained_indices", unique=True)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if idx.size < 3:
        raise ArgumentError("ARAP needs at least 3 constrained vertices")
    if len(targets) != idx.size:
        raise ArgumentError("one target per constrained vertex required")
    if int(iterations) < 1:
        raise ArgumentError("iterations must be >= 1")
    _check_components_constrained(mesh, idx)
    P = mesh.vertices
    edges, w = cotangent_weights(mesh)
    L = cotangent_laplacian(mesh)
    solver = _HardConstraintSolver(L, idx, mesh.n_vertices)
    R = np.broadcast_to(np.eye(3), (mesh.n_vertices, 3, 3)).copy()
    energies = []
    X = P
    for _ in range(int(iterations)):
        X = solver.solve(arap_rhs(P, edges, w, R), targets)
        R = fit_rotations(P, X, edges, w)
        energies.append(arap_energy(P, X, edges, w, R))
    out = mesh.with_vertices(X)
    return (out, energies) if return_energies else out


# ---------------------------------------------------------------------------
# Template adaptation and projection


def part_groups(lm, parts=None):
    """Resolve the part -> landmark-ordinal mapping for ``lm``."""
    if parts is None:
        parts = lm.parts()
    groups = {}
    for label, ordinals in parts.items():
        ordinals = [int(k) for k in ordinals]
        for k in ordinals:
            if not 0 <= k < len(lm):
                raise ArgumentError(f"part {label!r}: landmark ordinal {k} out of range")
        groups[label] = ordinals
    return groups


def adapt_template_lb(template, lm, parts=None, lam=DEFAULT_LAMBDA):
    """Adapt ``template`` to a scan's landmark layout by per-part rigid fits.

    Each part's template landmarks are rigidly (no scale) aligned to the scan
    landmarks of that part; the aligned landmark positions become soft
    constraints of :func:`lb_soft_solve`.
    """
    lm.check(template)
    groups = part_groups(lm, parts)
    src = lm.template_points(template)
    idx, tgt = [], []
    for label, ordinals in groups.items():
        if len(ordinals) < 3:
            raise ArgumentError(
                f"part {label!r} has {len(ordinals)} landmarks; at least 3 are required"
            )
        T = procrustes(src[ordinals], lm.scan_points[ordinals], with_scale=False)
        idx.extend(lm.template_indices[ordinals].tolist())
        tgt.append(T.apply(src[ordinals]))
    if len(set(idx)) != len(idx):
        raise ArgumentError("a template landmark vertex is assigned to more than one part")
    system = SoftConstraintSystem(cotangent_laplacian(template), idx, np.vstack(tgt), lam)
    return lb_soft_solve(template, system)


def lbrp_project(deformed, scan, lam=DEFAULT_LAMBDA, return_pairs=False):
    """Project a deformed template onto the scan under Laplacian regularisation.

    Position constraints come from mutual nearest neighbours between the
    deformed template and the scan vertices.
    """
    pairs = mutual_nearest_neighbors(deformed.vertices, scan.vertices)
    if len(pairs) == 0:
        raise ProjectionError("no mutual nearest neighbours; meshes are too far apart")
    system = SoftConstraintSystem(
        cotangent_laplacian(deformed), pairs.src, scan.vertices[pairs.dst], lam
    )
    out = lb_soft_solve(deformed, system)
    return (out, pairs) if return_pairs else out


def parse_parts(text):
    """Parse ``label index`` lines into ``{label: [landmark ordinals]}``."""
    parts = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 2:
            raise DataError(f"parts line {lineno}: expected 'label index'")
        try:
            k = int(tok[1])
        except ValueError:
            raise DataError(f"parts line {lineno}: bad landmark ordinal {tok[1]!r}") from None
        parts.setdefault(tok[0], []).append(k)
    return parts


def load_parts(path):
    return parse_parts(Path(path).read_text())


def format_parts(parts):
    return "".join(f"{label} {k}\n" for label, ks in parts.items() for k in ks)


__all__ = [
    "DEFAULT_LAMBDA",
    "PART_LABELS",
    "SoftConstraintSystem",
    "TriMesh",
    "adapt_template_lb",
    "arap_deform",
    "arap_energy",
    "arap_global_step",
    "fit_rotations",
    "lb_soft_solve",
    "lbrp_project",
    "parse_parts",
]
