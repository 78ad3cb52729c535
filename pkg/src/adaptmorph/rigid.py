"""Landmark-driven rigid and similarity alignment."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_indices, check_points
from .errors import ArgumentError, DataError, DegenerateGeometryError
from .mesh import TriMesh

PART_LABELS = ("eyes", "nose", "mouth", "left_ear", "right_ear", "other")


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ArgumentError(f"scale must be positive, got {self.scale}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(R) - 1) > 1e-8:
            raise ArgumentError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        s = 1.0 / self.scale
        return SimilarityTransform(Rt, -s * Rt @ self.translation, s)

    def compose(self, other):
        """``self ∘ other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True, eq=False)
class LandmarkSpec:
    """Ordered template vertex indices paired with scan-space points."""

    template_indices: np.ndarray
    scan_points: np.ndarray
    part_labels: tuple = None

    def __post_init__(self):
        idx = np.asarray(self.template_indices, dtype=np.int64).ravel()
        pts = np.asarray(self.scan_points, dtype=np.float64).reshape(-1, 3)
        if idx.size != len(pts):
            raise ArgumentError(
                f"{idx.size} template landmarks but {len(pts)} scan landmarks"
            )
        labels = self.part_labels
        if labels is not None:
            labels = tuple(str(x) for x in labels)
            if len(labels) != idx.size:
                raise ArgumentError("part_labels length differs from landmark count")
        object.__setattr__(self, "template_indices", idx)
        object.__setattr__(self, "scan_points", pts)
        object.__setattr__(self, "part_labels", labels)

    def __len__(self):
        return self.template_indices.size

    def check(self, template):
        check_indices(self.template_indices, template.n_vertices, "template landmark indices")
        check_points(self.scan_points, "scan landmarks")
        return self

    def template_points(self, template):
        return template.vertices[self.template_indices]

    def transformed(self, T):
        return LandmarkSpec(self.template_indices, T.apply(self.scan_points), self.part_labels)

    def parts(self):
        """Mapping label -> list of landmark ordinals (insertion ordered)."""
        labels = self.part_labels or ("other",) * len(self)
        out = {}
        for k, lab in enumerate(labels):
            out.setdefault(lab, []).append(k)
        return out


def procrustes(src, dst, with_scale=False, weights=None):
    """Least-squares similarity (or rigid) transform taking ``src`` onto ``dst``.

    Minimises ``sum_i w_i ||s R src_i + t - dst_i||^2`` in closed form from the
    SVD of the weighted cross-covariance, with the reflection case corrected
    so that ``det(R) = +1``.
    """
    src = check_points(src, "src", min_points=3)
    dst = check_points(dst, "dst", min_points=3)
    if len(src) != len(dst):
        raise ArgumentError("src and dst must have the same number of points")
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.size != len(src) or np.any(w < 0) or w.sum() <= 0:
            raise ArgumentError("weights must be non-negative with positive sum")
        w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    A = src - mu_s
    B = dst - mu_d
    H = (A * w[:, None]).T @ B
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateGeometryError(
            "landmarks are collinear or coincident; rotation is not determined"
        )
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    if with_scale:
        var_s = (w * (A ** 2).sum(axis=1)).sum()
        s = float(np.trace(np.diag(S) @ D) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    # re-orthonormalise to remove rounding drift
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return SimilarityTransform(R, t, s)


def apply_transform(mesh, T):
    return TriMesh(T.apply(mesh.vertices), mesh.faces)


def align_scan_to_template(scan, lm, template, weights=None):
    """Rigidly move ``scan`` into the template frame using landmarks.

    Returns
    -------
    aligned_scan : TriMesh
    transform : SimilarityTransform
        scan frame -> template frame; ``transform.inverse()`` maps results back.
    aligned_landmarks : LandmarkSpec
        ``lm`` with its scan points moved by ``transform``.
    """
    lm.check(template)
    if len(lm) < 3:
        raise ArgumentError("rigid alignment needs at least 3 landmarks")
    T = procrustes(lm.scan_points, lm.template_points(template), with_scale=False, weights=weights)
    return apply_transform(scan, T), T, lm.transformed(T)


# ---------------------------------------------------------------------------
# Landmark files


def _content_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_template_landmarks(text):
    out = []
    for lineno, line in _content_lines(text):
        try:
            out.append(int(line.split()[0]))
        except ValueError:
            raise DataError(f"template landmarks line {lineno}: expected an integer index") from None
    return np.array(out, dtype=np.int64)


def parse_scan_landmarks(text):
    """Return ``(points, labels)``; ``labels`` is None when no line has a 4th token."""
    pts, labels = [], []
    for lineno, line in _content_lines(text):
        tok = line.split()
        if len(tok) < 3:
            raise DataError(f"scan landmarks line {lineno}: expected 'x y z [label]'")
        try:
            pts.append([float(t) for t in tok[:3]])
        except ValueError:
            raise DataError(f"scan landmarks line {lineno}: bad coordinate") from None
        labels.append(tok[3] if len(tok) > 3 else None)
    if any(lab is None for lab in labels):
        if any(lab is not None for lab in labels):
            raise DataError("scan landmarks: part labels must be given on every line or none")
        labels = None
    return np.array(pts, dtype=np.float64).reshape(-1, 3), labels


def load_landmarks(template_path, scan_path):
    idx = parse_template_landmarks(Path(template_path).read_text())
    pts, labels = parse_scan_landmarks(Path(scan_path).read_text())
    if idx.size != len(pts):
        raise DataError(
            f"landmark count mismatch: {idx.size} template vs {len(pts)} scan"
        )
    return LandmarkSpec(idx, pts, labels)


def format_template_landmarks(indices):
    return "".join(f"{int(i)}\n" for i in indices)


def format_scan_landmarks(points, labels=None):
    lines = []
    for k, (x, y, z) in enumerate(np.asarray(points, dtype=np.float64).tolist()):
        line = f"{x:.8f} {y:.8f} {z:.8f}"
        if labels is not None:
            line += f" {labels[k]}"
        lines.append(line)
    return "".join(line + "\n" for line in lines)
