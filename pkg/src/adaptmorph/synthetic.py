"""Procedural meshes and seeded synthetic registration cases."""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ArgumentError
from .mesh import TriMesh
from .rigid import LandmarkSpec, SimilarityTransform

# landmark anchors on the face, (x, y) in head millimetres, grouped by part
FACE_LANDMARKS = (
    ("eyes", (-48.0, 22.0)),
    ("eyes", (-17.0, 22.0)),
    ("eyes", (17.0, 22.0)),
    ("eyes", (48.0, 22.0)),
    ("nose", (0.0, 20.0)),
    ("nose", (0.0, -5.0)),
    ("nose", (-18.0, -17.0)),
    ("nose", (18.0, -17.0)),
    ("mouth", (-27.0, -45.0)),
    ("mouth", (0.0, -36.0)),
    ("mouth", (27.0, -45.0)),
    ("mouth", (0.0, -56.0)),
)


@lru_cache(maxsize=8)
def _icosphere(subdivisions):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def icosphere(subdivisions=3, radius=1.0):
    v, f = _icosphere(int(subdivisions))
    return TriMesh(v * radius, f)


def unit_sphere(subdivisions=3):
    return icosphere(subdivisions, 1.0)


def _bump(x, y, cx, cy, rx, ry):
    return np.exp(-(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2))


def neutral_head(subdivisions=3):
    """Stylised head (millimetres, face towards +z, up +y).

    An ellipsoid with nose, eye sockets, brow, lips, chin and ears added as
    smooth radial bumps. ``subdivisions=3`` gives 642 vertices, 4 gives 2562.
    """
    u, f = _icosphere(int(subdivisions))
    radii = np.array([75.0, 100.0, 95.0])
    base = u * radii
    x, y = base[:, 0], base[:, 1]
    front = np.clip(u[:, 2] / 0.35, 0.0, 1.0) ** 2
    h = front * (
        22.0 * _bump(x, y, 0.0, -3.0, 11.0, 22.0)
        - 9.0 * (_bump(x, y, -32.0, 22.0, 14.0, 11.0) + _bump(x, y, 32.0, 22.0, 14.0, 11.0))
        + 6.0 * _bump(x, y, 0.0, 38.0, 45.0, 8.0)
        + 7.0 * _bump(x, y, 0.0, -46.0, 24.0, 9.0)
        + 8.0 * _bump(x, y, 0.0, -78.0, 24.0, 14.0)
    )
    side = np.abs(u[:, 0])
    ear = 14.0 * np.exp(-(((y - 5.0) / 22.0) ** 2 + ((base[:, 2] + 5.0) / 14.0) ** 2)) * side ** 4
    # occiput bulge and tapered jaw/neck break the ellipsoid's symmetries
    occiput = 22.0 * np.exp(-((u - np.array([0.0, 0.45, -0.89])) ** 2).sum(axis=1) / 0.35)
    v = base + (h + ear + occiput)[:, None] * u
    low = np.clip(-u[:, 1] - 0.3, 0.0, None)
    v[:, 0] *= 1.0 - 0.45 * low
    v[:, 2] -= 25.0 * low * (1.0 - u[:, 2])
    return TriMesh(v, f)


def face_landmark_indices(mesh):
    """12 fixed face landmark vertices and their part labels.

    Each anchor picks the closest unused front-facing vertex in the x-y plane.
    The anchor layout is arbitrary but fixed.
    """
    v = mesh.vertices
    c = v.mean(axis=0)
    ext = v.max(axis=0) - v.min(axis=0)
    # anchors are in head millimetres; rescale for other meshes
    sx, sy = ext[0] / 150.0, ext[1] / 200.0
    front = np.flatnonzero(v[:, 2] - c[2] > 0.2 * ext[2])
    used = set()
    idx, labels = [], []
    for label, (ax, ay) in FACE_LANDMARKS:
        d = (v[front, 0] - c[0] - ax * sx) ** 2 + (v[front, 1] - c[1] - ay * sy) ** 2
        for k in np.argsort(d, kind="stable"):
            cand = int(front[k])
            if cand not in used:
                used.add(cand)
                idx.append(cand)
                labels.append(label)
                break
    return np.array(idx, dtype=np.int64), tuple(labels)


def bar_mesh(length=5.0, width=1.0, n_long=20, n_wide=4):
    """Closed rectangular bar along +z, triangulated on its six faces."""
    xs = np.linspace(-width / 2, width / 2, n_wide + 1)
    zs = np.linspace(0.0, length, n_long + 1)
    index = {}
    verts = []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    faces = []

    def quad_grid(origin, du, dv, nu, nv, flip):
        for a in range(nu):
            for b in range(nv):
                p00 = vid(origin + du[a] + dv[b])
                p10 = vid(origin + du[a + 1] + dv[b])
                p01 = vid(origin + du[a] + dv[b + 1])
                p11 = vid(origin + du[a + 1] + dv[b + 1])
                tris = [(p00, p10, p11), (p00, p11, p01)]
                if flip:
                    tris = [(t[0], t[2], t[1]) for t in tris]
                faces.extend(tris)

    h = width / 2
    ex, ey, ez = np.eye(3)
    U = [x * ex for x in xs]
    V = [y * ey for y in xs]
    Z = [z * ez for z in zs]
    quad_grid(np.array([0, -h, 0.0]), U, Z, n_wide, n_long, True)
    quad_grid(np.array([0, h, 0.0]), U, Z, n_wide, n_long, False)
    quad_grid(np.array([-h, 0, 0.0]), V, Z, n_wide, n_long, False)
    quad_grid(np.array([h, 0, 0.0]), V, Z, n_wide, n_long, True)
    quad_grid(np.zeros(3), U, V, n_wide, n_wide, True)
    quad_grid(np.array([0, 0, length]), U, V, n_wide, n_wide, False)
    return TriMesh(np.array(verts), np.array(faces))


def grid_mesh(n=10, spacing=1.0):
    """Planar ``(n+1) x (n+1)`` grid in z=0, each square split along one diagonal."""
    g = np.arange(n + 1) * spacing
    X, Y = np.meshgrid(g, g, indexing="ij")
    v = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + n + 1
            faces += [(a, b, b + 1), (a, b + 1, a + 1)]
    return TriMesh(v, np.array(faces))


# ---------------------------------------------------------------------------
# Synthetic cases


@dataclass(frozen=True)
class SyntheticSpec:
    """Perturbation magnitudes, as fractions of the template bbox diagonal.

    ``warp`` is the mean displacement norm of the smooth field and
    ``warp_length`` its correlation length; ``occlusion`` is the fraction of
    scan vertices cropped from the back of the head.

    The default ``warp_length`` of 0.8 roughly matches the coherence length of
    non-rigid CPD at its default ``beta`` on head-shaped data, i.e. the warp
    is smooth in the sense CPD's motion prior models.
    """

    part_shift: float = 0.0
    warp: float = 0.0
    warp_length: float = 0.8
    noise: float = 0.0
    occlusion: float = 0.0
    rotation_deg: float = 0.0

    def __post_init__(self):
        for name in ("part_shift", "warp", "noise", "rotation_deg"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be >= 0")
        if not 0 < self.warp_length:
            raise ArgumentError("warp_length must be > 0")
        if not 0 <= self.occlusion < 0.5:
            raise ArgumentError("occlusion must be in [0, 0.5)")


@dataclass
class SyntheticCase:
    template: TriMesh
    scan: TriMesh
    truth: np.ndarray
    landmarks: LandmarkSpec
    parts: dict
    scan_to_template: np.ndarray
    part_offsets: dict = field(default_factory=dict)

    def template_landmarks(self):
        """Landmarks whose scan points are the template's own landmark positions."""
        lm = self.landmarks
        return LandmarkSpec(lm.template_indices, self.template.vertices[lm.template_indices], lm.part_labels)


def smooth_field(points, rng, length, n_features=256):
    """Draw a smooth vector field from a Gaussian-kernel GP (random Fourier features).

    Kernel ``exp(-r^2 / length^2)``; each component has unit prior variance.
    """
    omega = rng.normal(scale=np.sqrt(2.0) / length, size=(n_features, 3))
    phase = rng.uniform(0.0, 2 * np.pi, size=n_features)
    amp = rng.normal(size=(n_features, 3))
    feats = np.sqrt(2.0 / n_features) * np.cos(points @ omega.T + phase)
    return feats @ amp


def _part_weight(points, anchors, core, falloff):
    d = np.sqrt(((points[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    return np.exp(-0.5 * (np.maximum(d - core, 0.0) / falloff) ** 2)


def _pose_neutral_offsets(rng, landmarks, parts, magnitude):
    """Per-part translations with no net (linearised) rigid motion on the landmarks.

    Shifting whole parts otherwise tilts the landmark-based rigid alignment;
    offsets are drawn from the null space of the net-translation and
    net-torque constraints and scaled to a mean norm of ``magnitude``.
    """
    labels = list(parts)
    c = landmarks.mean(axis=0)
    A = np.zeros((6, 3 * len(labels)))
    for j, label in enumerate(labels):
        pts = landmarks[parts[label]] - c
        A[:3, 3 * j:3 * j + 3] = len(pts) * np.eye(3)
        sx, sy, sz = pts.sum(axis=0)
        A[3:, 3 * j:3 * j + 3] = [[0, -sz, sy], [sz, 0, -sx], [-sy, sx, 0]]
    _, sv, Vt = np.linalg.svd(A)
    rank = int((sv > 1e-9 * sv[0]).sum())
    null = Vt[rank:].T
    if null.shape[1] == 0:
        return {label: np.zeros(3) for label in labels}
    o = (null @ rng.normal(size=null.shape[1])).reshape(-1, 3)
    o *= magnitude / np.linalg.norm(o, axis=1).mean()
    return {label: o[j] for j, label in enumerate(labels)}


def make_synthetic_case(seed, spec=None, base="head", subdivisions=3):
    """Seeded template/scan pair with exact ground-truth correspondence.

    The scan is the template moved by a smooth GP-sampled warp plus
    per-part translations (with smooth falloff), then optionally rotated,
    vertex-noised and cropped. ``truth[i]`` is the noise-free scan-space
    position of template vertex ``i``.
    """
    spec = spec or SyntheticSpec()
    if base == "head":
        template = neutral_head(subdivisions)
    elif base == "sphere":
        template = unit_sphere(subdivisions)
    else:
        raise ArgumentError(f"unknown base mesh {base!r}")
    rng = np.random.default_rng(seed)
    V = template.vertices
    diag = template.bbox_diagonal()
    lm_idx, labels = face_landmark_indices(template)
    parts = {}
    for k, lab in enumerate(labels):
        parts.setdefault(lab, []).append(k)

    truth = V.copy()
    if spec.warp > 0:
        u = smooth_field(V, rng, spec.warp_length * diag)
        u *= spec.warp * diag / np.linalg.norm(u, axis=1).mean()
        truth = truth + u
    offsets = {}
    if spec.part_shift > 0:
        offsets = _pose_neutral_offsets(rng, V[lm_idx], parts, spec.part_shift * diag)
        for label, ordinals in parts.items():
            w = _part_weight(V, V[lm_idx[ordinals]], 0.03 * diag, 0.05 * diag)
            truth = truth + w[:, None] * offsets[label]
    if spec.rotation_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = np.deg2rad(spec.rotation_deg)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
        c = truth.mean(axis=0)
        truth = SimilarityTransform(R, c - R @ c).apply(truth)

    scan_v = truth.copy()
    if spec.noise > 0:
        scan_v = scan_v + rng.normal(scale=spec.noise * diag, size=scan_v.shape)
    keep = np.arange(len(V))
    faces = template.faces
    if spec.occlusion > 0:
        n_drop = int(round(spec.occlusion * len(V)))
        order = np.argsort(V[:, 2], kind="stable")
        mask = np.ones(len(V), dtype=bool)
        mask[order[:n_drop]] = False
        mask[lm_idx] = True
        keep = np.flatnonzero(mask)
        remap = -np.ones(len(V), dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        faces = remap[faces[mask[faces].all(axis=1)]]
        scan_v = scan_v[keep]
    scan = TriMesh(scan_v, faces)
    lm = LandmarkSpec(lm_idx, truth[lm_idx], labels)
    return SyntheticCase(template, scan, truth, lm, parts, keep, offsets)
