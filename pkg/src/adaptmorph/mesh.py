"""Triangle meshes, OBJ I/O, the cotangent Laplacian and exact nearest-neighbour queries."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._validation import check_points
from .errors import (
    ArgumentError,
    DegenerateGeometryError,
    MeshStructureError,
    ObjParseError,
)

COT_WEIGHT_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (p, 3)
        Vertex positions.
    faces : array_like, shape (m, 3)
        0-based vertex indices, one row per triangle.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshStructureError(f"vertices must have shape (p, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshStructureError(f"faces must have shape (m, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshStructureError("vertex matrix contains non-finite values")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshStructureError(
                    f"face index out of range for {len(v)} vertices"
                )
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if bad.any():
                raise MeshStructureError(
                    f"degenerate face {int(np.flatnonzero(bad)[0])}: repeated vertex index"
                )
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def with_vertices(self, vertices):
        """Same connectivity, new positions."""
        return TriMesh(vertices, self.faces)

    def bbox_diagonal(self):
        v = self.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0))) if len(v) else 0.0

    def edges(self):
        """Unique undirected edges as a sorted (e, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def components(self):
        """Connected-component label per vertex (isolated vertices get their own)."""
        p = self.n_vertices
        e = self.edges()
        adj = sparse.coo_matrix(
            (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(p, p)
        )
        _, labels = connected_components(adj, directed=False)
        return labels

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.faces, other.faces
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Index pairs ``src -> dst`` with a non-negative weight per pair."""

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).ravel()
        dst = np.asarray(self.dst, dtype=np.int64).ravel()
        w = np.asarray(self.weight, dtype=np.float64).ravel()
        if w.size == 1 and src.size != 1:
            w = np.full(src.size, float(w[0]))
        if not (src.size == dst.size == w.size):
            raise ArgumentError("src, dst and weight must have equal length")
        if not np.all(np.isfinite(w)) or (w.size and w.min() < 0):
            raise ArgumentError("weights must be finite and non-negative")
        if np.unique(src).size != src.size:
            raise ArgumentError("duplicate src index in correspondence set")
        for a in (src, dst, w):
            a.setflags(write=False)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        cols = list(zip(*pairs))
        weight = cols[2] if len(cols) > 2 else np.ones(len(pairs))
        return cls(cols[0], cols[1], weight)

    def __len__(self):
        return self.src.size

    def pairs(self):
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def check(self, n_src, n_dst):
        if len(self) and (self.src.max() >= n_src or self.dst.max() >= n_dst
                          or self.src.min() < 0 or self.dst.min() < 0):
            raise ArgumentError("correspondence index out of range")
        return self

    def remap_dst(self, mapping):
        """Return a copy with ``dst`` replaced by ``mapping[dst]``."""
        return Correspondences(self.src, np.asarray(mapping)[self.dst], self.weight)


# ---------------------------------------------------------------------------
# OBJ


def parse_obj(data):
    """Parse an ASCII Wavefront OBJ byte stream into a :class:`TriMesh`.

    Only ``v`` and ``f`` records are used. Texture coordinates, normals,
    groups and material statements are accepted and ignored. Polygonal faces
    are fan-triangulated; negative (relative) indices are resolved.
    """
    if isinstance(data, (bytes, bytearray)):
        text = data.decode("ascii", errors="strict")
    else:
        text = str(data)
    verts = []
    faces = []
    face_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) < 4:
                raise ObjParseError("vertex record needs 3 coordinates", lineno)
            try:
                verts.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {raw.strip()!r}", lineno) from None
        elif tag == "f":
            if len(tokens) < 4:
                raise ObjParseError("face record needs at least 3 vertices", lineno)
            idx = []
            for tok in tokens[1:]:
                head = tok.split("/", 1)[0]
                try:
                    k = int(head)
                except ValueError:
                    raise ObjParseError(f"bad face index {tok!r}", lineno) from None
                if k == 0:
                    raise ObjParseError("face index 0 is invalid in OBJ", lineno)
                # relative indices count back from the vertices seen so far
                idx.append(k - 1 if k > 0 else len(verts) + k)
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                face_lines.append(lineno)
    p = len(verts)
    if p == 0:
        raise ObjParseError("no vertex records")
    for face, lineno in zip(faces, face_lines):
        if min(face) < 0 or max(face) >= p:
            raise MeshStructureError(
                f"line {lineno}: face index out of range (file has {p} vertices)"
            )
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3))


def scalar_colors(scalars):
    """Blue-to-red linear colour map normalised by the scalar maximum."""
    s = np.asarray(scalars, dtype=np.float64)
    top = s.max() if s.size else 0.0
    t = np.clip(s / top, 0.0, 1.0) if top > 0 else np.zeros_like(s)
    return np.column_stack([t, np.zeros_like(t), 1.0 - t])


def write_obj(mesh, vertex_scalars=None):
    """Serialise ``mesh`` to OBJ bytes.

    With ``vertex_scalars`` each ``v`` line carries an RGB colour from
    :func:`scalar_colors`. Output is deterministic for a given input.
    """
    v = mesh.vertices
    lines = []
    if vertex_scalars is not None:
        s = np.asarray(vertex_scalars, dtype=np.float64).ravel()
        if s.size != len(v):
            raise ArgumentError(f"need {len(v)} scalars, got {s.size}")
        rgb = scalar_colors(s)
        for (x, y, z), (r, g, b) in zip(v.tolist(), rgb.tolist()):
            lines.append(f"v {x:.8f} {y:.8f} {z:.8f} {r:.6f} {g:.6f} {b:.6f}")
    else:
        for x, y, z in v.tolist():
            lines.append(f"v {x:.8f} {y:.8f} {z:.8f}")
    for a, b, c in (mesh.faces + 1).tolist():
        lines.append(f"f {a} {b} {c}")
    return ("\n".join(lines) + "\n").encode("ascii")


def read_obj(path):
    return parse_obj(Path(path).read_bytes())


def save_obj(path, mesh, vertex_scalars=None):
    Path(path).write_bytes(write_obj(mesh, vertex_scalars))


# ---------------------------------------------------------------------------
# Differential operators


def cotangent_weights(mesh):
    """Per-edge cotangent weights ``w_ij = (cot a + cot b) / 2``.

    Returns ``(edges, weights)`` with ``edges`` sorted lexicographically.
    Boundary edges carry the single available cotangent. Weights below
    ``COT_WEIGHT_FLOOR`` are clamped up to it.
    """
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        a = v[i] - v[o]
        b = v[j] - v[o]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        scale = np.einsum("ij,ij->i", a, a) + np.einsum("ij,ij->i", b, b)
        bad = cross <= 1e-14 * scale
        if bad.any():
            fi = int(np.flatnonzero(bad)[0])
            raise DegenerateGeometryError(
                f"face {fi} {f[fi].tolist()} has zero area"
            )
        rows.append(np.minimum(i, j))
        cols.append(np.maximum(i, j))
        vals.append(0.5 * np.einsum("ij,ij->i", a, b) / cross)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    key = rows * len(v) + cols
    uniq, start = np.unique(key, return_index=True)
    w = np.add.reduceat(vals, start)
    w = np.maximum(w, COT_WEIGHT_FLOOR)
    edges = np.column_stack([uniq // len(v), uniq % len(v)])
    return edges, w


def cotangent_laplacian(mesh):
    """Cotangent Laplacian as a symmetric ``scipy.sparse.csr_matrix``.

    Off-diagonal ``L_ij = -w_ij``, diagonal ``L_ii = sum_j w_ij``; rows sum to
    zero. Sign convention is positive semi-definite.
    """
    p = mesh.n_vertices
    edges, w = cotangent_weights(mesh)
    i, j = edges[:, 0], edges[:, 1]
    diag = np.zeros(p)
    np.add.at(diag, i, w)
    np.add.at(diag, j, w)
    L = sparse.coo_matrix(
        (
            np.concatenate([-w, -w, diag]),
            (np.concatenate([i, j, np.arange(p)]), np.concatenate([j, i, np.arange(p)])),
        ),
        shape=(p, p),
    ).tocsr()
    L.sum_duplicates()
    L.sort_indices()
    return L


# ---------------------------------------------------------------------------
# Nearest neighbours


def nearest_neighbors(query, reference):
    """Exact Euclidean nearest neighbour in ``reference`` for each query row.

    Ties resolve to the lowest reference index.

    Returns
    -------
    indices : ndarray of int, shape (q,)
    distances : ndarray of float, shape (q,)
    """
    query = check_points(query, "query")
    reference = check_points(reference, "reference")
    if len(reference) == 0:
        raise ArgumentError("reference point set is empty")
    tree = cKDTree(reference)
    k = min(4, len(reference))
    _, cand = tree.query(query, k=k)
    cand = np.asarray(cand).reshape(len(query), k)
    # recompute candidate distances so exact ties are detected consistently
    d2 = ((query[:, None, :] - reference[cand]) ** 2).sum(axis=2)
    best = d2.min(axis=1)
    tie = d2 == best[:, None]
    idx = np.where(tie, cand, np.iinfo(np.int64).max).min(axis=1)
    if k < len(reference):
        # all k candidates tied: the true set of ties may be larger
        for q in np.flatnonzero(tie.all(axis=1)):
            full = ((reference - query[q]) ** 2).sum(axis=1)
            idx[q] = int(np.flatnonzero(full == full.min())[0])
            best[q] = full[idx[q]]
    return idx.astype(np.int64), np.sqrt(best)


def mutual_nearest_neighbors(a, b):
    """Pairs ``(i, j)`` where ``b[j]`` is the NN of ``a[i]`` and vice versa."""
    ab, _ = nearest_neighbors(a, b)
    ba, _ = nearest_neighbors(b, a)
    i = np.flatnonzero(ba[ab] == np.arange(len(ab)))
    return Correspondences(i, ab[i], np.ones(i.size))


def per_vertex_nearest_distance(morphed, scan):
    """Distance from each morphed vertex to its closest scan vertex, and the mean."""
    mv = morphed.vertices if isinstance(morphed, TriMesh) else morphed
    sv = scan.vertices if isinstance(scan, TriMesh) else scan
    _, d = nearest_neighbors(mv, sv)
    return d, float(d.mean())


def farthest_point_sampling(points, n_samples, seed_index=0):
    """Greedy farthest-point subsample, deterministic from ``seed_index``.

    Returns the selected indices in selection order.
    """
    points = check_points(points, "points")
    n = len(points)
    if n_samples >= n:
        return np.arange(n)
    if n_samples < 1:
        raise ArgumentError("n_samples must be >= 1")
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = seed_index
    dist = ((points - points[seed_index]) ** 2).sum(axis=1)
    for k in range(1, n_samples):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1), out=dist)
    return chosen
