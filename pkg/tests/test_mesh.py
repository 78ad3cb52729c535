import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adaptmorph.errors import ArgumentError, DegenerateGeometryError, MeshStructureError, ObjParseError
from adaptmorph.mesh import (
    Correspondences,
    TriMesh,
    cotangent_laplacian,
    cotangent_weights,
    farthest_point_sampling,
    mutual_nearest_neighbors,
    nearest_neighbors,
    parse_obj,
    per_vertex_nearest_distance,
    scalar_colors,
    write_obj,
)
from adaptmorph.synthetic import icosphere


def test_parse_minimal():
    m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3")
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_parse_quad_fan():
    m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_parse_slashes_negative_and_extras():
    text = b"# c\nmtllib x.mtl\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\ng a\nf -3/1/1 -2/1/1 -1//1\n"
    m = parse_obj(text)
    assert m.faces.tolist() == [[0, 1, 2]]


def test_parse_error_line_number():
    with pytest.raises(ObjParseError, match="line 2"):
        parse_obj(b"v 0 0 0\nv 1 x 0\n")
    with pytest.raises(ObjParseError, match="line 3"):
        parse_obj(b"v 0 0 0\nv 1 0 0\nf 1 2\n")


def test_parse_index_out_of_range():
    with pytest.raises(MeshStructureError, match="line 4"):
        parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")


def test_write_exact_text():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert write_obj(m) == (
        b"v 0.00000000 0.00000000 0.00000000\n"
        b"v 1.00000000 0.00000000 0.00000000\n"
        b"v 0.00000000 1.00000000 0.00000000\n"
        b"f 1 2 3\n"
    )


def test_zero_scalars_map_to_low_end():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    lines = write_obj(m, np.zeros(3)).decode().splitlines()[:3]
    assert all(line.endswith("0.000000 0.000000 1.000000") for line in lines)
    c = scalar_colors([0.0, 1.0, 2.0])
    assert np.allclose(c, [[0, 0, 1], [0.5, 0, 0.5], [1, 0, 0]])


def test_round_trip_1000_vertices(rng):
    v = rng.normal(size=(1000, 3)) * 50
    f = np.array([rng.choice(1000, 3, replace=False) for _ in range(1500)])
    m = TriMesh(v, f)
    back = parse_obj(write_obj(m))
    assert np.allclose(back.vertices, m.vertices, atol=1e-6)
    assert np.array_equal(back.faces, m.faces)


@given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3)))
def test_round_trip_property(v):
    m = TriMesh(v, [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]])
    back = parse_obj(write_obj(m))
    assert np.allclose(back.vertices, v, atol=1e-7)
    assert write_obj(back) == write_obj(m)


def test_trimesh_invariants():
    with pytest.raises(MeshStructureError):
        TriMesh([[0, 0, 0], [1, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshStructureError):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    with pytest.raises(MeshStructureError):
        TriMesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def _dense_cot_laplacian(mesh):
    # independent oracle: angle-based cotangents accumulated face by face
    v, p = mesh.vertices, mesh.n_vertices
    W = np.zeros((p, p))
    for tri in mesh.faces:
        for k in range(3):
            o, i, j = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            a, b = v[i] - v[o], v[j] - v[o]
            ang = np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1))
            W[i, j] += 0.5 / np.tan(ang)
            W[j, i] += 0.5 / np.tan(ang)
    edges = W != 0
    W[edges] = np.maximum(W[edges], 1e-10)
    return np.diag(W.sum(axis=1)) - W


def test_cotangent_laplacian_matches_dense_oracle(small_sphere, rng):
    m = small_sphere.with_vertices(small_sphere.vertices * [1.0, 1.3, 0.8] + rng.normal(scale=0.02, size=(42, 3)))
    L = cotangent_laplacian(m).toarray()
    assert np.allclose(L, _dense_cot_laplacian(m), atol=1e-12)
    assert np.allclose(L, L.T)
    assert np.allclose(L.sum(axis=1), 0, atol=1e-12)
    assert np.linalg.eigvalsh(L).min() > -1e-10


def test_equilateral_cotangent_weight():
    h = np.sqrt(3) / 2
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]], [[0, 1, 2], [0, 3, 1]])
    edges, w = cotangent_weights(m)
    shared = w[(edges[:, 0] == 0) & (edges[:, 1] == 1)][0]
    # two 60-degree opposite angles
    assert np.isclose(shared, 1 / np.sqrt(3))


def test_degenerate_face_named():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 3], [0, 1, 2]])
    with pytest.raises(DegenerateGeometryError, match="face 1"):
        cotangent_weights(m)


@given(
    arrays(np.float64, (30, 3), elements=st.floats(-10, 10)),
    arrays(np.float64, (25, 3), elements=st.floats(-10, 10)),
)
def test_nearest_neighbors_brute_force(q, r):
    idx, d = nearest_neighbors(q, r)
    D = np.linalg.norm(q[:, None] - r[None], axis=2)
    assert np.allclose(d, D.min(axis=1))
    # lowest index among exact ties
    for k in range(len(q)):
        assert idx[k] == np.flatnonzero(D[k] == D[k].min())[0]


def test_nearest_neighbor_tie_lowest_index():
    r = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]])
    idx, d = nearest_neighbors(np.zeros((1, 3)), r)
    assert idx[0] == 0 and d[0] == 1.0


def test_mutual_nearest_neighbors(rng):
    a = rng.normal(size=(40, 3))
    b = a[rng.permutation(40)] + rng.normal(scale=1e-3, size=(40, 3))
    pairs = mutual_nearest_neighbors(a, b)
    ab, _ = nearest_neighbors(a, b)
    ba, _ = nearest_neighbors(b, a)
    expected = {(i, int(ab[i])) for i in range(40) if ba[ab[i]] == i}
    assert pairs.pairs() == expected
    assert len(pairs) == 40


def test_per_vertex_nearest_distance(small_sphere):
    d, mean = per_vertex_nearest_distance(small_sphere, small_sphere)
    assert np.all(d == 0) and mean == 0


def test_farthest_point_sampling_deterministic(rng):
    pts = rng.normal(size=(200, 3))
    a = farthest_point_sampling(pts, 50)
    b = farthest_point_sampling(pts, 50)
    assert np.array_equal(a, b) and a[0] == 0 and len(set(a.tolist())) == 50
    # second pick is the point farthest from the seed
    assert a[1] == np.argmax(np.linalg.norm(pts - pts[0], axis=1))


def test_correspondences_validation():
    with pytest.raises(ArgumentError):
        Correspondences([0, 0], [1, 2], [1, 1])
    with pytest.raises(ArgumentError):
        Correspondences([0], [1], [-1.0])
    c = Correspondences.from_pairs([(0, 3), (2, 1)])
    assert c.pairs() == {(0, 3), (2, 1)}
    with pytest.raises(ArgumentError):
        c.check(3, 3)
    assert c.remap_dst(np.arange(10) * 2).pairs() == {(0, 6), (2, 2)}


def test_components(small_sphere):
    two = TriMesh(
        np.vstack([small_sphere.vertices, small_sphere.vertices + 5]),
        np.vstack([small_sphere.faces, small_sphere.faces + 42]),
    )
    labels = two.components()
    assert len(set(labels[:42])) == 1 and len(set(labels[42:])) == 1 and labels[0] != labels[42]


def test_icosphere_counts():
    assert icosphere(2).n_vertices == 162
