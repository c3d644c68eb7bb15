import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facekit import bvh as fbvh
from facekit.errors import MeshError
from facekit.mesh import (
    Mesh,
    compute_vertex_normals,
    laplacian_smooth,
    load_mesh,
    raycast,
    save_mesh,
    surface_point_from_uv,
)
from facekit.primitives import icosphere, plane_grid
from facekit.subdivision import subdivide

TET_OBJ = """\
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 2 3
f 1 2 4
f 1 3 4
f 2 3 4
"""


def test_load_obj_tetrahedron(tmp_path):
    p = tmp_path / "tet.obj"
    p.write_text(TET_OBJ)
    m = load_mesh(p)
    assert m.n_vertices == 4
    assert m.n_faces == 4


def test_load_obj_with_uvs(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text(
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n"
        "f 1/1 2/2 3/3\nf 1/1 3/3 4/4\n"
    )
    m = load_mesh(p)
    assert m.uvs is not None
    assert len(m.uvs) == m.n_vertices
    np.testing.assert_allclose(m.uvs, [[0, 0], [1, 0], [1, 1], [0, 1]])


def test_load_obj_bad_index(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 6\n")
    with pytest.raises(MeshError, match="malformed mesh"):
        load_mesh(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(MeshError, match="not found"):
        load_mesh(tmp_path / "nope.obj")


def test_quad_fan_triangulation(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    assert m.n_faces == 2


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, binary):
    m = icosphere(37.5, 2)
    m = Mesh(m.vertices + np.array([3.0, -200.0, 55.5]), m.faces,
             np.random.default_rng(0).random((m.n_vertices, 2)))
    p = tmp_path / "s.ply"
    save_mesh(p, m, binary=binary)
    back = load_mesh(p)
    assert np.abs(back.vertices - m.vertices).max() < 1e-6
    assert np.array_equal(back.faces, m.faces)
    assert back.uvs is not None
    assert np.abs(back.uvs - m.uvs).max() < 1e-6


def test_obj_roundtrip(tmp_path):
    m = icosphere(12.0, 1)
    p = tmp_path / "s.obj"
    save_mesh(p, m)
    back = load_mesh(p)
    assert np.abs(back.vertices - m.vertices).max() < 1e-6
    assert np.array_equal(back.faces, m.faces)


def test_topology_id_tracks_faces_and_uvs():
    a = plane_grid(5)
    b = a.with_vertices(a.vertices + 2.0)
    assert a.topology_id == b.topology_id
    c = plane_grid(5, with_uvs=False)
    assert a.topology_id != c.topology_id


def test_degenerate_face_rejected():
    with pytest.raises(MeshError, match="degenerate"):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


# --- normals ---------------------------------------------------------------


def test_normals_planar_quad():
    m = plane_grid(2, size=1.0)
    n = compute_vertex_normals(m)
    np.testing.assert_allclose(n, np.tile([0.0, 0.0, 1.0], (4, 1)), atol=1e-12)


def test_normals_flipped_winding():
    m = plane_grid(2)
    flipped = Mesh(m.vertices, m.faces[:, ::-1])
    n = compute_vertex_normals(flipped)
    np.testing.assert_allclose(n, np.tile([0.0, 0.0, -1.0], (4, 1)), atol=1e-12)


def test_normals_icosphere_radial():
    m = icosphere(10.0, 3)
    n = compute_vertex_normals(m)
    ref = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip((n * ref).sum(axis=1), -1.0, 1.0)))
    assert ang.max() < 2.0


def test_isolated_vertex_zero_normal():
    m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5.0]]),
             np.array([[0, 1, 2]]))
    n = compute_vertex_normals(m)
    np.testing.assert_array_equal(n[3], np.zeros(3))


# --- smoothing ---------------------------------------------------------------


def test_smooth_plane_interior_fixed_point():
    # symmetric coplanar 1-rings leave interior vertices in place
    m = plane_grid(9, size=2.0)
    out = laplacian_smooth(m, 1, 0.7)
    interior = np.all(np.abs(m.vertices[:, :2]) < 0.99, axis=1)
    assert np.abs(out.vertices[interior] - m.vertices[interior]).max() < 1e-9
    # and the mesh stays in its plane no matter how long it runs
    out10 = laplacian_smooth(m, 10, 0.7)
    assert np.abs(out10.vertices[:, 2]).max() < 1e-12


def test_smooth_reduces_radial_noise():
    rng = np.random.default_rng(1)
    m = icosphere(50.0, 3)
    noisy = m.with_vertices(m.vertices * (1.0 + 0.01 * rng.normal(size=(m.n_vertices, 1))))
    before = np.std(np.linalg.norm(noisy.vertices, axis=1))
    out = laplacian_smooth(noisy, 10, 0.5)
    after = np.std(np.linalg.norm(out.vertices, axis=1))
    assert after < before


def test_smooth_zero_iterations_identity():
    m = icosphere(5.0, 2)
    out = laplacian_smooth(m, 0, 0.5)
    np.testing.assert_array_equal(out.vertices, m.vertices)


def test_smooth_preserves_topology():
    m = plane_grid(6)
    assert laplacian_smooth(m, 3, 0.5).topology_id == m.topology_id


# --- UV queries --------------------------------------------------------------


def test_uv_at_vertex():
    m = plane_grid(4)
    sp = surface_point_from_uv(m, m.uvs[5])
    assert sp is not None
    order = np.argsort(sp.barycentric)[::-1]
    assert sp.barycentric[order[0]] > 1.0 - 1e-9
    np.testing.assert_allclose(sp.position, m.vertices[5], atol=1e-9)


def test_uv_at_centroid():
    m = plane_grid(3)
    tri = m.faces[0]
    centroid = m.uvs[tri].mean(axis=0)
    sp = surface_point_from_uv(m, centroid)
    assert sp.face_index == 0
    np.testing.assert_allclose(sp.barycentric, [1 / 3] * 3, atol=1e-9)


def test_uv_gap_returns_none():
    m = plane_grid(4)
    shrunk = Mesh(m.vertices, m.faces, 0.25 + 0.5 * m.uvs)
    assert surface_point_from_uv(shrunk, [0.05, 0.05]) is None


def test_uv_without_atlas_errors():
    m = plane_grid(3, with_uvs=False)
    with pytest.raises(MeshError, match="no uv atlas"):
        surface_point_from_uv(m, [0.5, 0.5])


def test_uv_left_inverse_of_sampling():
    m = plane_grid(7)
    rng = np.random.default_rng(3)
    tri = rng.integers(0, m.n_faces, 1000)
    r1 = rng.random(1000)
    r2 = rng.random(1000)
    s = np.sqrt(r1)
    w = np.column_stack([1 - s, s * (1 - r2), s * r2])
    uv_pts = np.einsum("ik,ikc->ic", w, m.uvs[m.faces[tri]])
    worst = 0.0
    for i in range(1000):
        sp = surface_point_from_uv(m, uv_pts[i])
        uv_back = sp.barycentric @ m.uvs[m.faces[sp.face_index]]
        worst = max(worst, np.abs(uv_back - uv_pts[i]).max())
    assert worst < 1e-9


# --- raycast -----------------------------------------------------------------


def test_raycast_sphere_from_center():
    m = icosphere(25.0, 3)
    # facet planes bound the reachable distance from the center
    v = m.vertices[m.faces]
    plane_d = np.abs(np.einsum("fc,fc->f", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]),
                               v[:, 0]))
    plane_d /= np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    d_min = plane_d.min()
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        hit = raycast(m, np.zeros(3), d, 100.0)
        assert hit is not None
        sp, dist = hit
        assert d_min - 1e-9 <= dist <= 25.0 + 1e-9


def test_raycast_parallel_miss():
    m = plane_grid(4, size=2.0)
    hit = raycast(m, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), 50.0)
    assert hit is None


def test_raycast_signed_distance_convention():
    # distance = dot(hit - origin, direction): origin 1mm above the plane,
    # direction +normal, hit lies behind -> -1
    m = plane_grid(4, size=2.0)
    hit = raycast(m, np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]), 50.0)
    assert hit is not None
    _, dist = hit
    assert abs(dist - (-1.0)) < 1e-12
    hit2 = raycast(m, np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]), 50.0)
    assert abs(hit2[1] - 1.0) < 1e-12


def test_raycast_max_dist():
    m = plane_grid(4, size=2.0)
    assert raycast(m, np.array([0.0, 0.0, 30.0]), np.array([0.0, 0.0, -1.0]), 20.0) is None


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_raycast_bvh_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = icosphere(10.0, 2)  # 320 faces
    jitter = m.with_vertices(m.vertices + 0.3 * rng.normal(size=m.vertices.shape))
    origin = rng.normal(scale=6.0, size=3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    got = raycast(jitter, origin, d, 25.0)
    face, t, bary = fbvh.raycast_brute(jitter.vertices, jitter.faces, origin, d, 25.0)
    if got is None:
        assert face == -1
    else:
        sp, dist = got
        assert abs(dist - t) < 1e-9
        assert sp.face_index == face


def test_mesh_invariants_on_face_bounds():
    with pytest.raises(MeshError):
        Mesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_overlapping_uv_atlas_rejected():
    # two triangles occupying the same uv area make lookups ambiguous
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [3, 0, 0], [2, 1, 0.0]])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    uvs = np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9],
                    [0.15, 0.12], [0.85, 0.15], [0.12, 0.85]])
    m = Mesh(verts, faces, uvs)
    with pytest.raises(MeshError, match="overlapping uv atlas"):
        m.uv_index()
