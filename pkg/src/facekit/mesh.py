"""Triangle mesh container, OBJ/PLY I/O, normals, smoothing, UV and ray queries.

All lengths are millimeters; UV coordinates live in [0,1]^2. Meshes are
treated as immutable after construction: derived data (normals, adjacency,
BVH, UV index) is computed lazily and cached on the instance.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import bvh as _bvh
from .errors import MeshError

_UV_GRID = 64  # cells per axis in the UV lookup index


@dataclass(eq=False)
class Mesh:
    """Indexed triangle mesh with optional per-vertex UV atlas.

    Attributes
    ----------
    vertices : (V, 3) float64, mm
    faces : (F, 3) int32, vertex indices
    uvs : (V, 2) float64 in [0,1]^2, or None
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("malformed mesh: vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("malformed mesh: faces must be (F, 3)")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("malformed mesh: face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("malformed mesh: degenerate face")
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
            if self.uvs.shape != (len(self.vertices), 2):
                raise MeshError("malformed mesh: uvs must be (V, 2)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def topology_id(self) -> str:
        """Hash of (faces, uv layout); equal for meshes sharing both."""
        if "topology_id" not in self._cache:
            h = hashlib.sha1()
            h.update(np.int64(len(self.vertices)).tobytes())
            h.update(self.faces.astype("<i4").tobytes())
            if self.uvs is None:
                h.update(b"nouv")
            else:
                h.update(self.uvs.astype("<f8").tobytes())
            self._cache["topology_id"] = h.hexdigest()
        return self._cache["topology_id"]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """New mesh with replaced vertex positions, sharing faces and uvs."""
        return Mesh(vertices, self.faces, self.uvs)

    def vertex_normals(self) -> np.ndarray:
        if "vertex_normals" not in self._cache:
            self._cache["vertex_normals"] = compute_vertex_normals(self)
        return self._cache["vertex_normals"]

    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero vector for degenerate-area faces."""
        if "face_normals" not in self._cache:
            v = self.vertices
            f = self.faces
            n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            self._cache["face_normals"] = np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)
        return self._cache["face_normals"]

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric vertex adjacency (1-ring) as CSR."""
        if "adjacency" not in self._cache:
            f = self.faces
            rows = np.concatenate([f[:, 0], f[:, 1], f[:, 1], f[:, 2], f[:, 2], f[:, 0]])
            cols = np.concatenate([f[:, 1], f[:, 0], f[:, 2], f[:, 1], f[:, 0], f[:, 2]])
            data = np.ones(len(rows))
            a = sp.coo_matrix((data, (rows, cols)), shape=(self.n_vertices, self.n_vertices))
            a = a.tocsr()
            a.data[:] = 1.0
            self._cache["adjacency"] = a
        return self._cache["adjacency"]

    def bvh(self):
        if "bvh" not in self._cache:
            self._cache["bvh"] = _bvh.build_bvh(self.vertices, self.faces)
        return self._cache["bvh"]

    def uv_index(self):
        """Grid index over UV triangles; checks for overlapping charts."""
        if self.uvs is None:
            raise MeshError("no uv atlas")
        if "uv_index" not in self._cache:
            self._cache["uv_index"] = _build_uv_index(self)
        return self._cache["uv_index"]


@dataclass
class SurfacePoint:
    """Point on a mesh surface addressed by face + barycentric coordinates."""

    face_index: int
    barycentric: np.ndarray  # (3,), nonnegative, sums to 1
    position: np.ndarray  # (3,) mm
    normal: np.ndarray  # (3,) unit


def compute_vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized.

    Isolated vertices get the zero vector.
    """
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area*unit
    out = np.zeros_like(v)
    for k in range(3):
        for c in range(3):
            out[:, c] += np.bincount(f[:, k], weights=fn[:, c], minlength=len(v))
    ln = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(ln > 1e-300, out / np.maximum(ln, 1e-300), 0.0)


def laplacian_smooth(mesh: Mesh, iterations: int, step: float) -> Mesh:
    """Uniform umbrella smoothing: v <- v + step*(mean(neighbors) - v)."""
    if not 0.0 < step <= 1.0:
        raise ValueError("step must be in (0, 1]")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    a = mesh.adjacency()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        mean = a @ v * inv_deg[:, None]
        moved = v + step * (mean - v)
        v = np.where(deg[:, None] > 0, moved, v)
    return mesh.with_vertices(v)


# ---------------------------------------------------------------------------
# UV atlas queries


def _build_uv_index(mesh: Mesh):
    uv = mesh.uvs
    f = mesh.faces
    a = uv[f[:, 0]]
    b = uv[f[:, 1]]
    c = uv[f[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    cell_lo = np.clip((lo * _UV_GRID).astype(np.int64), 0, _UV_GRID - 1)
    cell_hi = np.clip((hi * _UV_GRID).astype(np.int64), 0, _UV_GRID - 1)

    cells: list[list[int]] = [[] for _ in range(_UV_GRID * _UV_GRID)]
    for fi in range(len(f)):
        if abs(area2[fi]) < 1e-18:  # zero-area UV triangles never contain a point
            continue
        for cy in range(cell_lo[fi, 1], cell_hi[fi, 1] + 1):
            for cx in range(cell_lo[fi, 0], cell_hi[fi, 0] + 1):
                cells[cy * _UV_GRID + cx].append(fi)

    _check_uv_overlap(uv, f, area2, cells)
    return {"cells": cells, "area2": area2}


def _uv_bary(uv, f, fi, p):
    a, b, c = uv[f[fi, 0]], uv[f[fi, 1]], uv[f[fi, 2]]
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    w0 = ((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])) / area2
    w1 = ((c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])) / area2
    w2 = 1.0 - w0 - w1
    return np.array([w0, w1, w2])


def _check_uv_overlap(uv, f, area2, cells):
    # Interior overlap between two UV triangles makes the atlas ambiguous.
    # Sampling each triangle's centroid against cell-mates catches chart
    # collisions without an exact O(F^2) intersection pass.
    cent = (uv[f[:, 0]] + uv[f[:, 1]] + uv[f[:, 2]]) / 3.0
    for fi in range(len(f)):
        if abs(area2[fi]) < 1e-18:
            continue
        p = cent[fi]
        cx = min(int(p[0] * _UV_GRID), _UV_GRID - 1)
        cy = min(int(p[1] * _UV_GRID), _UV_GRID - 1)
        if cx < 0 or cy < 0:
            continue
        for other in cells[cy * _UV_GRID + cx]:
            if other == fi:
                continue
            w = _uv_bary(uv, f, other, p)
            if np.all(w > 1e-9):
                raise MeshError("overlapping uv atlas")


def surface_point_from_uv(mesh: Mesh, uv_point) -> SurfacePoint | None:
    """Locate the surface point whose UV triangle contains `uv_point`.

    Returns None when the point falls in an atlas gap. The lowest face index
    wins when the point lies exactly on a shared edge or vertex.
    """
    index = mesh.uv_index()
    p = np.asarray(uv_point, dtype=np.float64)
    if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
        return None
    cx = min(int(p[0] * _UV_GRID), _UV_GRID - 1)
    cy = min(int(p[1] * _UV_GRID), _UV_GRID - 1)
    best = None
    for fi in sorted(index["cells"][cy * _UV_GRID + cx]):
        w = _uv_bary(mesh.uvs, mesh.faces, fi, p)
        if np.all(w >= -1e-12):
            best = (fi, w)
            break
    if best is None:
        return None
    fi, w = best
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    vids = mesh.faces[fi]
    pos = w @ mesh.vertices[vids]
    vn = mesh.vertex_normals()
    n = w @ vn[vids]
    ln = np.linalg.norm(n)
    if ln < 1e-300:
        n = mesh.face_normals()[fi]
    else:
        n = n / ln
    return SurfacePoint(int(fi), w, pos, n)


def raycast(mesh: Mesh, origin, direction, max_dist: float):
    """Nearest intersection within |t| <= max_dist, searching both directions.

    Returns (SurfacePoint, signed distance) or None on a miss. The distance
    convention is dot(hit - origin, direction); ties in |t| resolve positive.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    face, t, bary = _bvh.raycast_batch(mesh.bvh(), origin, direction, max_dist)
    if face[0] < 0:
        return None
    return _surface_point_at(mesh, int(face[0]), bary[0]), float(t[0])


def _surface_point_at(mesh: Mesh, face_index: int, bary) -> SurfacePoint:
    w = np.clip(np.asarray(bary, dtype=np.float64), 0.0, None)
    w = w / w.sum()
    vids = mesh.faces[face_index]
    pos = w @ mesh.vertices[vids]
    vn = mesh.vertex_normals()
    n = w @ vn[vids]
    ln = np.linalg.norm(n)
    n = n / ln if ln > 1e-300 else mesh.face_normals()[face_index]
    return SurfacePoint(face_index, w, pos, n)


# ---------------------------------------------------------------------------
# File I/O


def load_mesh(path) -> Mesh:
    """Load an OBJ or PLY (ascii / binary little-endian) mesh."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except FileNotFoundError:
        raise MeshError(f"not found: {path}") from None
    if head.startswith(b"ply"):
        return _load_ply(path)
    return _load_obj(path)


def save_mesh(path, mesh: Mesh, binary: bool = True, normals: bool = False) -> None:
    """Write OBJ (by extension) or PLY; PLY uses float64 coordinates."""
    path = str(path)
    if path.lower().endswith(".obj"):
        _save_obj(path, mesh)
    else:
        data = serialize_ply(mesh, binary=binary, normals=normals)
        with open(path, "wb") as fh:
            fh.write(data)


def _load_obj(path: str) -> Mesh:
    verts: list = []
    uvs_raw: list = []
    face_v: list = []
    face_t: list = []
    try:
        with open(path, "r", errors="replace") as fh:
            for line in fh:
                if not line or line[0] not in "vf":
                    continue
                parts = line.split()
                if not parts:
                    continue
                tag = parts[0]
                if tag == "v":
                    if len(parts) < 4:
                        raise MeshError("malformed mesh: short vertex line")
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif tag == "vt":
                    if len(parts) < 3:
                        raise MeshError("malformed mesh: short vt line")
                    uvs_raw.append([float(parts[1]), float(parts[2])])
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) < 3 or len(corners) > 4:
                        raise MeshError("malformed mesh: only triangles and quads supported")
                    vi = []
                    ti = []
                    for c in corners:
                        bits = c.split("/")
                        v = int(bits[0])
                        v = v - 1 if v > 0 else len(verts) + v
                        vi.append(v)
                        if len(bits) > 1 and bits[1]:
                            t = int(bits[1])
                            ti.append(t - 1 if t > 0 else len(uvs_raw) + t)
                        else:
                            ti.append(-1)
                    if len(vi) == 3:
                        face_v.append(vi)
                        face_t.append(ti)
                    else:  # fan-triangulate the quad
                        face_v.append([vi[0], vi[1], vi[2]])
                        face_t.append([ti[0], ti[1], ti[2]])
                        face_v.append([vi[0], vi[2], vi[3]])
                        face_t.append([ti[0], ti[2], ti[3]])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh: {exc}") from None

    vertices = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(face_v, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshError("malformed mesh: face index out of range")

    uvs = None
    if uvs_raw:
        uv_arr = np.asarray(uvs_raw, dtype=np.float64)
        uvs = np.zeros((len(vertices), 2))
        assigned = np.zeros(len(vertices), dtype=bool)
        for fv, ft in zip(face_v, face_t):
            for v, t in zip(fv, ft):
                if t >= 0 and not assigned[v]:
                    if t >= len(uv_arr):
                        raise MeshError("malformed mesh: vt index out of range")
                    uvs[v] = uv_arr[t]
                    assigned[v] = True
    return Mesh(vertices, faces, uvs)


def _save_obj(path: str, mesh: Mesh) -> None:
    out = io.StringIO()
    for v in mesh.vertices:
        out.write(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
    if mesh.uvs is not None:
        for t in mesh.uvs:
            out.write(f"vt {t[0]:.10g} {t[1]:.10g}\n")
        for f in mesh.faces:
            out.write(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}\n")
    else:
        for f in mesh.faces:
            out.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")
    with open(path, "w") as fh:
        fh.write(out.getvalue())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path: str) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        end = data.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise MeshError("malformed mesh: missing ply header terminator") from None
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end:]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or ('list', count_t, item_t, name)])
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError("malformed mesh: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"malformed mesh: unsupported ply format {fmt}")

    vertices = None
    uvs = None
    faces: list = []
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                width = len(props)
                arr = np.array(tokens[pos:pos + count * width], dtype=np.float64).reshape(count, width)
                pos += count * width
                vertices, uvs = _extract_vertex_fields(arr, names)
            elif name == "face":
                for _ in range(count):
                    n = int(tokens[pos]); pos += 1
                    idx = [int(t) for t in tokens[pos:pos + n]]; pos += n
                    _append_face(faces, idx)
            else:
                # skip unknown fixed-width elements
                width = len(props)
                pos += count * width
    else:
        offset = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                np_dtype = np.dtype([(f"f{i}", "<" + _PLY_TYPES[p[1]]) for i, p in enumerate(props)])
                arr = np.frombuffer(body, dtype=np_dtype, count=count, offset=offset)
                offset += np_dtype.itemsize * count
                cols = np.column_stack([arr[f"f{i}"].astype(np.float64) for i in range(len(props))])
                vertices, uvs = _extract_vertex_fields(cols, names)
            elif name == "face":
                for _ in range(count):
                    cnt_t = _PLY_TYPES[props[0][1]]
                    item_t = _PLY_TYPES[props[0][2]]
                    n = int(np.frombuffer(body, dtype="<" + cnt_t, count=1, offset=offset)[0])
                    offset += np.dtype(cnt_t).itemsize
                    idx = np.frombuffer(body, dtype="<" + item_t, count=n, offset=offset)
                    offset += np.dtype(item_t).itemsize * n
                    _append_face(faces, [int(i) for i in idx])
            else:
                np_dtype = np.dtype([(f"f{i}", "<" + _PLY_TYPES[p[1]]) for i, p in enumerate(props)])
                offset += np_dtype.itemsize * count

    if vertices is None:
        raise MeshError("malformed mesh: ply without vertex element")
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces_arr) and (faces_arr.min() < 0 or faces_arr.max() >= len(vertices)):
        raise MeshError("malformed mesh: face index out of range")
    return Mesh(vertices, faces_arr, uvs)


def _extract_vertex_fields(cols: np.ndarray, names: list):
    def col(*cands):
        for c in cands:
            if c in names:
                return cols[:, names.index(c)]
        return None

    x, y, z = col("x"), col("y"), col("z")
    if x is None or y is None or z is None:
        raise MeshError("malformed mesh: ply vertex element lacks x/y/z")
    vertices = np.column_stack([x, y, z])
    u = col("u", "s", "texture_u")
    v = col("v", "t", "texture_v")
    uvs = np.column_stack([u, v]) if u is not None and v is not None else None
    return vertices, uvs


def _append_face(faces: list, idx: list) -> None:
    if len(idx) == 3:
        faces.append(idx)
    elif len(idx) == 4:
        faces.append([idx[0], idx[1], idx[2]])
        faces.append([idx[0], idx[2], idx[3]])
    else:
        raise MeshError("malformed mesh: only triangles and quads supported")


def serialize_ply(mesh: Mesh, binary: bool = True, normals: bool = False,
                  coord_dtype: str = "double") -> bytes:
    """Serialize to PLY bytes; used for both file output and size accounting."""
    has_uv = mesh.uvs is not None
    props = [f"property {coord_dtype} {c}" for c in "xyz"]
    if normals:
        props += [f"property {coord_dtype} n{c}" for c in "xyz"]
    if has_uv:
        props += [f"property {coord_dtype} u", f"property {coord_dtype} v"]
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0" if binary else "format ascii 1.0",
            f"element vertex {mesh.n_vertices}",
            *props,
            f"element face {mesh.n_faces}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
    ) + "\n"

    cols = [mesh.vertices]
    if normals:
        cols.append(mesh.vertex_normals())
    if has_uv:
        cols.append(mesh.uvs)
    vdata = np.column_stack(cols)

    out = io.BytesIO()
    out.write(header.encode("ascii"))
    if binary:
        np_t = "<f8" if coord_dtype == "double" else "<f4"
        out.write(np.ascontiguousarray(vdata, dtype=np_t).tobytes())
        f = mesh.faces
        rec = np.empty(len(f), dtype=np.dtype([("n", "u1"), ("i", "<i4", (3,))]))
        rec["n"] = 3
        rec["i"] = f
        out.write(rec.tobytes())
    else:
        txt = io.StringIO()
        for row in vdata:
            txt.write(" ".join(f"{x:.9g}" for x in row))
            txt.write("\n")
        for f in mesh.faces:
            txt.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        out.write(txt.getvalue().encode("ascii"))
    return out.getvalue()
