"""Two-layer detail: bake signed normal offsets into UV maps and re-apply them.

Map layout: values[row, col] covers the UV pixel center
((col + 0.5)/N, (row + 0.5)/N); row 0 sits at v ~ 0. Misses and off-atlas
pixels are invalid and never extrapolated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import bvh as _bvh
from . import pngio
from .errors import MeshError
from .mesh import Mesh, laplacian_smooth, serialize_ply
from .subdivision import subdivide

VALID_RESOLUTIONS = (256, 512, 1024, 2048, 4096)
MAX_RAY_MM = 20.0


@dataclass
class DisplacementMap:
    """Square grid of signed offsets (mm) along base-surface normals."""

    resolution: int
    values: np.ndarray  # (N, N) float64, mm
    valid: np.ndarray  # (N, N) bool
    scale_mm: float | None = None  # set when loaded from a quantized file
    offset_mm: float | None = None

    def __post_init__(self):
        n = self.resolution
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(n, n)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool).reshape(n, n)

    def masked(self) -> np.ndarray:
        """Values with invalid pixels zeroed."""
        return np.where(self.valid, self.values, 0.0)

    def stats(self) -> dict:
        vals = self.values[self.valid]
        if len(vals) == 0:
            return {"valid_fraction": 0.0, "min": 0.0, "max": 0.0, "rms": 0.0}
        return {
            "valid_fraction": float(self.valid.mean()),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "rms": float(np.sqrt((vals**2).mean())),
        }


@njit(cache=True)
def _uv_raster_kernel(uv, faces, n):
    """Per-pixel (face, barycentric) for pixel centers; lowest face index wins."""
    face_out = np.full((n, n), -1, dtype=np.int32)
    b0 = np.zeros((n, n))
    b1 = np.zeros((n, n))
    nf = faces.shape[0]
    for fi in range(nf):
        ax = uv[faces[fi, 0], 0]
        ay = uv[faces[fi, 0], 1]
        bx = uv[faces[fi, 1], 0]
        by = uv[faces[fi, 1], 1]
        cx = uv[faces[fi, 2], 0]
        cy = uv[faces[fi, 2], 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area2) < 1e-18:
            continue
        lox = min(ax, min(bx, cx))
        hix = max(ax, max(bx, cx))
        loy = min(ay, min(by, cy))
        hiy = max(ay, max(by, cy))
        px0 = max(int(np.floor(lox * n - 0.5)), 0)
        px1 = min(int(np.ceil(hix * n - 0.5)), n - 1)
        py0 = max(int(np.floor(loy * n - 0.5)), 0)
        py1 = min(int(np.ceil(hiy * n - 0.5)), n - 1)
        for py in range(py0, py1 + 1):
            v = (py + 0.5) / n
            for px in range(px0, px1 + 1):
                if face_out[py, px] >= 0:
                    continue
                u = (px + 0.5) / n
                w0 = ((bx - u) * (cy - v) - (by - v) * (cx - u)) / area2
                w1 = ((cx - u) * (ay - v) - (cy - v) * (ax - u)) / area2
                w2 = 1.0 - w0 - w1
                if w0 >= -1e-12 and w1 >= -1e-12 and w2 >= -1e-12:
                    face_out[py, px] = fi
                    b0[py, px] = w0
                    b1[py, px] = w1
    return face_out, b0, b1


def uv_pixel_index(mesh: Mesh, resolution: int):
    """(face, bary) for every UV pixel center; face -1 outside the atlas.

    Matches surface_point_from_uv semantics (ties to the lowest face index).
    """
    if mesh.uvs is None:
        raise MeshError("no uv atlas")
    mesh.uv_index()  # runs the overlap check once per mesh
    face, b0, b1 = _uv_raster_kernel(mesh.uvs, mesh.faces, resolution)
    bary = np.stack([b0, b1, 1.0 - b0 - b1], axis=-1)
    bary = np.clip(bary, 0.0, None)
    s = bary.sum(axis=-1, keepdims=True)
    bary = bary / np.maximum(s, 1e-300)
    return face, bary


def bake_displacement(base: Mesh, raw: Mesh, resolution: int,
                      smooth_raw: bool = True) -> DisplacementMap:
    """Bake raw-mesh detail over the base mesh into a UV displacement map.

    For each atlas pixel, a ray from the base surface point along its normal
    (searching both directions, nearest hit wins) records the signed distance
    to the raw surface. Misses become invalid pixels. When smooth_raw is on,
    the raw mesh is Laplacian-smoothed (3 iterations, step 0.5) first to
    suppress registration artifacts.
    """
    if base.uvs is None:
        raise MeshError("no uv atlas")
    if resolution not in VALID_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {VALID_RESOLUTIONS}")
    target = laplacian_smooth(raw, 3, 0.5) if smooth_raw else raw

    face, bary = uv_pixel_index(base, resolution)
    inside = face >= 0
    fidx = face[inside]
    w = bary[inside]
    tri = base.faces[fidx]
    origins = np.einsum("ik,ikc->ic", w, base.vertices[tri])
    vn = base.vertex_normals()
    normals = np.einsum("ik,ikc->ic", w, vn[tri])
    ln = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(ln > 1e-300, normals / np.maximum(ln, 1e-300), 0.0)

    hit_face, t, _ = _bvh.raycast_batch(target.bvh(), origins, normals, MAX_RAY_MM)
    values = np.zeros((resolution, resolution))
    valid = np.zeros((resolution, resolution), dtype=bool)
    vals_flat = np.where(hit_face >= 0, t, 0.0)
    ok_flat = hit_face >= 0
    values[inside] = vals_flat
    valid[inside] = ok_flat
    return DisplacementMap(resolution, values, valid)


def sample_bilinear(dmap: DisplacementMap, uv: np.ndarray) -> np.ndarray:
    """Bilinear map sample at UV points; invalid pixels contribute zero."""
    n = dmap.resolution
    uv = np.asarray(uv, dtype=np.float64)
    x = np.clip(uv[..., 0] * n - 0.5, 0.0, n - 1.0)
    y = np.clip(uv[..., 1] * n - 0.5, 0.0, n - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, n - 1)
    y1 = np.minimum(y0 + 1, n - 1)
    fx = x - x0
    fy = y - y0
    vals = dmap.masked()
    return (
        vals[y0, x0] * (1 - fx) * (1 - fy)
        + vals[y0, x1] * fx * (1 - fy)
        + vals[y1, x0] * (1 - fx) * fy
        + vals[y1, x1] * fx * fy
    )


def apply_displacement(base: Mesh, dmap: DisplacementMap, subdiv_levels: int) -> Mesh:
    """Loop-subdivide the base and displace vertices along their normals."""
    if base.uvs is None:
        raise MeshError("no uv atlas")
    fine = subdivide(base, subdiv_levels, "loop")
    offsets = sample_bilinear(dmap, fine.uvs)
    verts = fine.vertices + offsets[:, None] * fine.vertex_normals()
    return Mesh(verts, fine.faces, fine.uvs)


# ---------------------------------------------------------------------------
# Quantized storage: 16-bit grayscale PNG + JSON sidecar; code 0 = invalid.


def quantize(dmap: DisplacementMap):
    """Map valid values to uint16 codes 1..65535; 0 marks invalid pixels."""
    vals = dmap.values[dmap.valid]
    if len(vals) == 0:
        offset, scale = 0.0, 1.0
    else:
        lo = float(vals.min())
        hi = float(vals.max())
        offset = lo
        scale = (hi - lo) / 65534.0 if hi > lo else 1.0
    codes = np.zeros(dmap.values.shape, dtype=np.uint16)
    q = np.rint((dmap.values - offset) / scale).astype(np.int64) + 1
    codes[dmap.valid] = np.clip(q[dmap.valid], 1, 65535).astype(np.uint16)
    return codes, scale, offset


def dequantize(codes: np.ndarray, scale: float, offset: float) -> DisplacementMap:
    valid = codes > 0
    values = np.where(valid, (codes.astype(np.float64) - 1.0) * scale + offset, 0.0)
    return DisplacementMap(codes.shape[0], values, valid, scale_mm=scale, offset_mm=offset)


def save_displacement(path, dmap: DisplacementMap) -> None:
    """Write <path>.png (16-bit grayscale) and <path>.json sidecar."""
    path = Path(path)
    codes, scale, offset = quantize(dmap)
    png = pngio.encode_gray16(codes)
    path.with_suffix(".png").write_bytes(png)
    sidecar = {
        "resolution": int(dmap.resolution),
        "scale_mm": scale,
        "offset_mm": offset,
        "valid": "zero-sentinel",
        "row0_v": 0.0,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_displacement(path) -> DisplacementMap:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    codes = pngio.decode_gray16(path.with_suffix(".png").read_bytes())
    if codes.shape[0] != meta["resolution"]:
        raise ValueError("sidecar resolution does not match png")
    return dequantize(codes, meta["scale_mm"], meta["offset_mm"])


def displacement_file_bytes(dmap: DisplacementMap) -> int:
    """Size of the quantized map as stored on disk (png + sidecar)."""
    codes, scale, offset = quantize(dmap)
    png = pngio.encode_gray16(codes)
    sidecar = json.dumps({
        "resolution": int(dmap.resolution), "scale_mm": scale, "offset_mm": offset,
        "valid": "zero-sentinel", "row0_v": 0.0,
    }, sort_keys=True)
    return len(png) + len(sidecar)


# ---------------------------------------------------------------------------
# Representation quality


def sample_surface_points(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    f = mesh.faces
    areas = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    probs = areas / areas.sum()
    tri = rng.choice(len(f), size=count, p=probs)
    r1 = rng.random(count)
    r2 = rng.random(count)
    s = np.sqrt(r1)
    w0 = 1.0 - s
    w1 = s * (1.0 - r2)
    w2 = s * r2
    return w0[:, None] * v[f[tri, 0]] + w1[:, None] * v[f[tri, 1]] + w2[:, None] * v[f[tri, 2]]


def representation_error(raw: Mesh, base: Mesh, dmap: DisplacementMap,
                         subdiv_levels: int, samples: int = 10000, seed: int = 0) -> dict:
    """Reconstruction error and storage ratio of the two-layer representation.

    mae / p95 are point-to-surface distances from uniform raw-surface samples
    to the reconstructed mesh. size_ratio compares serialized artifact bytes:
    base as binary float32 PLY plus the quantized 16-bit PNG map (with
    sidecar), against the raw scan serialized as ascii PLY with vertex
    normals, the usual scanner interchange encoding.
    """
    recon = apply_displacement(base, dmap, subdiv_levels)
    pts = sample_surface_points(raw, samples, seed)
    _, dist, _, _ = _bvh.closest_point_batch(recon.bvh(), pts)
    mae = float(np.abs(dist).mean())
    p95 = float(np.percentile(np.abs(dist), 95.0))

    base_bytes = len(serialize_ply(base, binary=True, coord_dtype="float"))
    map_bytes = displacement_file_bytes(dmap)
    raw_bytes = len(serialize_ply(raw, binary=False, normals=True))
    return {
        "mae": mae,
        "p95": p95,
        "size_ratio": (base_bytes + map_bytes) / raw_bytes,
        "base_bytes": base_bytes,
        "map_bytes": map_bytes,
        "raw_bytes": raw_bytes,
    }
