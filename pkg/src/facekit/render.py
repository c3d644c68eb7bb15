"""Deterministic software rasterizer with 9-coefficient spherical-harmonic shading.

Conventions: image x grows right, y grows down, pixel (row, col) samples the
continuous point (x=col, y=row). Projection is weak perspective,
p = s*(R x).xy + t, depth is (R x).z with the camera looking along +z, so
smaller depth is closer and the z-buffer keeps the minimum. Lighting lives in
the camera frame; normals are rotated before shading.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import RenderError
from .mesh import Mesh

# real SH basis constants, order: 00, 1-1, 10, 11, 2-2, 2-1, 20, 21, 22
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = 1.0925484305920792
_C20 = 0.31539156525252005
_C22 = 0.5462742152960396
# Lambertian band attenuation (irradiance convolution)
_BAND = np.array([np.pi] + [2.0 * np.pi / 3.0] * 3 + [np.pi / 4.0] * 5)


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Lambertian-weighted SH basis values at unit normals; (..., 9)."""
    n = np.asarray(normals, dtype=np.float64)
    x = n[..., 0]
    y = n[..., 1]
    z = n[..., 2]
    b = np.stack(
        [
            np.full_like(x, _C0),
            _C1 * y,
            _C1 * z,
            _C1 * x,
            _C2 * x * y,
            _C2 * y * z,
            _C20 * (3.0 * z * z - 1.0),
            _C2 * x * z,
            _C22 * (x * x - y * y),
        ],
        axis=-1,
    )
    return b * _BAND


@dataclass
class SH9Lighting:
    """9 coefficients per RGB channel, shape (9, 3)."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(9, 3)

    @classmethod
    def ambient(cls, rgb=(1.0, 1.0, 1.0)) -> "SH9Lighting":
        c = np.zeros((9, 3))
        c[0] = np.asarray(rgb) / (_C0 * _BAND[0])
        return cls(c)


def sh_shade(normals: np.ndarray, light: SH9Lighting) -> np.ndarray:
    """Clamped irradiance per channel at unit normals; (..., 3)."""
    return np.maximum(sh_basis(normals) @ light.coeffs, 0.0)


def fit_directional_light(direction, rgb=(1.0, 1.0, 1.0), samples: int = 5000) -> SH9Lighting:
    """SH projection of a clamped-cosine directional light via sphere quadrature."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    pts = _fibonacci_sphere(samples)
    cosv = np.maximum(pts @ d, 0.0)
    # project onto plain (unweighted) SH basis; shading re-applies band factors
    raw = sh_basis(pts) / _BAND
    coeffs = (raw * cosv[:, None]).sum(axis=0) * (4.0 * np.pi / samples)
    return SH9Lighting(coeffs[:, None] * np.asarray(rgb)[None, :])


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) linear RGB
    depth: np.ndarray  # (H, W), +inf where empty
    face_id: np.ndarray  # (H, W) int32, -1 where empty
    bary: np.ndarray  # (H, W, 3)
    vertex_visible: np.ndarray  # (V,) bool
    vertex_pixels: np.ndarray  # (V, 2) int rounded pixel coords (col, row)


@njit(cache=True)
def _raster_kernel(pts, depth, faces, h, w):
    zbuf = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int32)
    b0 = np.zeros((h, w))
    b1 = np.zeros((h, w))
    nf = faces.shape[0]
    for f in range(nf):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = pts[i0, 0], pts[i0, 1]
        x1, y1 = pts[i1, 0], pts[i1, 1]
        x2, y2 = pts[i2, 0], pts[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        # orient so the edge functions are positive inside
        flip = area < 0.0
        if flip:
            x1, y1, x2, y2 = x2, y2, x1, y1
            area = -area
        lox = max(int(np.ceil(min(x0, min(x1, x2)))), 0)
        hix = min(int(np.floor(max(x0, max(x1, x2)))), w - 1)
        loy = max(int(np.ceil(min(y0, min(y1, y2)))), 0)
        hiy = min(int(np.floor(max(y0, max(y1, y2)))), h - 1)
        if lox > hix or loy > hiy:
            continue
        # top-left fill rule (y grows down): an edge owns its boundary pixels
        # when it is a "top" edge (horizontal, going right) or a "left" edge
        # (going down)
        e0x, e0y = x2 - x1, y2 - y1
        e1x, e1y = x0 - x2, y0 - y2
        e2x, e2y = x1 - x0, y1 - y0
        own0 = (e0y == 0.0 and e0x > 0.0) or e0y > 0.0
        own1 = (e1y == 0.0 and e1x > 0.0) or e1y > 0.0
        own2 = (e2y == 0.0 and e2x > 0.0) or e2y > 0.0
        for py in range(loy, hiy + 1):
            for px in range(lox, hix + 1):
                qx = float(px)
                qy = float(py)
                w0 = (x2 - x1) * (qy - y1) - (y2 - y1) * (qx - x1)
                w1 = (x0 - x2) * (qy - y2) - (y0 - y2) * (qx - x2)
                w2 = (x1 - x0) * (qy - y0) - (y1 - y0) * (qx - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own0) or (w1 == 0.0 and not own1) or (w2 == 0.0 and not own2):
                    continue
                u = w0 / area
                v = w1 / area
                t = 1.0 - u - v
                if flip:
                    v, t = t, v
                z = u * depth[i0] + v * depth[i1] + t * depth[i2]
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    fid[py, px] = f
                    b0[py, px] = u
                    b1[py, px] = v
    return zbuf, fid, b0, b1


@dataclass
class CameraPose:
    """Weak perspective: p = s * (R x).xy + t."""

    s: float
    R: np.ndarray  # (3,3) rotation, det +1
    t: np.ndarray  # (2,) pixels

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(2)
        if self.s <= 0:
            raise ValueError("scale must be positive")


def project(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Project 3D points to pixel coordinates (weak perspective)."""
    cam = np.asarray(points, dtype=np.float64) @ pose.R.T
    return pose.s * cam[..., :2] + pose.t


def camera_depth(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) @ pose.R.T)[..., 2]


def shade_pixels(mesh: Mesh, albedo: np.ndarray, pose: CameraPose, light: SH9Lighting,
                 face_id: np.ndarray, bary: np.ndarray):
    """Color for rasterized pixels: interpolated albedo x SH shading.

    Shared by the full-image render and the photometric energy so both see
    bit-identical values.
    """
    covered = face_id >= 0
    fid = face_id[covered]
    w = bary[covered]
    tri = mesh.faces[fid]
    vn = mesh.vertex_normals() @ pose.R.T
    n = np.einsum("ik,ikc->ic", w, vn[tri])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)
    alb = np.einsum("ik,ikc->ic", w, np.asarray(albedo, dtype=np.float64)[tri])
    return covered, alb * sh_shade(n, light)


def rasterize(mesh: Mesh, albedo: np.ndarray, pose: CameraPose, light: SH9Lighting,
              width: int, height: int, visible_eps: float | None = None) -> RenderOutput:
    """Z-buffered render; also reports per-vertex visibility.

    A vertex counts as visible when its face normal points toward the camera
    and its projected depth is within eps of the depth buffer at its pixel.
    """
    if width <= 0 or height <= 0:
        raise RenderError("zero-size viewport")
    if width > 2048 or height > 2048:
        raise RenderError("viewport capped at 2048")
    pts = project(mesh.vertices, pose)
    depth = camera_depth(mesh.vertices, pose)
    zbuf, fid, b0, b1 = _raster_kernel(
        np.ascontiguousarray(pts), np.ascontiguousarray(depth), mesh.faces, height, width
    )
    bary = np.stack([b0, b1, 1.0 - b0 - b1], axis=-1)
    bary[fid < 0] = 0.0

    covered, colors = shade_pixels(mesh, albedo, pose, light, fid, bary)
    color = np.zeros((height, width, 3))
    color[covered] = colors

    if visible_eps is None:
        span = depth.max() - depth.min() if len(depth) else 1.0
        visible_eps = max(4.0 * span / max(min(width, height), 1), 1e-6)
    px = np.rint(pts[:, 0]).astype(np.int64)
    py = np.rint(pts[:, 1]).astype(np.int64)
    inview = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    frontal = (mesh.vertex_normals() @ pose.R.T)[:, 2] < 0.0
    vis = np.zeros(mesh.n_vertices, dtype=bool)
    idx = np.nonzero(inview)[0]
    vis[idx] = depth[idx] <= zbuf[py[idx], px[idx]] + visible_eps
    vis &= frontal
    return RenderOutput(color, zbuf, fid, bary, vis, np.column_stack([px, py]))


def resynthesize_expression(image: np.ndarray, old_detail: Mesh, new_detail: Mesh,
                            pose: CameraPose, light: SH9Lighting,
                            ratio_floor: float = 1e-3) -> np.ndarray:
    """Re-pose face pixels of an image to a new expression.

    old_detail and new_detail are detailed meshes sharing one topology (the
    fitted expression and the target expression). Face pixels of the output
    are backward-warped from the input using the projected vertex motion and
    re-shaded by the ratio of new to old SH irradiance; everything outside the
    new face coverage passes through unchanged.
    """
    if old_detail.topology_id != new_detail.topology_id:
        raise RenderError("topology mismatch between expression meshes")
    h, w = image.shape[:2]
    gray = np.ones((new_detail.n_vertices, 3))
    out_new = rasterize(new_detail, gray, pose, light, w, h)
    covered = out_new.face_id >= 0
    fid = out_new.face_id[covered]
    bar = out_new.bary[covered]
    tri = new_detail.faces[fid]

    old_pts2 = project(old_detail.vertices, pose)
    src_xy = np.einsum("ik,ikc->ic", bar, old_pts2[tri])
    warped = _bilinear_image_sample(image, src_xy)

    rot = pose.R.T
    def pixel_shade(mesh):
        vn = mesh.vertex_normals() @ rot
        n = np.einsum("ik,ikc->ic", bar, vn[tri])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)
        return sh_shade(n, light)

    shade_new = pixel_shade(new_detail)
    shade_old = pixel_shade(old_detail)
    ratio = shade_new / np.maximum(shade_old, ratio_floor)

    out = image.astype(np.float64).copy()
    out[covered] = warped * ratio
    return out


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def load_image(path) -> np.ndarray:
    """Read PNG/JPEG into linear RGB floats in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def save_image(path, image: np.ndarray) -> None:
    """Write a linear RGB float image as an 8-bit sRGB PNG."""
    from PIL import Image

    srgb = np.clip(np.rint(linear_to_srgb(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(srgb, mode="RGB").save(path, format="PNG")


def _bilinear_image_sample(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(xy[:, 0], 0.0, w - 1.0)
    y = np.clip(xy[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    img = image.astype(np.float64)
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
