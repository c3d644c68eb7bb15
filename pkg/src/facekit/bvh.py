"""Bounding-volume hierarchy over triangles: ray casting and closest-point queries.

Median-split BVH (longest axis, leaf <= 8 triangles). Traversal kernels are
numba-compiled; rays search both directions from the origin and report the
signed parameter t with distance = dot(hit - origin, direction).
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

LEAF_SIZE = 8
_STACK = 128


def build_bvh(vertices: np.ndarray, faces: np.ndarray):
    """Build flat BVH arrays for a triangle soup.

    Returns a dict of arrays: node bounds, children, leaf ranges, and the
    triangle permutation. Construction is deterministic.
    """
    ntri = len(faces)
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    tri_min = np.minimum(np.minimum(v0, v1), v2)
    tri_max = np.maximum(np.maximum(v0, v1), v2)
    centroids = (v0 + v1 + v2) / 3.0

    order = np.arange(ntri, dtype=np.int32)
    # Splits stop at <= LEAF_SIZE, so leaf sizes are >= LEAF_SIZE//2 and the
    # node count stays below ntri; keep a slack floor for tiny meshes.
    max_nodes = max(8, ntri)
    nmin = np.empty((max_nodes, 3))
    nmax = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    start = np.full(max_nodes, -1, dtype=np.int32)
    count = np.zeros(max_nodes, dtype=np.int32)

    n_nodes = 1
    stack = [(0, 0, ntri)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        nmin[node] = tri_min[idx].min(axis=0)
        nmax[node] = tri_max[idx].max(axis=0)
        if hi - lo <= LEAF_SIZE:
            start[node] = lo
            count[node] = hi - lo
            continue
        cen = centroids[idx]
        extent = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(extent))
        mid = (hi - lo) // 2
        # argsort with stable kind keeps splits deterministic under ties
        part = np.argsort(cen[:, axis], kind="stable").astype(np.int32)
        order[lo:hi] = idx[part]
        lnode, rnode = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, lo + mid, hi))
        stack.append((lnode, lo, lo + mid))

    return {
        "nmin": np.ascontiguousarray(nmin[:n_nodes]),
        "nmax": np.ascontiguousarray(nmax[:n_nodes]),
        "left": left[:n_nodes],
        "right": right[:n_nodes],
        "start": start[:n_nodes],
        "count": count[:n_nodes],
        "order": order,
        "v0": np.ascontiguousarray(v0),
        "v1": np.ascontiguousarray(v1),
        "v2": np.ascontiguousarray(v2),
    }


@njit(cache=True, inline="always")
def _ray_tri(orig, d, p0, p1, p2):
    """Moller-Trumbore; returns (t, u, v, hit) for the unbounded line."""
    e1x = p1[0] - p0[0]
    e1y = p1[1] - p0[1]
    e1z = p1[2] - p0[2]
    e2x = p2[0] - p0[0]
    e2y = p2[1] - p0[1]
    e2z = p2[2] - p0[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return 0.0, 0.0, 0.0, False
    inv = 1.0 / det
    tx = orig[0] - p0[0]
    ty = orig[1] - p0[1]
    tz = orig[2] - p0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-10 or u > 1.0 + 1e-10:
        return 0.0, 0.0, 0.0, False
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -1e-10 or u + v > 1.0 + 1e-10:
        return 0.0, 0.0, 0.0, False
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v, True


@njit(cache=True, inline="always")
def _segment_hits_aabb(orig, d, tmin, tmax, bmin, bmax):
    lo = tmin
    hi = tmax
    for k in range(3):
        dk = d[k]
        if abs(dk) < 1e-300:
            if orig[k] < bmin[k] or orig[k] > bmax[k]:
                return False
        else:
            inv = 1.0 / dk
            t0 = (bmin[k] - orig[k]) * inv
            t1 = (bmax[k] - orig[k]) * inv
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > lo:
                lo = t0
            if t1 < hi:
                hi = t1
            if lo > hi:
                return False
    return True


@njit(cache=True)
def _raycast_one(orig, d, max_dist, nmin, nmax, left, right, start, count, order, v0, v1, v2):
    best_t = 0.0
    best_abs = max_dist
    best_face = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(_STACK, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _segment_hits_aabb(orig, d, -best_abs, best_abs, nmin[node], nmax[node]):
            continue
        if count[node] > 0:
            for i in range(start[node], start[node] + count[node]):
                tri = order[i]
                t, u, v, hit = _ray_tri(orig, d, v0[tri], v1[tri], v2[tri])
                if not hit:
                    continue
                at = abs(t)
                if at > max_dist:
                    continue
                if (
                    best_face < 0
                    or at < best_abs - 1e-12
                    or (at <= best_abs + 1e-12 and t > best_t)
                ):
                    best_abs = at
                    best_t = t
                    best_face = tri
                    best_u = u
                    best_v = v
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best_face, best_t, best_u, best_v


@njit(cache=True, parallel=True)
def _raycast_batch(origins, dirs, max_dist, nmin, nmax, left, right, start, count, order, v0, v1, v2):
    n = origins.shape[0]
    face_out = np.full(n, -1, dtype=np.int32)
    t_out = np.zeros(n)
    uv_out = np.zeros((n, 2))
    for i in prange(n):
        f, t, u, v = _raycast_one(
            origins[i], dirs[i], max_dist, nmin, nmax, left, right, start, count, order, v0, v1, v2
        )
        face_out[i] = f
        t_out[i] = t
        uv_out[i, 0] = u
        uv_out[i, 1] = v
    return face_out, t_out, uv_out


@njit(cache=True, inline="always")
def _closest_on_tri(p, a, b, c):
    """Closest point on triangle abc to p (Ericson). Returns (x, y, z, u, v)."""
    abx = b[0] - a[0]
    aby = b[1] - a[1]
    abz = b[2] - a[2]
    acx = c[0] - a[0]
    acy = c[1] - a[1]
    acz = c[2] - a[2]
    apx = p[0] - a[0]
    apy = p[1] - a[1]
    apz = p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2], 0.0, 0.0
    bpx = p[0] - b[0]
    bpy = p[1] - b[1]
    bpz = p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2], 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3)
        return a[0] + w * abx, a[1] + w * aby, a[2] + w * abz, w, 0.0
    cpx = p[0] - c[0]
    cpy = p[1] - c[1]
    cpz = p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2], 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * acx, a[1] + w * acy, a[2] + w * acz, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (
            b[0] + w * (c[0] - b[0]),
            b[1] + w * (c[1] - b[1]),
            b[2] + w * (c[2] - b[2]),
            1.0 - w,
            w,
        )
    denom = 1.0 / (va + vb + vc)
    u = vb * denom
    v = vc * denom
    return (
        a[0] + abx * u + acx * v,
        a[1] + aby * u + acy * v,
        a[2] + abz * u + acz * v,
        u,
        v,
    )


@njit(cache=True, inline="always")
def _aabb_dist2(p, bmin, bmax):
    d2 = 0.0
    for k in range(3):
        if p[k] < bmin[k]:
            d2 += (bmin[k] - p[k]) ** 2
        elif p[k] > bmax[k]:
            d2 += (p[k] - bmax[k]) ** 2
    return d2


@njit(cache=True)
def _closest_one(p, nmin, nmax, left, right, start, count, order, v0, v1, v2):
    best_d2 = 1e300
    best_face = -1
    bx = 0.0
    by = 0.0
    bz = 0.0
    bu = 0.0
    bv = 0.0
    stack = np.empty(_STACK, dtype=np.int32)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _aabb_dist2(p, nmin[node], nmax[node]) >= best_d2:
            continue
        if count[node] > 0:
            for i in range(start[node], start[node] + count[node]):
                tri = order[i]
                x, y, z, u, v = _closest_on_tri(p, v0[tri], v1[tri], v2[tri])
                d2 = (x - p[0]) ** 2 + (y - p[1]) ** 2 + (z - p[2]) ** 2
                if d2 < best_d2:
                    best_d2 = d2
                    best_face = tri
                    bx, by, bz, bu, bv = x, y, z, u, v
        else:
            ln = left[node]
            rn = right[node]
            dl = _aabb_dist2(p, nmin[ln], nmax[ln])
            dr = _aabb_dist2(p, nmin[rn], nmax[rn])
            # visit nearer child last so it pops first
            if dl < dr:
                stack[top] = rn
                top += 1
                stack[top] = ln
                top += 1
            else:
                stack[top] = ln
                top += 1
                stack[top] = rn
                top += 1
    return best_face, np.sqrt(best_d2), bx, by, bz, bu, bv


@njit(cache=True, parallel=True)
def _closest_batch(points, nmin, nmax, left, right, start, count, order, v0, v1, v2):
    n = points.shape[0]
    face_out = np.full(n, -1, dtype=np.int32)
    dist_out = np.zeros(n)
    pts_out = np.zeros((n, 3))
    uv_out = np.zeros((n, 2))
    for i in prange(n):
        f, d, x, y, z, u, v = _closest_one(
            points[i], nmin, nmax, left, right, start, count, order, v0, v1, v2
        )
        face_out[i] = f
        dist_out[i] = d
        pts_out[i, 0] = x
        pts_out[i, 1] = y
        pts_out[i, 2] = z
        uv_out[i, 0] = u
        uv_out[i, 1] = v
    return face_out, dist_out, pts_out, uv_out


def raycast_batch(bvh, origins, dirs, max_dist):
    """Cast rays both ways; returns (face, t, bary) with face=-1 on miss.

    t is signed along `dirs`; the hit with smallest |t| wins, ties resolved
    toward positive t.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    face, t, uv = _raycast_batch(
        origins, dirs, float(max_dist),
        bvh["nmin"], bvh["nmax"], bvh["left"], bvh["right"],
        bvh["start"], bvh["count"], bvh["order"], bvh["v0"], bvh["v1"], bvh["v2"],
    )
    bary = np.zeros((len(face), 3))
    bary[:, 1] = uv[:, 0]
    bary[:, 2] = uv[:, 1]
    bary[:, 0] = 1.0 - uv[:, 0] - uv[:, 1]
    return face, t, bary


def closest_point_batch(bvh, points):
    """Closest surface points; returns (face, distance, point, bary)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    face, dist, pts, uv = _closest_batch(
        points,
        bvh["nmin"], bvh["nmax"], bvh["left"], bvh["right"],
        bvh["start"], bvh["count"], bvh["order"], bvh["v0"], bvh["v1"], bvh["v2"],
    )
    bary = np.zeros((len(face), 3))
    bary[:, 1] = uv[:, 0]
    bary[:, 2] = uv[:, 1]
    bary[:, 0] = 1.0 - uv[:, 0] - uv[:, 1]
    return face, dist, pts, bary


def raycast_brute(vertices, faces, origin, direction, max_dist):
    """Reference all-triangles intersection used to validate BVH traversal."""
    best = None
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    for fi in range(len(faces)):
        p0, p1, p2 = vertices[faces[fi]]
        t, u, v, hit = _ray_tri.py_func(o, d, p0, p1, p2)
        if not hit or abs(t) > max_dist:
            continue
        if best is None or abs(t) < best[1] - 1e-12 or (abs(t) <= best[1] + 1e-12 and t > best[2]):
            best = (fi, abs(t), t, u, v)
    if best is None:
        return -1, 0.0, np.zeros(3)
    fi, _, t, u, v = best
    return fi, t, np.array([1.0 - u - v, u, v])
