"""Loop and midpoint triangle subdivision with linear UV interpolation."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh


def _edge_topology(faces: np.ndarray, n_vertices: int):
    """Unique edges, per-face edge ids, and the two opposite vertices per edge.

    opposite[e] holds the off-edge vertex of each incident face; -1 when the
    edge is on the boundary (single incident face).
    """
    e0 = faces[:, [1, 2]]
    e1 = faces[:, [2, 0]]
    e2 = faces[:, [0, 1]]
    all_edges = np.concatenate([e0, e1, e2])  # 3F x 2, edge k of face f at k*F+f
    opp_vert = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    key = np.sort(all_edges, axis=1)
    key_flat = key[:, 0].astype(np.int64) * n_vertices + key[:, 1]
    uniq, inverse = np.unique(key_flat, return_inverse=True)
    n_edges = len(uniq)
    edges = np.column_stack([uniq // n_vertices, uniq % n_vertices]).astype(np.int64)

    opposite = np.full((n_edges, 2), -1, dtype=np.int64)
    slot = np.zeros(n_edges, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    for idx in order:
        e = inverse[idx]
        if slot[e] < 2:
            opposite[e, slot[e]] = opp_vert[idx]
            slot[e] += 1
    face_edge = inverse.reshape(3, -1).T  # (F, 3): edge opposite corner k
    boundary = slot < 2
    return edges, face_edge, opposite, boundary


def subdivide(mesh: Mesh, levels: int, scheme: str = "loop") -> Mesh:
    """Subdivide `levels` times; scheme is "loop" or "midpoint".

    Midpoint keeps old vertices fixed and places edge vertices at edge
    midpoints (the result lies on the input surface). Loop additionally
    smooths toward the limit surface. UVs interpolate linearly either way.
    """
    if scheme not in ("loop", "midpoint"):
        raise ValueError(f"unknown scheme {scheme!r}")
    out = mesh
    for _ in range(levels):
        out = _subdivide_once(out, scheme)
    return out


def _subdivide_once(mesh: Mesh, scheme: str) -> Mesh:
    v = mesh.vertices
    f = mesh.faces.astype(np.int64)
    nv = len(v)
    edges, face_edge, opposite, boundary = _edge_topology(f, nv)

    ea = v[edges[:, 0]]
    eb = v[edges[:, 1]]
    if scheme == "midpoint":
        edge_pts = 0.5 * (ea + eb)
        new_old = v.copy()
    else:
        edge_pts = 0.5 * (ea + eb)
        interior = ~boundary
        if interior.any():
            oc = v[opposite[interior, 0]]
            od = v[opposite[interior, 1]]
            edge_pts[interior] = 0.375 * (ea[interior] + eb[interior]) + 0.125 * (oc + od)
        new_old = _loop_even(v, edges, boundary)

    if mesh.uvs is not None:
        edge_uv = 0.5 * (mesh.uvs[edges[:, 0]] + mesh.uvs[edges[:, 1]])
        uvs = np.concatenate([mesh.uvs, edge_uv])
    else:
        uvs = None

    e_ids = face_edge + nv  # new vertex index per face edge
    # corner split: (v0, e2, e1), (v1, e0, e2), (v2, e1, e0), (e0, e1, e2)
    f0 = np.column_stack([f[:, 0], e_ids[:, 2], e_ids[:, 1]])
    f1 = np.column_stack([f[:, 1], e_ids[:, 0], e_ids[:, 2]])
    f2 = np.column_stack([f[:, 2], e_ids[:, 1], e_ids[:, 0]])
    f3 = e_ids
    faces = np.concatenate([f0, f1, f2, f3])
    vertices = np.concatenate([new_old, edge_pts])
    return Mesh(vertices, faces, uvs)


def _loop_even(v: np.ndarray, edges: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    nv = len(v)
    deg = np.bincount(edges.ravel(), minlength=nv).astype(np.float64)
    nbr_sum = np.zeros_like(v)
    for c in range(3):
        nbr_sum[:, c] += np.bincount(edges[:, 0], weights=v[edges[:, 1], c], minlength=nv)
        nbr_sum[:, c] += np.bincount(edges[:, 1], weights=v[edges[:, 0], c], minlength=nv)

    n = np.maximum(deg, 1.0)
    beta = (0.625 - (0.375 + 0.25 * np.cos(2.0 * np.pi / n)) ** 2) / n
    new = (1.0 - n * beta)[:, None] * v + beta[:, None] * nbr_sum

    # boundary vertices use the 3/4, 1/8, 1/8 curve rule over boundary edges
    b_edges = edges[boundary]
    if len(b_edges):
        b_deg = np.bincount(b_edges.ravel(), minlength=nv).astype(np.float64)
        b_sum = np.zeros_like(v)
        for c in range(3):
            b_sum[:, c] += np.bincount(b_edges[:, 0], weights=v[b_edges[:, 1], c], minlength=nv)
            b_sum[:, c] += np.bincount(b_edges[:, 1], weights=v[b_edges[:, 0], c], minlength=nv)
        on_boundary = b_deg >= 2
        curve = 0.75 * v + 0.125 * b_sum
        new = np.where(on_boundary[:, None], curve, new)
        # corner-ish vertices (valence != 2 on the boundary curve) stay put
        odd = (b_deg > 0) & (b_deg != 2)
        new = np.where(odd[:, None], v, new)
    isolated = deg == 0
    if isolated.any():
        new = np.where(isolated[:, None], v, new)
    return new
