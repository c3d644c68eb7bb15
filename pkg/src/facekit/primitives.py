"""Small procedural meshes used by tests and examples."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh
from .subdivision import subdivide

_ICO_T = (1.0 + 5**0.5) / 2.0
_ICO_V = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_F = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int32,
)


def icosphere(radius: float = 1.0, subdiv: int = 2) -> Mesh:
    """Icosphere with vertices exactly on the sphere of given radius."""
    m = subdivide(Mesh(_ICO_V, _ICO_F), subdiv, "midpoint")
    v = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True) * radius
    return m.with_vertices(v)


def plane_grid(n: int = 8, size: float = 1.0, z: float = 0.0, with_uvs: bool = True) -> Mesh:
    """Regular triangulated grid in the z=const plane, centered at the origin."""
    u = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(u, u, indexing="xy")
    uvs = np.column_stack([uu.ravel(), vv.ravel()])
    verts = np.column_stack([(uvs[:, 0] - 0.5) * size, (uvs[:, 1] - 0.5) * size, np.full(n * n, z)])
    faces = grid_faces(n)
    return Mesh(verts, faces, uvs if with_uvs else None)


def grid_faces(n: int) -> np.ndarray:
    """Triangulation of an n x n vertex grid (row-major vertex order)."""
    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    return np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])]).astype(np.int32)
