"""Template-to-scan registration: Procrustes, non-rigid ICP, deformation transfer.

The full pipeline lives in `register_scan_set`: rigid landmark alignment,
NICP of the shared template onto the neutral scan, then per expression a
deformation-transferred template refined by NICP onto that scan. Every output
keeps the template topology.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import bvh as _bvh
from .errors import RegistrationError
from .mesh import Mesh

DEFAULT_STIFFNESS = (50.0, 20.0, 5.0, 2.0, 0.8, 0.5)


@dataclass
class LandmarkSet:
    """Sparse semantic correspondences between images/scans and the template.

    Parallel arrays over landmarks; points2d and/or points3d may be absent.
    """

    semantic_ids: np.ndarray
    template_vertex_ids: np.ndarray
    points2d: np.ndarray | None = None
    points3d: np.ndarray | None = None

    def __post_init__(self):
        self.semantic_ids = np.asarray(self.semantic_ids, dtype=np.int64)
        self.template_vertex_ids = np.asarray(self.template_vertex_ids, dtype=np.int64)
        n = len(self.semantic_ids)
        if len(self.template_vertex_ids) != n:
            raise RegistrationError("landmark lists must have equal length")
        if self.points2d is not None:
            self.points2d = np.asarray(self.points2d, dtype=np.float64).reshape(n, 2)
        if self.points3d is not None:
            self.points3d = np.asarray(self.points3d, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.semantic_ids)


def load_landmarks(path) -> LandmarkSet:
    """Read a landmark JSON file: array of {semantic_id, template_vertex_id, x, y[, z]}."""
    with open(path) as fh:
        rows = json.load(fh)
    sem = [r["semantic_id"] for r in rows]
    tvi = [r["template_vertex_id"] for r in rows]
    has3d = all("z" in r for r in rows)
    pts2 = np.array([[r["x"], r["y"]] for r in rows], dtype=np.float64)
    pts3 = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64) if has3d else None
    return LandmarkSet(sem, tvi, points2d=None if has3d else pts2, points3d=pts3)


def save_landmarks(path, lms: LandmarkSet) -> None:
    rows = []
    for i in range(len(lms)):
        row = {
            "semantic_id": int(lms.semantic_ids[i]),
            "template_vertex_id": int(lms.template_vertex_ids[i]),
        }
        if lms.points3d is not None:
            row["x"], row["y"], row["z"] = (float(v) for v in lms.points3d[i])
        elif lms.points2d is not None:
            row["x"], row["y"] = (float(v) for v in lms.points2d[i])
        rows.append(row)
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray  # (3,3), det +1
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def apply_mesh(self, mesh: Mesh) -> Mesh:
        return mesh.with_vertices(self.apply(mesh.vertices))

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -rt @ self.translation / self.scale)


@dataclass
class NicpConfig:
    stiffness_schedule: tuple = DEFAULT_STIFFNESS
    landmark_weight: float = 5.0
    landmark_decay: float = 0.5  # per-stage multiplier on the landmark weight
    max_inner_iterations: int = 10
    convergence_eps: float = 0.05  # mm, max per-vertex motion
    normal_angle_limit_deg: float = 60.0
    distance_reject_factor: float = 10.0
    # floor under the median when thresholding: once most of the surface has
    # converged the median collapses and a bare factor*median rule would
    # reject every correspondence that still carries information
    distance_floor_mm: float = 2.0

    def __post_init__(self):
        s = tuple(float(x) for x in self.stiffness_schedule)
        if not s or any(x <= 0 for x in s) or any(nxt >= cur for cur, nxt in zip(s, s[1:])):
            raise RegistrationError("stiffness schedule must be strictly decreasing and positive")
        self.stiffness_schedule = s


def procrustes_align(src, dst, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst points.

    Closed form via the cross-covariance SVD with a determinant guard, so the
    returned rotation is always proper (no reflections).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or len(src) < 3:
        raise RegistrationError("rank deficient: need matching point lists of length >= 3")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cd.T @ cs / len(src)
    u, svals, vt = np.linalg.svd(cov)
    var_s = (cs**2).sum() / len(src)
    if var_s < 1e-18 or svals[1] < 1e-12 * max(svals[0], 1e-300):
        raise RegistrationError("rank deficient: points are collinear or coincident")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((svals * d).sum() / var_s) if with_scale else 1.0
    if scale <= 0:
        raise RegistrationError("rank deficient: nonpositive scale")
    t = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, t)


# ---------------------------------------------------------------------------
# Non-rigid ICP (per-vertex affine, decreasing stiffness)


def _mesh_edges(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    key = e[:, 0].astype(np.int64) * n_vertices + e[:, 1]
    uniq = np.unique(key)
    return np.column_stack([uniq // n_vertices, uniq % n_vertices]).astype(np.int64)


def _vertex_data_matrix(vertices: np.ndarray) -> sp.csr_matrix:
    """D: (V x 4V) with row i = [v_i^T, 1] in columns 4i..4i+3."""
    v = vertices
    n = len(v)
    rows = np.repeat(np.arange(n), 4)
    cols = (np.arange(n)[:, None] * 4 + np.arange(4)[None, :]).ravel()
    data = np.column_stack([v, np.ones(n)]).ravel()
    return sp.csr_matrix((data, (rows, cols)), shape=(n, 4 * n))


def nicp_register(template: Mesh, target: Mesh, landmarks: LandmarkSet | None,
                  cfg: NicpConfig) -> Mesh:
    """Deform the template onto the target with optimal-step non-rigid ICP.

    Per-vertex 3x4 affines X are solved from the sparse normal equations of
      alpha * ||(X_i - X_j) G||^2  over edges (stiffness)
      + sum_i w_i ||X_i [v_i;1] - u_i||^2   (closest-point distance)
      + beta * landmark term,
    with correspondences recomputed each inner iteration. Pairs whose normals
    disagree by more than the angle limit or whose distance exceeds
    `distance_reject_factor` x median are dropped.
    """
    if target.n_faces == 0:
        raise RegistrationError("no overlap: target mesh is empty")
    v_t = template.vertices
    n = len(v_t)
    edges = _mesh_edges(template.faces, n)
    ne = len(edges)

    # stiffness operator rows: (X_i - X_j) over 4 affine columns
    rows = np.repeat(np.arange(4 * ne), 2)
    cols = np.empty(8 * ne, dtype=np.int64)
    data = np.empty(8 * ne)
    for k in range(4):
        cols[2 * k::8] = edges[:, 0] * 4 + k
        cols[2 * k + 1::8] = edges[:, 1] * 4 + k
        data[2 * k::8] = 1.0
        data[2 * k + 1::8] = -1.0
    m_stiff = sp.csr_matrix((data, (rows, cols)), shape=(4 * ne, 4 * n))

    tgt_bvh = target.bvh()
    tgt_normals = target.vertex_normals()
    tgt_faces = target.faces
    tgt_border_face = _border_faces(target)

    lm_ids = None
    lm_pts = None
    if landmarks is not None and len(landmarks) and landmarks.points3d is not None:
        lm_ids = landmarks.template_vertex_ids
        if lm_ids.max() >= n:
            raise RegistrationError("landmark template vertex id out of range")
        lm_pts = landmarks.points3d

    # unknowns as (4V x 3); current deformed positions via D @ X
    x = np.zeros((4 * n, 3))
    x[0::4, 0] = 1.0
    x[1::4, 1] = 1.0
    x[2::4, 2] = 1.0
    d_mat = _vertex_data_matrix(v_t)
    src_normals = template.vertex_normals()
    cos_limit = np.cos(np.radians(cfg.normal_angle_limit_deg))

    current = v_t.copy()
    beta = cfg.landmark_weight
    for alpha in cfg.stiffness_schedule:
        for _ in range(cfg.max_inner_iterations):
            face, dist, pts, bary = _bvh.closest_point_batch(tgt_bvh, current)
            corr_n = np.einsum("ij,ijk->ik", bary, tgt_normals[tgt_faces[face]])
            ln = np.linalg.norm(corr_n, axis=1, keepdims=True)
            corr_n = np.where(ln > 1e-12, corr_n / np.maximum(ln, 1e-300), 0.0)

            # deformed-template normals approximated by the per-vertex linear part
            cur_mesh_n = _deformed_normals(template, current)
            cosang = (cur_mesh_n * corr_n).sum(axis=1)
            med = max(np.median(dist), cfg.distance_floor_mm)
            w = (
                (cosang >= cos_limit)
                & (dist <= cfg.distance_reject_factor * med)
                & ~tgt_border_face[face]  # border hits slide freely; drop them
            ).astype(np.float64)
            if w.sum() < 3:
                raise RegistrationError("no overlap: all correspondences rejected")

            e_before = _nicp_energy(m_stiff, alpha, d_mat, w, pts, beta, lm_ids, lm_pts, x)

            blocks = [m_stiff * alpha, sp.diags(w) @ d_mat]
            rhs = [np.zeros((4 * ne, 3)), w[:, None] * pts]
            if lm_ids is not None and beta > 0:
                d_lm = d_mat[lm_ids]
                blocks.append(beta * d_lm)
                rhs.append(beta * lm_pts)
            a = sp.vstack(blocks).tocsc()
            b = np.concatenate(rhs)
            ata = (a.T @ a).tocsc()
            atb = a.T @ b
            try:
                solve = spla.factorized(ata)
            except RuntimeError as exc:
                raise RegistrationError(f"nicp solver failure: {exc}") from None
            x_new = np.column_stack([solve(atb[:, c]) for c in range(3)])
            if not np.all(np.isfinite(x_new)):
                raise RegistrationError("nicp solver failure: non-finite solution")

            e_after = _nicp_energy(m_stiff, alpha, d_mat, w, pts, beta, lm_ids, lm_pts, x_new)
            assert e_after <= e_before + 1e-6 * max(1.0, e_before), "nicp energy increased"

            new_pos = d_mat @ x_new
            motion = np.linalg.norm(new_pos - current, axis=1).max()
            x = x_new
            current = new_pos
            if motion < cfg.convergence_eps:
                break
        beta *= cfg.landmark_decay
    return template.with_vertices(current)


def _border_faces(mesh: Mesh) -> np.ndarray:
    """Faces touching an open boundary edge (single incident face)."""
    f = mesh.faces.astype(np.int64)
    nv = mesh.n_vertices
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(edges, axis=1)
    flat = key[:, 0] * nv + key[:, 1]
    uniq, counts = np.unique(flat, return_counts=True)
    single = set(uniq[counts == 1])
    out = np.zeros(len(f), dtype=bool)
    if single:
        for e, fo in zip(flat, owner):
            if e in single:
                out[fo] = True
    return out


def _nicp_energy(m_stiff, alpha, d_mat, w, pts, beta, lm_ids, lm_pts, x) -> float:
    e = alpha**2 * float(((m_stiff @ x) ** 2).sum())
    res = d_mat @ x - pts
    e += float((w[:, None] * res**2).sum())
    if lm_ids is not None and beta > 0:
        lres = (d_mat[lm_ids] @ x) - lm_pts
        e += beta**2 * float((lres**2).sum())
    return e


def _deformed_normals(template: Mesh, positions: np.ndarray) -> np.ndarray:
    from .mesh import compute_vertex_normals

    return compute_vertex_normals(template.with_vertices(positions))


# ---------------------------------------------------------------------------
# Deformation transfer (per-triangle gradients, Poisson-style solve)


def _frame_matrix(v0, v1, v2):
    """Edge frame [v1-v0, v2-v0, n/sqrt(|n|)] per triangle, stacked (F,3,3)."""
    e1 = v1 - v0
    e2 = v2 - v0
    nrm = np.cross(e1, e2)
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    n4 = nrm / np.sqrt(np.maximum(ln, 1e-300))
    return np.stack([e1, e2, n4], axis=2)


def deformation_transfer(src_neutral: Mesh, src_expr: Mesh, tgt_neutral: Mesh) -> Mesh:
    """Apply the source neutral->expression deformation gradients to the target.

    Solves the sparse least-squares over target vertices plus one virtual
    vertex per triangle; vertex 0 is anchored to the target to pin the
    translation null-space.
    """
    if not (src_neutral.topology_id == src_expr.topology_id == tgt_neutral.topology_id):
        raise RegistrationError("topology mismatch")
    f = src_neutral.faces.astype(np.int64)
    nf = len(f)
    nv = tgt_neutral.n_vertices

    vs0 = src_neutral.vertices
    vs1 = src_expr.vertices
    vt = tgt_neutral.vertices

    src_frames = _frame_matrix(vs0[f[:, 0]], vs0[f[:, 1]], vs0[f[:, 2]])
    dst_frames = _frame_matrix(vs1[f[:, 0]], vs1[f[:, 1]], vs1[f[:, 2]])
    grads = dst_frames @ np.linalg.inv(src_frames)  # (F,3,3) source gradients

    tgt_frames = _frame_matrix(vt[f[:, 0]], vt[f[:, 1]], vt[f[:, 2]])
    inv_tgt = np.linalg.inv(tgt_frames)  # (F,3,3)

    # unknowns: nv target vertices + nf virtual vertices; rows: 3 per triangle
    # T_j = [x1-x0, x2-x0, q_j-x0] @ inv_tgt_j must match grads_j
    rows = []
    cols = []
    data = []
    for k in range(3):  # columns of the frame: x1-x0, x2-x0, q-x0
        col_idx = np.where(k == 0, f[:, 1], np.where(k == 1, f[:, 2], nv + np.arange(nf)))
        for c in range(3):  # row of inv_tgt applied
            r = np.arange(nf) * 3 + c
            rows.append(r)
            cols.append(col_idx)
            data.append(inv_tgt[:, k, c])
            rows.append(r)
            cols.append(f[:, 0])
            data.append(-inv_tgt[:, k, c])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    a = sp.csr_matrix((data, (rows, cols)), shape=(3 * nf, nv + nf))
    b = grads.transpose(0, 2, 1).reshape(3 * nf, 3)  # rows = frame application order

    anchor = sp.csr_matrix((np.array([1.0]), (np.array([0]), np.array([0]))), shape=(1, nv + nf))
    a = sp.vstack([a, anchor]).tocsc()
    b = np.vstack([b, vt[0][None, :]])

    ata = (a.T @ a).tocsc()
    atb = a.T @ b
    try:
        solve = spla.factorized(ata)
    except RuntimeError as exc:
        raise RegistrationError(f"deformation transfer solve failed: {exc}") from None
    x = np.column_stack([solve(atb[:, c]) for c in range(3)])
    return tgt_neutral.with_vertices(x[:nv])


def triangle_gradients(neutral: Mesh, deformed: Mesh) -> np.ndarray:
    """Per-triangle deformation gradients (F,3,3) from neutral to deformed."""
    f = neutral.faces.astype(np.int64)
    a = _frame_matrix(neutral.vertices[f[:, 0]], neutral.vertices[f[:, 1]], neutral.vertices[f[:, 2]])
    b = _frame_matrix(deformed.vertices[f[:, 0]], deformed.vertices[f[:, 1]], deformed.vertices[f[:, 2]])
    return b @ np.linalg.inv(a)


# ---------------------------------------------------------------------------
# Full scan-set pipeline


def register_scan_set(template: Mesh, neutral_scan: Mesh, expr_scans: list,
                      expr_templates: list, landmarks: list, cfg: NicpConfig) -> list:
    """Register a subject's scans to the shared template topology.

    landmarks[0] belongs to the neutral scan, landmarks[1 + i] to expression i.
    Returns [registered_neutral, registered_expr_0, ...] in the template frame.
    """
    if len(expr_scans) != len(expr_templates):
        raise RegistrationError("expression scans and templates must align by index")
    lm0 = landmarks[0]
    if lm0.points3d is None:
        raise RegistrationError("neutral landmarks need 3d points")

    tpl_pts = template.vertices[lm0.template_vertex_ids]
    to_template = procrustes_align(lm0.points3d, tpl_pts, with_scale=True)

    aligned_neutral = to_template.apply_mesh(neutral_scan)
    lm_neutral = LandmarkSet(
        lm0.semantic_ids, lm0.template_vertex_ids,
        points3d=to_template.apply(lm0.points3d),
    )
    registered = [nicp_register(template, aligned_neutral, lm_neutral, cfg)]

    for i, (scan, expr_tpl) in enumerate(zip(expr_scans, expr_templates)):
        if scan.n_faces == 0 or scan.n_vertices == 0:
            raise RegistrationError(f"expression {i}: empty scan")
        try:
            warped = deformation_transfer(template, expr_tpl, registered[0])
            aligned = to_template.apply_mesh(scan)
            lm_i = landmarks[1 + i] if len(landmarks) > 1 + i else None
            if lm_i is not None and lm_i.points3d is not None:
                lm_i = LandmarkSet(
                    lm_i.semantic_ids, lm_i.template_vertex_ids,
                    points3d=to_template.apply(lm_i.points3d),
                )
            registered.append(nicp_register(warped, aligned, lm_i, cfg))
        except RegistrationError as exc:
            raise RegistrationError(f"expression {i}: {exc}") from None
    return registered
