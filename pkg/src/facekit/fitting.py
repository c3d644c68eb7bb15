"""Single-image fitting: pose, identity, expression, albedo and SH lighting.

Minimizes  E = E_lan + l1*E_pixel + l2*E_id + l3*E_exp + l4*E_alb  by block
alternation: a landmark-driven Gauss-Newton pass over pose / identity /
expression, a linear photometric solve for lighting and albedo, then a damped
full-energy Gauss-Newton step. Contour landmark correspondences re-select
silhouette vertices after every outer iteration (keeping the previous vertex
as a candidate, so the re-selection never increases the landmark term).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FitError
from .mesh import Mesh
from .morphable import BilinearModel, synthesize
from .registration import LandmarkSet
from .render import (
    CameraPose,
    RenderOutput,
    SH9Lighting,
    project,
    rasterize,
    sh_basis,
)

_EPS_NORM = 1e-9  # floor for the per-pixel L2 norm in gradients


@dataclass
class AlbedoModel:
    """Per-vertex RGB PCA: color = mean + basis @ w, columns orthonormal."""

    mean: np.ndarray  # (V, 3)
    basis: np.ndarray  # (3V, K)
    stddev: np.ndarray  # (K,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.stddev = np.asarray(self.stddev, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def vertex_colors(self, w_alb: np.ndarray) -> np.ndarray:
        return self.mean + (self.basis @ w_alb).reshape(-1, 3)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, basis=self.basis, stddev=self.stddev)

    @classmethod
    def load(cls, path) -> "AlbedoModel":
        d = np.load(path)
        return cls(d["mean"], d["basis"], d["stddev"])


@dataclass
class FitConfig:
    lambda_pixel: float = 1e-3
    lambda_id: float = 1e-2
    lambda_exp: float = 1e-2
    lambda_alb: float = 1e-2
    max_outer_iterations: int = 8
    n_id: int = 50
    n_exp: int = 52
    n_alb: int = 100
    contour_semantic_ids: tuple = ()
    pixel_norm: str = "l2"  # "l2" (per-pixel norm) or "squared"
    rel_tol: float = 1e-6
    render_width: int | None = None  # defaults to the image size
    render_height: int | None = None

    def __post_init__(self):
        for lam in (self.lambda_pixel, self.lambda_id, self.lambda_exp, self.lambda_alb):
            if not np.isfinite(lam) or lam < 0:
                raise FitError("energy weights must be finite and nonnegative")
        if self.pixel_norm not in ("l2", "squared"):
            raise FitError("pixel_norm must be 'l2' or 'squared'")


@dataclass
class FitResult:
    pose: CameraPose
    w_id: np.ndarray
    w_exp: np.ndarray
    w_alb: np.ndarray
    sh: np.ndarray  # (9, 3)
    energy_trace: list = field(default_factory=list)
    warning: str | None = None
    landmark_vertex_ids: np.ndarray | None = None

    def light(self) -> SH9Lighting:
        return SH9Lighting(self.sh)

    def save(self, path) -> None:
        path = Path(path)
        blob = np.concatenate([self.w_id, self.w_exp, self.w_alb, self.sh.ravel()]).astype("<f8")
        path.with_suffix(".bin").write_bytes(blob.tobytes())
        doc = {
            "pose": {
                "s": float(self.pose.s),
                "R": [float(x) for x in self.pose.R.ravel()],
                "t": [float(x) for x in self.pose.t],
            },
            "counts": {"w_id": len(self.w_id), "w_exp": len(self.w_exp), "w_alb": len(self.w_alb)},
            "energy_trace": self.energy_trace,
            "warning": self.warning,
            "landmark_vertex_ids": None if self.landmark_vertex_ids is None
            else [int(i) for i in self.landmark_vertex_ids],
            "blob": "float64 little-endian: w_id, w_exp, w_alb, sh(9x3 row-major)",
        }
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FitResult":
        path = Path(path)
        with open(path.with_suffix(".json")) as fh:
            doc = json.load(fh)
        blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        n_id = doc["counts"]["w_id"]
        n_exp = doc["counts"]["w_exp"]
        n_alb = doc["counts"]["w_alb"]
        w_id = blob[:n_id]
        w_exp = blob[n_id:n_id + n_exp]
        w_alb = blob[n_id + n_exp:n_id + n_exp + n_alb]
        sh = blob[n_id + n_exp + n_alb:].reshape(9, 3)
        pose = CameraPose(doc["pose"]["s"], np.array(doc["pose"]["R"]).reshape(3, 3),
                          np.array(doc["pose"]["t"]))
        return cls(pose, w_id.copy(), w_exp.copy(), w_alb.copy(), sh.copy(),
                   doc.get("energy_trace", []), doc.get("warning"))


# ---------------------------------------------------------------------------
# Pose


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        k = _skew(omega)
        return np.eye(3) + k  # first order is exact enough below 1e-12
    k = _skew(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def pose_from_landmarks(points3d: np.ndarray, points2d: np.ndarray) -> CameraPose:
    """Weak-perspective pose from 3D-2D correspondences (scaled orthographic).

    Solves the 2x3 affine map by least squares and factors it into
    scale x rotation-rows with an orthogonality projection.
    """
    p3 = np.asarray(points3d, dtype=np.float64)
    p2 = np.asarray(points2d, dtype=np.float64)
    if len(p3) < 3 or len(p3) != len(p2):
        raise FitError("pose init failed: need >= 3 correspondences")
    mu3 = p3.mean(axis=0)
    mu2 = p2.mean(axis=0)
    a, *_ = np.linalg.lstsq(p3 - mu3, p2 - mu2, rcond=None)
    a = a.T  # (2, 3)
    u, svals, vt = np.linalg.svd(a, full_matrices=False)
    if svals[1] < 1e-9 * max(svals[0], 1e-300):
        raise FitError("pose init failed: degenerate landmark configuration")
    r12 = u @ vt
    r3 = np.cross(r12[0], r12[1])
    rot = np.vstack([r12, r3 / np.linalg.norm(r3)])
    if np.linalg.det(rot) < 0:
        rot[2] = -rot[2]
    s = float(svals.mean())
    t = mu2 - s * (rot @ mu3)[:2]
    return CameraPose(s, rot, t)


# ---------------------------------------------------------------------------
# Energies with analytic gradients


def landmark_energy(model: BilinearModel, pose: CameraPose, w_id, w_exp,
                    points2d: np.ndarray, vertex_ids: np.ndarray,
                    n_id: int | None = None, n_exp: int | None = None):
    """Mean squared pixel distance over landmarks, with gradients.

    Returns (energy, grads) where grads has keys omega, s, t, w_id, w_exp;
    omega is the gradient for a left-composed rotation increment.
    """
    n_id = model.r_id if n_id is None else n_id
    n_exp = model.r_exp if n_exp is None else n_exp
    w_id_f = np.zeros(model.r_id)
    w_id_f[:n_id] = w_id
    w_exp_f = np.zeros(model.r_exp)
    w_exp_f[:n_exp] = w_exp
    flat = synthesize(model, w_id_f, w_exp_f)
    pts = flat.reshape(-1, 3)[vertex_ids]  # (L, 3)
    cam = pts @ pose.R.T  # (L, 3)
    res = pose.s * cam[:, :2] + pose.t - points2d  # (L, 2)
    nl = len(vertex_ids)
    energy = float((res**2).sum() / nl)

    d_t = 2.0 * res.sum(axis=0) / nl
    d_s = 2.0 * float((res * cam[:, :2]).sum()) / nl
    # rotation increment: d(R x)/d omega = -[R x]_x
    d_omega = np.zeros(3)
    for k in range(nl):
        j = -_skew(cam[k])[:2]  # (2, 3): rows are d(cam.xy)/d omega
        d_omega += 2.0 * pose.s * (j.T @ res[k]) / nl

    # weight jacobians: x_k = mean + core_k x2 w_exp x3 w_id (rows of vertex k)
    core_rows = _vertex_core_rows(model, vertex_ids)  # (L, 3, r_exp, r_id)
    a_id = np.einsum("lcpq,p->lcq", core_rows, w_exp_f)[:, :, :n_id]  # (L,3,n_id)
    a_exp = np.einsum("lcpq,q->lcp", core_rows, w_id_f)[:, :, :n_exp]
    pr = pose.R[:2]  # (2,3)
    d_wid = 2.0 * pose.s * np.einsum("lk,kc,lcq->q", res, pr, a_id) / nl
    d_wexp = 2.0 * pose.s * np.einsum("lk,kc,lcp->p", res, pr, a_exp) / nl
    grads = {"omega": d_omega, "s": d_s, "t": d_t, "w_id": d_wid, "w_exp": d_wexp}
    return energy, grads


def _vertex_core_rows(model: BilinearModel, vertex_ids: np.ndarray) -> np.ndarray:
    idx = (np.asarray(vertex_ids)[:, None] * 3 + np.arange(3)[None, :]).ravel()
    rows = model.core[idx]  # (3L, r_exp, r_id)
    return rows.reshape(len(vertex_ids), 3, model.r_exp, model.r_id)


def pixel_energy(mesh: Mesh, albedo: AlbedoModel, w_alb: np.ndarray, pose: CameraPose,
                 sh: np.ndarray, image: np.ndarray, buffers: RenderOutput | None = None,
                 pixel_norm: str = "l2", n_alb: int | None = None):
    """Photometric consistency over pixels of visible vertices, with gradients.

    The synthesized color at each pixel comes from the shared rasterizer
    shading path, held at fixed visibility; gradients are analytic in the SH
    coefficients and the albedo weights. Returns
    (energy, grad_sh (9,3), grad_alb, buffers).
    """
    n_alb = albedo.k if n_alb is None else n_alb
    light = SH9Lighting(sh)
    colors = albedo.vertex_colors(_pad(w_alb, albedo.k))
    if buffers is None:
        h, w = image.shape[:2]
        buffers = rasterize(mesh, colors, pose, light, w, h)
    vis = buffers.vertex_visible
    if not vis.any():
        raise FitError("face not visible")
    px = buffers.vertex_pixels[vis]  # (P, 2) as (col, row)
    rows = px[:, 1]
    cols = px[:, 0]
    fid = buffers.face_id[rows, cols]
    bar = buffers.bary[rows, cols]
    ok = fid >= 0
    if not ok.any():
        raise FitError("face not visible")
    rows, cols, fid, bar = rows[ok], cols[ok], fid[ok], bar[ok]

    tri = mesh.faces[fid]
    vn = mesh.vertex_normals() @ pose.R.T
    n = np.einsum("ik,ikc->ic", bar, vn[tri])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)
    basis = sh_basis(n)  # (P, 9)
    shade = np.maximum(basis @ sh, 0.0)  # (P, 3)
    active = (basis @ sh) > 0.0  # clamp gate for gradients
    alb_pix = np.einsum("ik,ikc->ic", bar, colors[tri])  # (P, 3)
    synth = alb_pix * shade
    res = synth - image[rows, cols]  # (P, 3)
    p = len(res)

    if pixel_norm == "l2":
        norms = np.maximum(np.linalg.norm(res, axis=1), _EPS_NORM)
        energy = float(np.linalg.norm(res, axis=1).mean())
        w_res = res / norms[:, None] / p  # dE/dsynth
    else:
        energy = float((res**2).sum() / p)
        w_res = 2.0 * res / p

    d_shade = w_res * alb_pix * active  # (P, 3) dE/d(pre-clamp shade)
    grad_sh = basis.T @ d_shade  # (9, 3)

    # albedo pixel value: alb_pix = bary-avg(mean) + (bary-avg of basis rows) @ w
    d_alb_pix = w_res * shade  # (P, 3)
    vb = albedo.basis.reshape(-1, 3, albedo.k)[:, :, :n_alb]  # (V, 3, K')
    m_pix = np.einsum("ik,ikcj->icj", bar, vb[tri])  # (P, 3, K')
    grad_alb = np.einsum("ic,icj->j", d_alb_pix, m_pix)
    return energy, grad_sh, grad_alb, buffers


def _pad(w, k):
    out = np.zeros(k)
    out[: len(w)] = w
    return out


def regularization_energy(w: np.ndarray, stddev: np.ndarray):
    """Diagonal Gaussian energy sum((w_k / sigma_k)^2) and its gradient."""
    w = np.asarray(w, dtype=np.float64)
    sd = np.asarray(stddev, dtype=np.float64)[: len(w)]
    energy = float(((w / sd) ** 2).sum())
    return energy, 2.0 * w / sd**2


# ---------------------------------------------------------------------------
# Contour landmarks


def silhouette_vertices(mesh: Mesh, pose: CameraPose) -> np.ndarray:
    """Vertices on the occluding contour under the pose.

    Edges whose two incident faces disagree in camera-facing sign, plus open
    boundary edges, form the silhouette.
    """
    f = mesh.faces.astype(np.int64)
    nv = mesh.n_vertices
    fn_z = (mesh.face_normals() @ pose.R.T)[:, 2]
    front = fn_z < 0.0
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(edges, axis=1)
    flat = key[:, 0] * nv + key[:, 1]
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    owner_sorted = owner[order]
    sil = np.zeros(nv, dtype=bool)
    i = 0
    m = len(flat_sorted)
    while i < m:
        j = i + 1
        while j < m and flat_sorted[j] == flat_sorted[i]:
            j += 1
        e = flat_sorted[i]
        va, vb = e // nv, e % nv
        if j - i == 1:  # boundary edge
            sil[va] = sil[vb] = True
        else:
            f0 = front[owner_sorted[i]]
            for k in range(i + 1, j):
                if front[owner_sorted[k]] != f0:
                    sil[va] = sil[vb] = True
                    break
        i = j
    return np.nonzero(sil)[0]


def update_contour_vertices(mesh: Mesh, pose: CameraPose, points2d: np.ndarray,
                            vertex_ids: np.ndarray, contour_mask: np.ndarray) -> np.ndarray:
    """Re-select contour landmark vertices among current silhouette vertices.

    The previous vertex stays in the candidate set, so a re-selection can only
    reduce each landmark's reprojection distance.
    """
    if not contour_mask.any():
        return vertex_ids
    sil = silhouette_vertices(mesh, pose)
    if len(sil) == 0:
        return vertex_ids
    proj = project(mesh.vertices[sil], pose)
    out = vertex_ids.copy()
    for k in np.nonzero(contour_mask)[0]:
        d2 = ((proj - points2d[k]) ** 2).sum(axis=1)
        best = sil[int(np.argmin(d2))]
        old = vertex_ids[k]
        d_old = ((project(mesh.vertices[old][None], pose)[0] - points2d[k]) ** 2).sum()
        out[k] = best if d2.min() < d_old else old
    return out


# ---------------------------------------------------------------------------
# Full fit


def fit_image(model: BilinearModel, albedo: AlbedoModel, image: np.ndarray,
              landmarks: LandmarkSet, cfg: FitConfig | None = None) -> FitResult:
    """Analysis-by-synthesis fit of the bilinear model to one image."""
    cfg = cfg or FitConfig()
    if landmarks.points2d is None or len(landmarks) < 6:
        raise FitError("pose init failed: need at least 6 2d landmarks")
    n_id = min(cfg.n_id, model.r_id)
    n_exp = min(cfg.n_exp, model.r_exp)
    n_alb = min(cfg.n_alb, albedo.k)

    pts2d = landmarks.points2d
    vids = landmarks.template_vertex_ids.copy()
    contour_mask = np.isin(landmarks.semantic_ids, np.asarray(cfg.contour_semantic_ids))

    # zero weights are a bilinear saddle (either block zero kills the other
    # block's design matrix), so expression starts from the neutral basis row
    w_id = np.zeros(n_id)
    w_exp = model.exp_basis[0, :n_exp].copy()
    w_alb = np.zeros(n_alb)
    sh = np.zeros((9, 3))
    sh[0] = 1.0 / sh_basis(np.array([0.0, 0.0, 1.0]))[0]

    mean_pts = model.mean_shape.reshape(-1, 3)[vids]
    pose = pose_from_landmarks(mean_pts, pts2d)

    id_sd = model.id_stddev if model.id_stddev is not None else np.ones(model.r_id)
    exp_sd = model.exp_stddev if model.exp_stddev is not None else np.ones(model.r_exp)
    alb_sd = albedo.stddev

    state = _State(model, albedo, image, cfg, n_id, n_exp, n_alb,
                   id_sd[:n_id], exp_sd[:n_exp], alb_sd[:n_alb])
    trace = []
    warning = None
    prev_total = None
    e_cur, _ = state.total_energy(pose, w_id, w_exp, w_alb, sh, pts2d, vids)
    for outer in range(cfg.max_outer_iterations):
        if outer > 0:
            # re-selection keeps the previous vertex as a candidate, so the
            # landmark term (hence the total) cannot increase here
            mesh = state.mesh(w_id, w_exp)
            vids_new = update_contour_vertices(mesh, pose, pts2d, vids, contour_mask)
            if not np.array_equal(vids_new, vids):
                vids = vids_new
                e_cur, _ = state.total_energy(pose, w_id, w_exp, w_alb, sh, pts2d, vids)

        # landmark-driven block: pose GN + linear identity / expression solves
        cand_pose, cand_id, cand_exp = pose, w_id, w_exp
        for _ in range(2):
            cand_pose = state.pose_step(cand_pose, cand_id, cand_exp, pts2d, vids)
            cand_id = state.solve_weights(cand_pose, cand_id, cand_exp, pts2d, vids, which="id")
            cand_exp = state.solve_weights(cand_pose, cand_id, cand_exp, pts2d, vids, which="exp")
        e_cand, _ = state.total_energy(cand_pose, cand_id, cand_exp, w_alb, sh, pts2d, vids)
        if e_cand <= e_cur:
            pose, w_id, w_exp, e_cur = cand_pose, cand_id, cand_exp, e_cand

        # photometric block: lighting then albedo, accepted only if E drops
        sh_new, alb_new = state.photometric_solve(pose, w_id, w_exp, w_alb, sh)
        e_cand, _ = state.total_energy(pose, w_id, w_exp, alb_new, sh_new, pts2d, vids)
        if e_cand <= e_cur:
            sh, w_alb, e_cur = sh_new, alb_new, e_cand

        # joint damped Gauss-Newton on pose + weights against the full energy
        pose, w_id, w_exp, improved = state.full_gn_step(pose, w_id, w_exp, w_alb, sh, pts2d, vids)

        total, terms = state.total_energy(pose, w_id, w_exp, w_alb, sh, pts2d, vids)
        e_cur = total
        terms["total"] = total
        trace.append(terms)
        if prev_total is not None:
            if abs(prev_total - total) <= cfg.rel_tol * max(prev_total, 1e-300):
                prev_total = total
                break
            if not improved:
                warning = "line search exhausted; returning best state"
                prev_total = total
                break
        prev_total = total

    w_id_full = _pad(w_id, model.r_id)
    w_exp_full = _pad(w_exp, model.r_exp)
    w_alb_full = _pad(w_alb, albedo.k)
    return FitResult(pose, w_id_full, w_exp_full, w_alb_full, sh, trace, warning, vids)


class _State:
    """Shared evaluation helpers bound to one fit invocation."""

    def __init__(self, model, albedo, image, cfg, n_id, n_exp, n_alb, id_sd, exp_sd, alb_sd):
        self.model = model
        self.albedo = albedo
        self.image = image
        self.cfg = cfg
        self.n_id = n_id
        self.n_exp = n_exp
        self.n_alb = n_alb
        self.id_sd = id_sd
        self.exp_sd = exp_sd
        self.alb_sd = alb_sd

    def mesh(self, w_id, w_exp) -> Mesh:
        flat = synthesize(self.model, _pad(w_id, self.model.r_id), _pad(w_exp, self.model.r_exp))
        return self.model.mesh_from_vector(flat)

    def total_energy(self, pose, w_id, w_exp, w_alb, sh, pts2d, vids):
        cfg = self.cfg
        e_lan, _ = landmark_energy(self.model, pose, w_id, w_exp, pts2d, vids,
                                   self.n_id, self.n_exp)
        mesh = self.mesh(w_id, w_exp)
        try:
            e_pix, _, _, _ = pixel_energy(mesh, self.albedo, w_alb, pose, sh, self.image,
                                          pixel_norm=cfg.pixel_norm, n_alb=self.n_alb)
        except FitError:
            e_pix = 1e6  # drive the optimizer away from states without coverage
        e_id, _ = regularization_energy(w_id, self.id_sd)
        e_exp, _ = regularization_energy(w_exp, self.exp_sd)
        e_alb, _ = regularization_energy(w_alb, self.alb_sd)
        total = (e_lan + cfg.lambda_pixel * e_pix + cfg.lambda_id * e_id
                 + cfg.lambda_exp * e_exp + cfg.lambda_alb * e_alb)
        return total, {
            "lan": e_lan, "pixel": e_pix, "id": e_id, "exp": e_exp, "alb": e_alb,
        }

    # -- landmark-driven updates ------------------------------------------

    def pose_step(self, pose, w_id, w_exp, pts2d, vids) -> CameraPose:
        """One damped GN step on (omega, s, t) against E_lan, with backtracking."""
        flat = synthesize(self.model, _pad(w_id, self.model.r_id), _pad(w_exp, self.model.r_exp))
        pts = flat.reshape(-1, 3)[vids]
        nl = len(vids)
        cam = pts @ pose.R.T
        res = (pose.s * cam[:, :2] + pose.t - pts2d).ravel()  # (2L,)
        jac = np.zeros((2 * nl, 6))  # omega(3), s, t(2)
        for k in range(nl):
            jac[2 * k:2 * k + 2, 0:3] = -pose.s * _skew(cam[k])[:2]
            jac[2 * k:2 * k + 2, 3] = cam[k, :2]
            jac[2 * k:2 * k + 2, 4:6] = np.eye(2)
        e0 = float((res**2).sum() / nl)
        jtj = jac.T @ jac / nl
        jtr = jac.T @ res / nl
        mu = 1e-8 * max(np.trace(jtj) / 6.0, 1e-300)
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + mu * np.eye(6), -jtr)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            s_new = pose.s + delta[3]
            if s_new <= 0:
                mu *= 10
                continue
            cand = CameraPose(s_new, rodrigues(delta[0:3]) @ pose.R, pose.t + delta[4:6])
            cam_c = pts @ cand.R.T
            res_c = cand.s * cam_c[:, :2] + cand.t - pts2d
            if float((res_c**2).sum() / nl) <= e0:
                return cand
            mu *= 10
        return pose

    def solve_weights(self, pose, w_id, w_exp, pts2d, vids, which: str):
        """Exact ridge solve of E_lan + reg in one weight block."""
        model = self.model
        core_rows = _vertex_core_rows(model, vids)
        nl = len(vids)
        pr = pose.R[:2]
        w_id_f = _pad(w_id, model.r_id)
        w_exp_f = _pad(w_exp, model.r_exp)
        mean_pts = model.mean_shape.reshape(-1, 3)[vids]
        if which == "id":
            basis = np.einsum("lcpq,p->lcq", core_rows, w_exp_f)[:, :, :self.n_id]
            lam = self.cfg.lambda_id
            sd = self.id_sd
        else:
            basis = np.einsum("lcpq,q->lcp", core_rows, w_id_f)[:, :, :self.n_exp]
            lam = self.cfg.lambda_exp
            sd = self.exp_sd
        # residual = s*P*R*(mean + basis @ w) + t - L
        a = pose.s * np.einsum("kc,lcj->lkj", pr, basis).reshape(2 * nl, -1)
        b = (pts2d - pose.s * mean_pts @ pr.T - pose.t).reshape(-1)
        ata = a.T @ a / nl + lam * np.diag(1.0 / sd**2)
        atb = a.T @ b / nl
        return np.linalg.solve(ata, atb)

    # -- photometric updates ----------------------------------------------

    def photometric_solve(self, pose, w_id, w_exp, w_alb, sh):
        """Linear least squares for SH lighting, then albedo weights."""
        mesh = self.mesh(w_id, w_exp)
        colors = self.albedo.vertex_colors(_pad(w_alb, self.albedo.k))
        h, w = self.image.shape[:2]
        buffers = rasterize(mesh, colors, pose, SH9Lighting(sh), w, h)
        vis = buffers.vertex_visible
        if not vis.any():
            return sh, w_alb
        px = buffers.vertex_pixels[vis]
        rows, cols = px[:, 1], px[:, 0]
        fid = buffers.face_id[rows, cols]
        bar = buffers.bary[rows, cols]
        ok = fid >= 0
        rows, cols, fid, bar = rows[ok], cols[ok], fid[ok], bar[ok]
        if len(fid) < 20:
            return sh, w_alb
        tri = mesh.faces[fid]
        vn = mesh.vertex_normals() @ pose.R.T
        n = np.einsum("ik,ikc->ic", bar, vn[tri])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)
        basis = sh_basis(n)  # (P, 9)
        target = self.image[rows, cols]  # (P, 3)
        p = len(target)

        # lighting per channel: rows a_c * basis
        alb_pix = np.einsum("ik,ikc->ic", bar, colors[tri])
        sh_new = np.zeros((9, 3))
        for c in range(3):
            a = alb_pix[:, c:c + 1] * basis
            ata = a.T @ a / p + 1e-9 * np.eye(9)
            sh_new[:, c] = np.linalg.solve(ata, a.T @ target[:, c] / p)

        # albedo weights against the new lighting
        shade = np.maximum(basis @ sh_new, 0.0)
        vb = self.albedo.basis.reshape(-1, 3, self.albedo.k)[:, :, :self.n_alb]
        m_pix = np.einsum("ik,ikcj->icj", bar, vb[tri])  # (P, 3, K)
        mean_pix = np.einsum("ik,ikc->ic", bar, self.albedo.mean[tri])
        design = (shade[:, :, None] * m_pix).reshape(p * 3, self.n_alb)
        rhs = (target - mean_pix * shade).reshape(-1)
        ata = design.T @ design / p + self.cfg.lambda_alb * np.diag(1.0 / self.alb_sd**2)
        alb_new = np.linalg.solve(ata, design.T @ rhs / p)
        return sh_new, alb_new

    # -- joint refinement ---------------------------------------------------

    def full_gn_step(self, pose, w_id, w_exp, w_alb, sh, pts2d, vids):
        """Damped GN over (omega, s, t, w_id, w_exp) on the full energy.

        Pixel-term geometry coupling enters through the regularized landmark
        normal equations only (fixed-visibility linearization); the step is
        accepted only when the true total energy decreases.
        """
        nl = len(vids)
        model = self.model
        flat = synthesize(model, _pad(w_id, model.r_id), _pad(w_exp, model.r_exp))
        pts = flat.reshape(-1, 3)[vids]
        cam = pts @ pose.R.T
        res = (pose.s * cam[:, :2] + pose.t - pts2d).ravel()
        core_rows = _vertex_core_rows(model, vids)
        pr = pose.R[:2]
        a_id = pose.s * np.einsum(
            "kc,lcj->lkj", pr,
            np.einsum("lcpq,p->lcq", core_rows, _pad(w_exp, model.r_exp))[:, :, :self.n_id],
        ).reshape(2 * nl, -1)
        a_exp = pose.s * np.einsum(
            "kc,lcj->lkj", pr,
            np.einsum("lcpq,q->lcp", core_rows, _pad(w_id, model.r_id))[:, :, :self.n_exp],
        ).reshape(2 * nl, -1)
        jac_pose = np.zeros((2 * nl, 6))
        for k in range(nl):
            jac_pose[2 * k:2 * k + 2, 0:3] = -pose.s * _skew(cam[k])[:2]
            jac_pose[2 * k:2 * k + 2, 3] = cam[k, :2]
            jac_pose[2 * k:2 * k + 2, 4:6] = np.eye(2)
        jac = np.concatenate([jac_pose, a_id, a_exp], axis=1) / np.sqrt(nl)
        r = res / np.sqrt(nl)

        npar = jac.shape[1]
        jtj = jac.T @ jac
        jtr = jac.T @ r
        # gaussian priors on the weight blocks
        reg = np.zeros(npar)
        reg[6:6 + self.n_id] = self.cfg.lambda_id / self.id_sd**2
        reg[6 + self.n_id:] = self.cfg.lambda_exp / self.exp_sd**2
        jtj += np.diag(reg)
        jtr += reg * np.concatenate([np.zeros(6), w_id, w_exp])

        e0, _ = self.total_energy(pose, w_id, w_exp, w_alb, sh, pts2d, vids)
        mu = 1e-6 * max(np.trace(jtj) / npar, 1e-300)
        for _ in range(6):
            try:
                delta = np.linalg.solve(jtj + mu * np.eye(npar), -jtr)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            s_new = pose.s + delta[3]
            if s_new <= 0:
                mu *= 10
                continue
            cand_pose = CameraPose(s_new, rodrigues(delta[0:3]) @ pose.R, pose.t + delta[4:6])
            cand_id = w_id + delta[6:6 + self.n_id]
            cand_exp = w_exp + delta[6 + self.n_id:]
            e1, _ = self.total_energy(cand_pose, cand_id, cand_exp, w_alb, sh, pts2d, vids)
            if e1 <= e0:
                return cand_pose, cand_id, cand_exp, e1 < e0
            mu *= 10
        return pose, w_id, w_exp, False
