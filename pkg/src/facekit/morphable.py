"""Bilinear identity x expression model over registered meshes.

A population of meshes sharing one topology is stacked into a rank-3 tensor
(vertex mode uncompressed), reduced by higher-order SVD into a core tensor
plus orthonormal expression / identity factor matrices, and synthesized back
as mean + core x2 w_exp x3 w_id. Person-specific blendshape rigs and mesh /
image fitting consume the same model.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bvh as _bvh
from .errors import ModelError
from .mesh import Mesh

FSBM_MAGIC = b"FSBM"
FSBM_VERSION = 1


@dataclass
class Rank3Tensor:
    """Mean-centered vertex x expression x identity stack."""

    data: np.ndarray  # (3V, E, I)
    mean_shape: np.ndarray  # (3V,)
    mean_subtracted: bool = True

    @property
    def dims(self):
        return self.data.shape


@dataclass
class BilinearModel:
    core: np.ndarray  # (3V, r_exp, r_id)
    exp_basis: np.ndarray  # (E, r_exp), orthonormal columns; row i = weights of expression i
    id_basis: np.ndarray  # (I, r_id), orthonormal columns
    mean_shape: np.ndarray  # (3V,)
    faces: np.ndarray  # template topology for synthesized meshes
    uvs: np.ndarray | None
    mean_subtracted: bool = True
    id_stddev: np.ndarray | None = None  # per-component training weight spread
    exp_stddev: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def r_exp(self) -> int:
        return self.core.shape[1]

    @property
    def r_id(self) -> int:
        return self.core.shape[2]

    @property
    def n_vertices(self) -> int:
        return self.core.shape[0] // 3

    @property
    def topology_id(self) -> str:
        if "topology_id" not in self._cache:
            self._cache["topology_id"] = self.template_mesh().topology_id
        return self._cache["topology_id"]

    def template_mesh(self) -> Mesh:
        return Mesh(self.mean_shape.reshape(-1, 3), self.faces, self.uvs)

    def mesh_from_vector(self, flat: np.ndarray) -> Mesh:
        return Mesh(flat.reshape(-1, 3), self.faces, self.uvs)


@dataclass
class BlendshapeRig:
    """Neutral mesh, expression blendshapes, and per-key-expression weights."""

    neutral: Mesh
    shapes: list  # list[Mesh], blendshapes 1..J
    key_weights: list  # list of (J,) arrays in [0,1], one per key expression

    @property
    def topology_id(self) -> str:
        return self.neutral.topology_id

    def delta_matrix(self) -> np.ndarray:
        """(3V, J) matrix of blendshape deltas from the neutral."""
        e0 = self.neutral.vertices.ravel()
        return np.column_stack([s.vertices.ravel() - e0 for s in self.shapes])

    def blend(self, alpha: np.ndarray) -> Mesh:
        """Linear blendshape combine: e0 + sum_j alpha_j (B_j - e0)."""
        alpha = np.asarray(alpha, dtype=np.float64)
        if len(alpha) != len(self.shapes):
            raise ModelError("alpha length must match blendshape count")
        v = self.neutral.vertices.ravel() + self.delta_matrix() @ alpha
        return self.neutral.with_vertices(v.reshape(-1, 3))


def assemble_tensor(meshes, subtract_mean: bool = True) -> tuple:
    """Stack an identity x expression grid of meshes into a rank-3 tensor.

    `meshes[i][e]` is subject i at expression e; all must share one topology.
    The population mean is subtracted by default (synthesis adds it back);
    pass subtract_mean=False to decompose raw coordinates instead. Returns
    (Rank3Tensor, template Mesh).
    """
    n_id = len(meshes)
    if n_id == 0:
        raise ModelError("incomplete grid: no subjects")
    n_exp = len(meshes[0])
    topo = None
    cols = []
    for i, row in enumerate(meshes):
        if len(row) != n_exp:
            raise ModelError(f"incomplete grid: subject {i} has {len(row)} expressions, expected {n_exp}")
        for e, m in enumerate(row):
            if m is None:
                raise ModelError(f"incomplete grid: missing mesh ({i}, {e})")
            if topo is None:
                topo = m.topology_id
                template = m
            elif m.topology_id != topo:
                raise ModelError("topology mismatch")
            cols.append(m.vertices.ravel())
    stack = np.stack(cols).reshape(n_id, n_exp, -1)  # (I, E, 3V)
    if subtract_mean:
        mean = stack.reshape(-1, stack.shape[-1]).mean(axis=0)
    else:
        mean = np.zeros(stack.shape[-1])
    data = np.ascontiguousarray((stack - mean).transpose(2, 1, 0))  # (3V, E, I)
    return Rank3Tensor(data, mean, mean_subtracted=subtract_mean), template


def _leading_singular_vectors(unfolding: np.ndarray, rank: int) -> np.ndarray:
    """Top left singular vectors of a (small x huge) unfolding, sign-fixed."""
    gram = unfolding @ unfolding.T
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    u = vecs[:, order[:rank]]
    return _fix_signs(u)


def _fix_signs(u: np.ndarray) -> np.ndarray:
    u = u.copy()
    for j in range(u.shape[1]):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0:
            u[:, j] = -u[:, j]
    return u


def tucker_decompose(tensor: Rank3Tensor, template: Mesh, r_id: int, r_exp: int,
                     method: str = "hosvd", hooi_iterations: int = 5) -> BilinearModel:
    """Reduce the stack to a core tensor and factor matrices.

    HOSVD by default: expression / identity bases are the top singular vectors
    of the mode-2 / mode-3 unfoldings; the vertex mode stays uncompressed.
    `method="hooi"` refines both bases with a fixed number of alternating
    passes. Basis columns are sign-fixed (largest-magnitude entry positive).
    """
    nv3, n_exp, n_id = tensor.dims
    if not (1 <= r_exp <= n_exp) or not (1 <= r_id <= n_id):
        raise ModelError("rank too large")
    t = tensor.data
    unfold_e = t.transpose(1, 0, 2).reshape(n_exp, -1)
    unfold_i = t.transpose(2, 0, 1).reshape(n_id, -1)
    exp_basis = _leading_singular_vectors(unfold_e, r_exp)
    id_basis = _leading_singular_vectors(unfold_i, r_id)

    if method == "hooi":
        for _ in range(hooi_iterations):
            proj_i = np.einsum("vei,iq->veq", t, id_basis)
            exp_basis = _leading_singular_vectors(proj_i.transpose(1, 0, 2).reshape(n_exp, -1), r_exp)
            proj_e = np.einsum("vei,ep->vpi", t, exp_basis)
            id_basis = _leading_singular_vectors(proj_e.transpose(2, 0, 1).reshape(n_id, -1), r_id)
    elif method != "hosvd":
        raise ModelError(f"unknown decomposition method {method!r}")

    core = np.einsum("vei,ep,iq->vpq", t, exp_basis, id_basis, optimize=True)
    id_std = id_basis.std(axis=0, ddof=0)
    exp_std = exp_basis.std(axis=0, ddof=0)
    return BilinearModel(
        core=np.ascontiguousarray(core),
        exp_basis=exp_basis,
        id_basis=id_basis,
        mean_shape=tensor.mean_shape.copy(),
        faces=template.faces.copy(),
        uvs=None if template.uvs is None else template.uvs.copy(),
        mean_subtracted=tensor.mean_subtracted,
        id_stddev=np.maximum(id_std, 1e-12),
        exp_stddev=np.maximum(exp_std, 1e-12),
    )


def reconstruct(model: BilinearModel) -> np.ndarray:
    """Dense tensor implied by the model: core x2 exp_basis x3 id_basis."""
    return np.einsum("vpq,ep,iq->vei", model.core, model.exp_basis, model.id_basis, optimize=True)


def synthesize(model: BilinearModel, w_id: np.ndarray, w_exp: np.ndarray) -> np.ndarray:
    """Vertex vector for the given weights; bilinear in each argument."""
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    if len(w_id) != model.r_id or len(w_exp) != model.r_exp:
        raise ModelError(
            f"weight dimensions ({len(w_id)}, {len(w_exp)}) do not match ranks "
            f"({model.r_id}, {model.r_exp})"
        )
    flat = np.einsum("vpq,p,q->v", model.core, w_exp, w_id)
    if model.mean_subtracted:
        flat = flat + model.mean_shape
    return flat


def synthesize_mesh(model: BilinearModel, w_id, w_exp) -> Mesh:
    return model.mesh_from_vector(synthesize(model, w_id, w_exp))


def generate_blendshapes(model: BilinearModel, w_id: np.ndarray,
                         solve_keys: bool = True) -> BlendshapeRig:
    """Person-specific rig: B_i = synthesize(w_id, expression-basis row i).

    Row 0 of the expression basis is the neutral; the remaining rows become
    the blendshapes, which double as the rig's key expressions.
    """
    shapes = [synthesize_mesh(model, w_id, model.exp_basis[i]) for i in range(len(model.exp_basis))]
    rig = BlendshapeRig(neutral=shapes[0], shapes=shapes[1:], key_weights=[])
    if solve_keys:
        rig.key_weights = solve_key_weights(rig, shapes[1:])
    return rig


def solve_key_weights(rig: BlendshapeRig, key_meshes: list, tol: float = 1e-8,
                      max_iterations: int = 5000) -> list:
    """Bounded least-squares weights reproducing each key mesh from the rig.

    Minimizes ||B a + e0 - key||^2 subject to 0 <= a <= 1 by projected
    gradient with a fixed 1/L step, run to a KKT residual below `tol`
    (relative to the gradient scale).
    """
    for km in key_meshes:
        if km.topology_id != rig.topology_id:
            raise ModelError("topology mismatch")
    b = rig.delta_matrix()
    gram = b.T @ b
    lip = float(np.linalg.eigvalsh(gram).max()) if gram.size else 1.0
    lip = max(lip, 1e-12)
    e0 = rig.neutral.vertices.ravel()
    out = []
    for km in key_meshes:
        c = b.T @ (km.vertices.ravel() - e0)
        scale = max(1.0, float(np.abs(c).max()))
        alpha = np.clip(np.linalg.lstsq(gram + 1e-12 * np.eye(len(c)), c, rcond=None)[0], 0.0, 1.0)
        for _ in range(max_iterations):
            grad = gram @ alpha - c
            kkt = np.where(
                alpha <= 0.0, np.maximum(0.0, -grad),
                np.where(alpha >= 1.0, np.maximum(0.0, grad), np.abs(grad)),
            )
            if kkt.max() <= tol * scale:
                break
            alpha = np.clip(alpha - grad / lip, 0.0, 1.0)
        out.append(alpha)
    return out


def fit_to_mesh(model: BilinearModel, target: Mesh, n_id: int, n_exp: int,
                max_outer: int = 50, rel_tol: float = 1e-8) -> dict:
    """Alternating least squares for (w_id, w_exp) against a target mesh.

    Registered targets (matching topology) fit vertex-to-vertex; raw targets
    use closest-point correspondences recomputed every outer iteration. Each
    outer pass runs the two linear solves followed by a damped joint
    Gauss-Newton step; alternation alone crawls along the flat valley that
    mean-centering leaves in the core. The expression weight is kept at unit
    norm (magnitude folds into w_id). Returns w_id, w_exp (full rank length,
    trailing entries zero), per-vertex distances and the energy trace.
    """
    n_id = min(n_id, model.r_id)
    n_exp = min(n_exp, model.r_exp)
    registered = target.topology_id == model.topology_id
    core = model.core[:, :n_exp, :n_id]
    mean = model.mean_shape

    w_exp = np.zeros(n_exp)
    w_exp[0] = 1.0
    w_id = np.zeros(n_id)

    if registered:
        y = target.vertices.ravel() - mean
    tgt_bvh = None if registered else target.bvh()

    energies = []
    current = mean.copy()
    for it in range(max_outer):
        if not registered:
            _, _, pts, _ = _bvh.closest_point_batch(tgt_bvh, current.reshape(-1, 3))
            y = pts.ravel() - mean

        if it == 0:
            # unconstrained coefficients, then the nearest rank-1 (w_exp, w_id)
            # pair; exact when the target lies in the model span
            z = np.linalg.lstsq(core.reshape(core.shape[0], -1), y, rcond=None)[0]
            uz, sz, vzt = np.linalg.svd(z.reshape(n_exp, n_id))
            w_exp = uz[:, 0]
            w_id = sz[0] * vzt[0]

        a_id = np.einsum("vpq,p->vq", core, w_exp)
        w_id = np.linalg.lstsq(a_id, y, rcond=None)[0]
        a_exp = np.einsum("vpq,q->vp", core, w_id)
        w_exp = np.linalg.lstsq(a_exp, y, rcond=None)[0]
        w_exp, w_id = _joint_gn_step(core, y, w_exp, w_id)

        nrm = np.linalg.norm(w_exp)
        if nrm > 1e-12:
            w_exp = w_exp / nrm
            w_id = w_id * nrm

        resid = np.einsum("vpq,p,q->v", core, w_exp, w_id) - y
        energy = float((resid**2).sum())
        if energies:
            assert energy <= energies[-1] * (1 + 1e-9) + 1e-12, "fit energy increased"
        converged = bool(energies) and abs(energies[-1] - energy) <= rel_tol * max(energies[-1], 1e-300)
        energies.append(energy)
        current = y + resid + mean  # synthesized vertices (flat)
        if converged:
            break

    w_id_full = np.zeros(model.r_id)
    w_id_full[:n_id] = w_id
    w_exp_full = np.zeros(model.r_exp)
    w_exp_full[:n_exp] = w_exp
    synth = synthesize(model, w_id_full, w_exp_full)
    if registered:
        err = np.linalg.norm(synth.reshape(-1, 3) - target.vertices, axis=1)
    else:
        _, dist, _, _ = _bvh.closest_point_batch(tgt_bvh, synth.reshape(-1, 3))
        err = np.abs(dist)
    return {
        "w_id": w_id_full,
        "w_exp": w_exp_full,
        "per_vertex_error": err,
        "energy_trace": energies,
    }


def _joint_gn_step(core, y, w_exp, w_id):
    """One Levenberg-damped Gauss-Newton step on both weight blocks.

    Never increases the residual: damping grows until the step helps or the
    step is rejected outright.
    """
    j_exp = np.einsum("vpq,q->vp", core, w_id)
    j_id = np.einsum("vpq,p->vq", core, w_exp)
    r = j_id @ w_id - y  # == core x2 w_exp x3 w_id - y
    e0 = float(r @ r)
    jac = np.concatenate([j_exp, j_id], axis=1)
    jtj = jac.T @ jac
    jtr = jac.T @ r
    mu = 1e-10 * max(np.trace(jtj), 1e-300) / len(jtj)
    ne, ni = len(w_exp), len(w_id)
    for _ in range(12):
        try:
            delta = np.linalg.solve(jtj + mu * np.eye(ne + ni), -jtr)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        cand_exp = w_exp + delta[:ne]
        cand_id = w_id + delta[ne:]
        rc = np.einsum("vpq,p,q->v", core, cand_exp, cand_id) - y
        if float(rc @ rc) <= e0:
            return cand_exp, cand_id
        mu *= 10.0
    return w_exp, w_id


# ---------------------------------------------------------------------------
# Model container: FSBM binary + JSON manifest


def save_model(path, model: BilinearModel) -> None:
    """Write the binary model container and a JSON manifest next to it."""
    path = Path(path)
    nv3 = model.core.shape[0]
    n_exp, r_exp = model.exp_basis.shape
    n_id, r_id = model.id_basis.shape
    has_uv = model.uvs is not None
    header = struct.pack(
        "<4sI6QBBH",
        FSBM_MAGIC, FSBM_VERSION,
        nv3, n_exp, n_id, r_id, r_exp, len(model.faces),
        1 if model.mean_subtracted else 0,
        1 if has_uv else 0,
        0,
    )
    blocks = [
        model.mean_shape.astype("<f4").tobytes(),
        model.core.astype("<f4").tobytes(),
        model.exp_basis.astype("<f4").tobytes(),
        model.id_basis.astype("<f4").tobytes(),
        (model.exp_stddev if model.exp_stddev is not None else np.ones(r_exp)).astype("<f4").tobytes(),
        (model.id_stddev if model.id_stddev is not None else np.ones(r_id)).astype("<f4").tobytes(),
        model.faces.astype("<i4").tobytes(),
    ]
    if has_uv:
        # float64: the uv layout participates in the topology hash
        blocks.append(model.uvs.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(header)
        for b in blocks:
            fh.write(b)
    manifest = {
        "magic": "FSBM",
        "version": FSBM_VERSION,
        "vertex_values": nv3,
        "expressions": n_exp,
        "identities": n_id,
        "r_id": r_id,
        "r_exp": r_exp,
        "faces": len(model.faces),
        "mean_subtracted": model.mean_subtracted,
        "has_uv": has_uv,
        "layout": [
            "header <4sI6QBBH>",
            "mean float32[vertex_values]",
            "core float32[vertex_values * r_exp * r_id]",
            "exp_basis float32[expressions * r_exp]",
            "id_basis float32[identities * r_id]",
            "exp_stddev float32[r_exp]",
            "id_stddev float32[r_id]",
            "faces int32[faces * 3]",
            "uvs float64[vertex_values / 3 * 2] (if has_uv)",
        ],
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> BilinearModel:
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    head_size = struct.calcsize("<4sI6QBBH")
    magic, version, nv3, n_exp, n_id, r_id, r_exp, n_faces, mean_sub, has_uv, _pad = struct.unpack(
        "<4sI6QBBH", data[:head_size]
    )
    if magic != FSBM_MAGIC:
        raise ModelError("not a model container (bad magic)")
    if version != FSBM_VERSION:
        raise ModelError(f"unsupported model version {version}")
    off = head_size

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.astype(np.float64 if dtype == "<f4" else np.int32)

    mean = take(nv3, "<f4")
    core = take(nv3 * r_exp * r_id, "<f4").reshape(nv3, r_exp, r_id)
    exp_basis = take(n_exp * r_exp, "<f4").reshape(n_exp, r_exp)
    id_basis = take(n_id * r_id, "<f4").reshape(n_id, r_id)
    exp_std = take(r_exp, "<f4")
    id_std = take(r_id, "<f4")
    faces = take(n_faces * 3, "<i4").reshape(n_faces, 3)
    uvs = None
    if has_uv:
        uvs = np.frombuffer(data, dtype="<f8", count=(nv3 // 3) * 2, offset=off).reshape(-1, 2).copy()
    return BilinearModel(
        core=core, exp_basis=exp_basis, id_basis=id_basis, mean_shape=mean,
        faces=faces, uvs=uvs, mean_subtracted=bool(mean_sub),
        id_stddev=id_std, exp_stddev=exp_std,
    )
