"""Procedural face-like test subjects with analytically known ground truth.

A subject is a face patch over a UV grid. Truth base meshes combine a mean
face with identity / expression displacement fields through a low-rank
bilinear construction, so a population tensor has a known multilinear rank.
Raw "scan" meshes are midpoint-subdivided bases displaced along their normals
by a wrinkle field whose dynamic part scales with local expression activity;
the field itself is exposed for use as an oracle.
"""
from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, save_mesh
from .primitives import grid_faces
from .registration import LandmarkSet, save_landmarks
from .subdivision import subdivide

N_ID_FIELDS = 4  # identity displacement components (beyond the shared mean)
N_EXP_FIELDS = 2  # expression displacement components
TRUTH_RANK = (N_ID_FIELDS + 1, N_EXP_FIELDS + 1)  # (identity, expression) modes

TIERS = {
    "tiny": (29, 1),
    "small": (45, 1),
    "default": (90, 2),
}

FACE_W = 150.0  # mm
FACE_H = 190.0
DOME_DEPTH = 55.0
UV_MARGIN = 0.02  # atlas inset; leaves a gap so out-of-chart queries exist

# semantic landmark locations in grid coordinates (gu, gv in [0,1]^2)
LANDMARK_SPOTS = (
    (0, 0.50, 0.46),  # nose tip
    (1, 0.50, 0.56),  # nose bridge
    (2, 0.42, 0.60),  # eye inner L
    (3, 0.58, 0.60),  # eye inner R
    (4, 0.33, 0.61),  # eye outer L
    (5, 0.67, 0.61),  # eye outer R
    (6, 0.37, 0.68),  # brow L
    (7, 0.63, 0.68),  # brow R
    (8, 0.40, 0.30),  # mouth corner L
    (9, 0.60, 0.30),  # mouth corner R
    (10, 0.50, 0.33),  # upper lip
    (11, 0.50, 0.26),  # lower lip
    (12, 0.50, 0.14),  # chin
    (13, 0.30, 0.45),  # cheek L
    (14, 0.70, 0.45),  # cheek R
    (15, 0.50, 0.80),  # forehead
    (16, 0.22, 0.35),  # jaw L (contour)
    (17, 0.78, 0.35),  # jaw R (contour)
    (18, 0.375, 0.60),  # eye center L
    (19, 0.625, 0.60),  # eye center R
    (20, 0.44, 0.42),  # nose side L
    (21, 0.56, 0.42),  # nose side R
    (22, 0.47, 0.40),  # nostril L
    (23, 0.53, 0.40),  # nostril R
    (24, 0.43, 0.67),  # brow inner L
    (25, 0.57, 0.67),  # brow inner R
    (26, 0.30, 0.67),  # brow outer L
    (27, 0.70, 0.67),  # brow outer R
    (28, 0.45, 0.31),  # lip side L
    (29, 0.55, 0.31),  # lip side R
    (30, 0.42, 0.16),  # chin side L
    (31, 0.58, 0.16),  # chin side R
    (32, 0.35, 0.78),  # forehead L
    (33, 0.65, 0.78),  # forehead R
    (34, 0.34, 0.36),  # lower cheek L
    (35, 0.66, 0.36),  # lower cheek R
    (36, 0.24, 0.62),  # temple L (contour)
    (37, 0.76, 0.62),  # temple R (contour)
)
CONTOUR_SEMANTIC_IDS = (16, 17, 36, 37)


@dataclass(frozen=True)
class WrinkleParams:
    frequency: float = 16.0
    amplitude_mm: float = 1.2
    expression_coupling: float = 0.7


@dataclass
class SyntheticSpec:
    """Deterministic recipe for one subject; equal specs give equal meshes."""

    id_seed: int = 0
    id_params: np.ndarray | None = None  # (N_ID_FIELDS,)
    exp_params: np.ndarray | None = None  # (E, N_EXP_FIELDS), row 0 all zero
    wrinkle: WrinkleParams = field(default_factory=WrinkleParams)
    tier: str = "small"

    def resolved_id_params(self) -> np.ndarray:
        if self.id_params is not None:
            return np.asarray(self.id_params, dtype=np.float64)
        rng = np.random.default_rng(self.id_seed)
        return rng.normal(0.0, 1.0, N_ID_FIELDS)

    def resolved_exp_params(self, n_expressions: int) -> np.ndarray:
        if self.exp_params is not None:
            p = np.asarray(self.exp_params, dtype=np.float64)
            if p.shape != (n_expressions, N_EXP_FIELDS):
                raise ValueError("exp_params shape mismatch")
            if np.any(p[0] != 0.0):
                raise ValueError("expression 0 is the neutral and must have zero amplitudes")
            return p
        return default_expression_params(n_expressions)


def default_expression_params(n_expressions: int) -> np.ndarray:
    """Fixed per-expression amplitudes; row 0 neutral, others spread in [-1,1]."""
    rng = np.random.default_rng(2024)
    p = rng.uniform(-1.0, 1.0, (max(n_expressions, 1), N_EXP_FIELDS))
    p[0] = 0.0
    scale = np.array([1.0, 0.8])
    return p * scale


# ---------------------------------------------------------------------------
# Geometry construction


def _grid_n(tier: str) -> tuple:
    try:
        return TIERS[tier]
    except KeyError:
        raise ValueError(f"unknown tier {tier!r}; options: {sorted(TIERS)}") from None


def base_grid(tier: str = "small") -> Mesh:
    """Flat template grid carrying the shared topology and UV atlas."""
    n, _ = _grid_n(tier)
    g = np.linspace(0.0, 1.0, n)
    gu, gv = np.meshgrid(g, g, indexing="xy")
    gu = gu.ravel()
    gv = gv.ravel()
    uvs = np.column_stack([UV_MARGIN + (1 - 2 * UV_MARGIN) * gu,
                           UV_MARGIN + (1 - 2 * UV_MARGIN) * gv])
    verts = np.column_stack([(gu - 0.5) * FACE_W, (gv - 0.5) * FACE_H, np.zeros(n * n)])
    return Mesh(verts, grid_faces(n), uvs)


def _gauss(gu, gv, cu, cv, su, sv):
    return np.exp(-0.5 * (((gu - cu) / su) ** 2 + ((gv - cv) / sv) ** 2))


def _collar_window(gu, gv):
    """Smooth window that is 1 in the interior and 0 on the patch boundary."""

    def ramp(t):
        x = np.clip(t / 0.12, 0.0, 1.0)
        return x * x * (3.0 - 2.0 * x)

    return ramp(gu) * ramp(1.0 - gu) * ramp(gv) * ramp(1.0 - gv)


def _field_bank(gu: np.ndarray, gv: np.ndarray):
    """Mean face and displacement component fields evaluated on grid coords.

    Returns (mean (V,3), core (r_id, r_exp, V, 3)) with core[0,0] = 0,
    core[a,0] = identity-only fields, core[0,b] = expression-only fields and
    small interaction fields elsewhere.
    """
    win = _collar_window(gu, gv)
    nv = len(gu)
    zhat = np.zeros((nv, 3))
    zhat[:, 2] = 1.0

    def zfield(h):
        out = np.zeros((nv, 3))
        out[:, 2] = h * win
        return out

    dome = DOME_DEPTH * np.sin(np.pi * np.clip(gu, 0, 1)) * np.sin(np.pi * np.clip(gv, 0, 1)) ** 0.8
    nose = 14.0 * _gauss(gu, gv, 0.5, 0.46, 0.045, 0.09)
    brow = 4.0 * (_gauss(gu, gv, 0.37, 0.66, 0.08, 0.03) + _gauss(gu, gv, 0.63, 0.66, 0.08, 0.03))
    lips = 3.5 * _gauss(gu, gv, 0.5, 0.30, 0.11, 0.035)
    sockets = -3.0 * (_gauss(gu, gv, 0.40, 0.60, 0.055, 0.035) + _gauss(gu, gv, 0.60, 0.60, 0.055, 0.035))
    chin = 5.0 * _gauss(gu, gv, 0.5, 0.13, 0.07, 0.05)
    mean = np.zeros((nv, 3))
    mean[:, 2] = (dome + (nose + brow + lips + sockets + chin) * win)

    r_id = N_ID_FIELDS + 1
    r_exp = N_EXP_FIELDS + 1
    core = np.zeros((r_id, r_exp, nv, 3))

    # identity components (constant across expressions)
    core[1, 0] = zfield(3.5 * _gauss(gu, gv, 0.5, 0.46, 0.06, 0.11))  # nose prominence
    width = np.zeros((nv, 3))
    width[:, 0] = 6.0 * np.sin(np.pi * gu) * np.sign(gu - 0.5) * win  # face width
    width[:, 2] = 1.5 * _gauss(gu, gv, 0.5, 0.5, 0.4, 0.4) * win
    core[2, 0] = width
    core[3, 0] = zfield(2.5 * (_gauss(gu, gv, 0.30, 0.45, 0.08, 0.08)
                               + _gauss(gu, gv, 0.70, 0.45, 0.08, 0.08)))  # cheekbones
    core[4, 0] = zfield(3.0 * _gauss(gu, gv, 0.5, 0.16, 0.10, 0.08)
                        + 1.6 * (_gauss(gu, gv, 0.37, 0.68, 0.09, 0.03)
                                 + _gauss(gu, gv, 0.63, 0.68, 0.09, 0.03)))  # jaw/brow mass

    # expression components (shared across identities)
    smile = np.zeros((nv, 3))
    corner_l = _gauss(gu, gv, 0.40, 0.30, 0.06, 0.05)
    corner_r = _gauss(gu, gv, 0.60, 0.30, 0.06, 0.05)
    cheeks = _gauss(gu, gv, 0.33, 0.42, 0.07, 0.06) + _gauss(gu, gv, 0.67, 0.42, 0.07, 0.06)
    smile[:, 0] = 4.0 * (corner_r - corner_l)
    smile[:, 1] = 5.0 * (corner_l + corner_r)
    smile[:, 2] = 3.0 * cheeks
    core[0, 1] = smile * win[:, None]

    raise_jaw = np.zeros((nv, 3))
    brows = _gauss(gu, gv, 0.37, 0.68, 0.10, 0.045) + _gauss(gu, gv, 0.63, 0.68, 0.10, 0.045)
    jaw = _gauss(gu, gv, 0.5, 0.15, 0.13, 0.09)
    raise_jaw[:, 1] = 4.5 * brows - 7.0 * jaw
    raise_jaw[:, 2] = 1.5 * brows
    core[0, 2] = raise_jaw * win[:, None]

    # mild identity x expression interactions keep the core generic
    for a in range(1, r_id):
        envelope = np.abs(core[a, 0]).sum(axis=1, keepdims=True)
        envelope = envelope / max(envelope.max(), 1e-9)
        for b in range(1, r_exp):
            core[a, b] = 0.15 * envelope * core[0, b]
    return mean, core


def _truth_vertices(grid: Mesh, mean, core, w_id_row, w_exp_row) -> np.ndarray:
    disp = np.einsum("a,b,abvc->vc", w_id_row, w_exp_row, core)
    return grid.vertices + mean + disp


def _weight_rows(id_params: np.ndarray, exp_params_row: np.ndarray):
    w_id = np.concatenate([[1.0], id_params])
    w_exp = np.concatenate([[1.0], exp_params_row])
    return w_id, w_exp


# ---------------------------------------------------------------------------
# Wrinkle field (raw scan detail layer)


def _wrinkle_patterns(gu, gv, params: WrinkleParams):
    """Localized wrinkle bands (static) and expression-activated bands (dynamic).

    Fields are exactly zero away from the bands (gaussian envelopes fall below
    the 16-bit quantization step), matching how detail residuals concentrate
    in crease regions on well-registered faces.
    """
    f = params.frequency
    win = _collar_window(gu, gv)
    forehead_env = _gauss(gu, gv, 0.5, 0.74, 0.11, 0.042)
    crows_env = _gauss(gu, gv, 0.26, 0.58, 0.030, 0.034) + _gauss(gu, gv, 0.74, 0.58, 0.030, 0.034)
    naso_env = _gauss(gu, gv, 0.36, 0.33, 0.026, 0.048) + _gauss(gu, gv, 0.64, 0.33, 0.026, 0.048)
    chin_env = _gauss(gu, gv, 0.50, 0.20, 0.05, 0.022)
    cheek_env = _gauss(gu, gv, 0.30, 0.46, 0.038, 0.034) + _gauss(gu, gv, 0.70, 0.46, 0.038, 0.034)
    static = (
        0.9 * forehead_env * np.sin(2 * np.pi * 1.1 * f * gv)
        + 0.7 * crows_env * np.sin(2 * np.pi * f * (0.8 * gu + 0.5 * gv))
        + 1.0 * naso_env * np.sin(2 * np.pi * f * (gu + 0.6 * gv))
        + 0.6 * chin_env * np.sin(2 * np.pi * f * gv)
        + 0.45 * cheek_env * np.sin(2 * np.pi * 0.8 * f * (gu + gv))
    ) * win

    dyn_forehead = _gauss(gu, gv, 0.5, 0.76, 0.12, 0.05) * np.sin(2 * np.pi * 1.25 * f * gv)
    dyn_naso = (
        _gauss(gu, gv, 0.37, 0.35, 0.028, 0.05) + _gauss(gu, gv, 0.63, 0.35, 0.028, 0.05)
    ) * np.sin(2 * np.pi * f * (gu + 0.6 * gv))
    dyn_eyes = crows_env * np.sin(2 * np.pi * 1.15 * f * (0.7 * gu - 0.6 * gv))
    dynamic = (1.0 * dyn_forehead + 0.9 * dyn_naso + 0.5 * dyn_eyes) * win
    return static, dynamic


class SubjectTruth:
    """Analytic truth for one subject: meshes plus oracle field evaluation."""

    def __init__(self, spec: SyntheticSpec, n_expressions: int):
        self.spec = spec
        self.n_expressions = n_expressions
        n, self.raw_subdiv = _grid_n(spec.tier)
        self.grid = base_grid(spec.tier)
        g = np.linspace(0.0, 1.0, n)
        gu, gv = np.meshgrid(g, g, indexing="xy")
        self._gu = gu.ravel()
        self._gv = gv.ravel()
        self.mean, self.core = _field_bank(self._gu, self._gv)
        self.id_params = spec.resolved_id_params()
        self.exp_params = spec.resolved_exp_params(n_expressions)
        self.w_id, _ = _weight_rows(self.id_params, self.exp_params[0])

    # grid coords <-> uv: uv = margin + (1-2*margin) * grid
    @staticmethod
    def uv_to_grid(uv: np.ndarray) -> np.ndarray:
        return (np.asarray(uv, dtype=np.float64) - UV_MARGIN) / (1 - 2 * UV_MARGIN)

    def base_mesh(self, e: int) -> Mesh:
        _, w_exp = _weight_rows(self.id_params, self.exp_params[e])
        return self.grid.with_vertices(_truth_vertices(self.grid, self.mean, self.core, self.w_id, w_exp))

    def expression_gain(self, e: int, gu, gv) -> np.ndarray:
        """Normalized local expression activity in [0,1] at grid coords."""
        _, w_exp = _weight_rows(self.id_params, self.exp_params[e])
        disp = np.einsum("a,b,abvc->vc", self.w_id, w_exp, self.core)
        disp = disp - np.einsum("a,avc->vc", self.w_id, self.core[:, 0])  # drop expression-independent part
        mag = np.linalg.norm(disp, axis=1)
        peak = mag.max()
        if peak < 1e-9:
            return np.zeros(np.shape(gu))
        field_on_grid = mag / peak
        return _bilinear_grid_sample(field_on_grid, self._gu, self._gv, gu, gv)

    def wrinkle_field(self, e: int, uv_points: np.ndarray) -> np.ndarray:
        """Signed wrinkle offsets (mm) at UV points for expression e."""
        uv_points = np.asarray(uv_points, dtype=np.float64)
        g = self.uv_to_grid(uv_points)
        gu = g[..., 0]
        gv = g[..., 1]
        p = self.spec.wrinkle
        static, dynamic = _wrinkle_patterns(gu, gv, p)
        gain = self.expression_gain(e, gu, gv)
        return p.amplitude_mm * (static + p.expression_coupling * gain * dynamic)

    def raw_mesh(self, e: int) -> Mesh:
        base = self.base_mesh(e)
        dense = subdivide(base, self.raw_subdiv, "midpoint")
        offsets = self.wrinkle_field(e, dense.uvs)
        verts = dense.vertices + offsets[:, None] * dense.vertex_normals()
        return Mesh(verts, dense.faces, dense.uvs)

    def landmarks(self, e: int) -> LandmarkSet:
        ids, tvi = template_landmark_vertices(self.spec.tier)
        base = self.base_mesh(e)
        return LandmarkSet(ids, tvi, points3d=base.vertices[tvi])

    def registration_landmarks(self, e: int) -> LandmarkSet:
        ids, tvi = registration_landmark_vertices(self.spec.tier)
        base = self.base_mesh(e)
        return LandmarkSet(ids, tvi, points3d=base.vertices[tvi])


def template_landmark_vertices(tier: str = "small"):
    """Semantic ids and their template vertex indices for a tier's grid."""
    n, _ = _grid_n(tier)
    g = np.linspace(0.0, 1.0, n)
    gu, gv = np.meshgrid(g, g, indexing="xy")
    gu = gu.ravel()
    gv = gv.ravel()
    ids = []
    tvi = []
    for sem, cu, cv in LANDMARK_SPOTS:
        d2 = (gu - cu) ** 2 + (gv - cv) ** 2
        ids.append(sem)
        tvi.append(int(np.argmin(d2)))
    return np.array(ids), np.array(tvi)


def registration_landmark_vertices(tier: str = "small", step: int | None = None):
    """Dense correspondence protocol for registration fixtures.

    Grid-spaced vertices including the rim ring. The flat outer collar is
    featureless, so without rim pins the registered mesh slides tangentially
    there; dense synthetic correspondences stand in for the photometric cues
    a real pipeline would use.
    """
    n, _ = _grid_n(tier)
    if step is None:
        step = max(2, n // 15)
    idx = np.unique(np.arange(n * n).reshape(n, n)[::step, ::step].ravel())
    return np.arange(len(idx)), idx


def _bilinear_grid_sample(values_flat: np.ndarray, gu_grid, gv_grid, qu, qv):
    """Sample a per-grid-vertex scalar field at query grid coords."""
    n = int(round(np.sqrt(len(values_flat))))
    img = values_flat.reshape(n, n)  # [row=v, col=u]
    x = np.clip(np.asarray(qu) * (n - 1), 0, n - 1)
    y = np.clip(np.asarray(qv) * (n - 1), 0, n - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, n - 1)
    y1 = np.minimum(y0 + 1, n - 1)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


# ---------------------------------------------------------------------------
# Public generation API


def generate_subject(spec: SyntheticSpec, n_expressions: int) -> SubjectTruth:
    """Build the truth object for one subject (meshes evaluated lazily)."""
    if n_expressions < 1:
        raise ValueError("need at least one expression")
    return SubjectTruth(spec, n_expressions)


def mean_subject(tier: str = "small", n_expressions: int = 5,
                 exp_params: np.ndarray | None = None) -> SubjectTruth:
    """The population-mean identity; its meshes serve as expression templates."""
    spec = SyntheticSpec(id_params=np.zeros(N_ID_FIELDS), tier=tier,
                         exp_params=exp_params)
    return SubjectTruth(spec, n_expressions)


def generate_population(n_id: int, n_exp: int, seed: int, out_dir,
                        tier: str = "small", write_raw: bool = True,
                        wrinkle: WrinkleParams | None = None) -> dict:
    """Write a dataset directory of subjects with truth files and landmarks.

    Identity weights are drawn from a seeded Gaussian, so the stack of truth
    base meshes forms a tensor of known multilinear rank. Returns the manifest.
    """
    from pathlib import Path

    if n_id < 2:
        raise ValueError("need at least two identities")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    id_rows = rng.normal(0.0, 1.0, (n_id, N_ID_FIELDS))
    exp_rows = default_expression_params(n_exp)
    wrinkle = wrinkle or WrinkleParams()

    template = mean_subject(tier, n_exp, exp_rows)
    tdir = out / "template"
    (tdir / "expressions").mkdir(parents=True, exist_ok=True)
    save_mesh(tdir / "template.ply", template.base_mesh(0))
    for e in range(n_exp):
        save_mesh(tdir / "expressions" / f"exp_{e:03d}.ply", template.base_mesh(e))
    save_landmarks(tdir / "landmarks.json", template.landmarks(0))

    subjects = []
    for i in range(n_id):
        spec = SyntheticSpec(id_seed=seed * 100003 + i, id_params=id_rows[i],
                             exp_params=exp_rows, wrinkle=wrinkle, tier=tier)
        subj = SubjectTruth(spec, n_exp)
        sdir = out / "subjects" / f"subj_{i:03d}"
        for sub in ("raw", "truth_base", "landmarks", "registration_landmarks", "truth_field"):
            (sdir / sub).mkdir(parents=True, exist_ok=True)
        for e in range(n_exp):
            base = subj.base_mesh(e)
            save_mesh(sdir / "truth_base" / f"exp_{e:03d}.ply", base)
            if write_raw:
                save_mesh(sdir / "raw" / f"exp_{e:03d}.ply", subj.raw_mesh(e), normals=True)
            save_landmarks(sdir / "landmarks" / f"exp_{e:03d}.json", subj.landmarks(e))
            save_landmarks(sdir / "registration_landmarks" / f"exp_{e:03d}.json",
                           subj.registration_landmarks(e))
            np.save(sdir / "truth_field" / f"exp_{e:03d}.npy",
                    _field_grid(subj, e, 256).astype(np.float32))
        subjects.append({
            "name": f"subj_{i:03d}",
            "id_params": [float(x) for x in id_rows[i]],
            "expressions": n_exp,
        })

    manifest = {
        "schema_version": 1,
        "kind": "facekit-synthetic-population",
        "n_id": n_id,
        "n_exp": n_exp,
        "seed": seed,
        "tier": tier,
        "truth_rank": list(TRUTH_RANK),
        "topology_id": template.grid.topology_id,
        "wrinkle": {
            "frequency": wrinkle.frequency,
            "amplitude_mm": wrinkle.amplitude_mm,
            "expression_coupling": wrinkle.expression_coupling,
        },
        "exp_params": [[float(x) for x in row] for row in exp_rows],
        "subjects": subjects,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_dataset_schema(out / "schema.json")
    return manifest


def _field_grid(subj: SubjectTruth, e: int, resolution: int) -> np.ndarray:
    c = (np.arange(resolution) + 0.5) / resolution
    uu, vv = np.meshgrid(c, c, indexing="xy")
    pts = np.stack([uu, vv], axis=-1)
    return subj.wrinkle_field(e, pts)


def _write_dataset_schema(path) -> None:
    schema = {
        "layout": {
            "manifest.json": "population manifest (see kind facekit-synthetic-population)",
            "schema.json": "this file",
            "template/template.ply": "neutral template mesh (shared topology, UVs)",
            "template/expressions/exp_EEE.ply": "mean-identity expression meshes",
            "template/landmarks.json": "semantic id -> template vertex id table",
            "subjects/subj_III/raw/exp_EEE.ply": "dense scan-like mesh (binary ply, normals)",
            "subjects/subj_III/truth_base/exp_EEE.ply": "ground-truth registered base mesh",
            "subjects/subj_III/landmarks/exp_EEE.json": "per-scan semantic 3d landmarks",
            "subjects/subj_III/registration_landmarks/exp_EEE.json":
                "dense grid correspondences (registration protocol)",
            "subjects/subj_III/truth_field/exp_EEE.npy": "wrinkle field sampled 256x256 (float32 mm)",
        }
    }
    with open(path, "w") as fh:
        json.dump(schema, fh, indent=1, sort_keys=True)
        fh.write("\n")


def synthetic_albedo_model(mesh: Mesh, k: int = 6, seed: int = 0):
    """Skin-toned per-vertex albedo PCA over a template mesh.

    Mean is a smooth skin gradient; the basis holds k orthonormalized smooth
    color fields (gaussian blobs and gradients in UV) with decaying stddevs.
    """
    from .fitting import AlbedoModel

    if mesh.uvs is None:
        raise ValueError("albedo model needs a UV atlas")
    gu = mesh.uvs[:, 0]
    gv = mesh.uvs[:, 1]
    nv = len(gu)
    mean = np.empty((nv, 3))
    mean[:, 0] = 0.72 - 0.06 * gv
    mean[:, 1] = 0.54 - 0.05 * gv + 0.03 * _gauss(gu, gv, 0.5, 0.4, 0.3, 0.3)
    mean[:, 2] = 0.45 - 0.04 * gv

    rng = np.random.default_rng(seed)
    fields = []
    for j in range(k):
        cu, cv = rng.uniform(0.2, 0.8, 2)
        su, sv = rng.uniform(0.08, 0.3, 2)
        blob = _gauss(gu, gv, cu, cv, su, sv)
        color = rng.normal(0.0, 1.0, 3)
        grad = rng.normal(0.0, 0.3) * (gu - 0.5) + rng.normal(0.0, 0.3) * (gv - 0.5)
        fields.append((blob + grad)[:, None] * color[None, :])
    basis = np.stack([f.ravel() for f in fields], axis=1)  # (3V, k)
    q, _ = np.linalg.qr(basis)
    stddev = 0.08 * (0.75 ** np.arange(k))
    return AlbedoModel(mean, q, stddev)


def population_checksum(out_dir) -> str:
    """Order-independent digest over a dataset directory (for determinism tests)."""
    from pathlib import Path

    h = hashlib.sha256()
    root = Path(out_dir)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
