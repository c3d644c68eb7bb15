"""Expression-dependent detail: activation masks, weight masks, map blending.

Each blendshape gets a UV activation mask from its per-vertex motion
magnitude. At rig time the current blendshape weights combine activation
masks into per-key weight masks, which blend the provider's key displacement
maps into one map for the posed expression; the neutral map fills the
remainder.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .displacement import DisplacementMap, apply_displacement, load_displacement, uv_pixel_index
from .errors import MeshError, ModelError
from .mesh import Mesh
from .morphable import BlendshapeRig

BUNDLE_SCHEMA_VERSION = 1


@dataclass
class ActivationMaskSet:
    """Per-blendshape motion masks in UV space, normalized to [0, 1]."""

    masks: np.ndarray  # (J, N, N)
    raw_max: np.ndarray  # (J,) pre-normalization peak motion (mm)

    @property
    def resolution(self) -> int:
        return self.masks.shape[1]

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class WeightMaskSet:
    m0: np.ndarray  # (N, N)
    mi: np.ndarray  # (K, N, N)

    @property
    def resolution(self) -> int:
        return self.m0.shape[0]


@dataclass
class RigWeights:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if np.any(self.alpha < 0.0) or np.any(self.alpha > 1.0):
            raise ModelError("blendshape weights must lie in [0, 1]")


class DisplacementProvider:
    """Source of the neutral and key-expression displacement maps.

    get(0) is the neutral map; get(1..key_count) are the key expressions.
    All maps share one resolution.
    """

    @property
    def key_count(self) -> int:
        raise NotImplementedError

    def get(self, index: int) -> DisplacementMap:
        raise NotImplementedError

    @property
    def resolution(self) -> int:
        return self.get(0).resolution


class ArrayProvider(DisplacementProvider):
    """Maps held in memory; index 0 is the neutral."""

    def __init__(self, maps):
        if not maps:
            raise ValueError("need at least a neutral map")
        res = maps[0].resolution
        for m in maps:
            if m.resolution != res:
                raise ValueError("provider maps must share one resolution")
        self._maps = list(maps)

    @property
    def key_count(self) -> int:
        return len(self._maps) - 1

    def get(self, index: int) -> DisplacementMap:
        return self._maps[index]


class ConstantProvider(DisplacementProvider):
    """Neutral-only fallback: every key expression reuses the neutral map."""

    def __init__(self, neutral: DisplacementMap, key_count: int):
        self._neutral = neutral
        self._count = key_count

    @property
    def key_count(self) -> int:
        return self._count

    def get(self, index: int) -> DisplacementMap:
        return self._neutral


class BakedDirectoryProvider(DisplacementProvider):
    """Maps baked to disk as key_000 (neutral), key_001.. (expressions)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        names = sorted(p.stem for p in self.directory.glob("key_*.png"))
        if not names:
            raise FileNotFoundError(f"no key_*.png maps under {directory}")
        self._names = names
        self._cache: dict = {}

    @property
    def key_count(self) -> int:
        return len(self._names) - 1

    def get(self, index: int) -> DisplacementMap:
        name = self._names[index]
        if name not in self._cache:
            self._cache[name] = load_displacement(self.directory / name)
        return self._cache[name]


# ---------------------------------------------------------------------------
# Masks


def compute_activation_masks(rig: BlendshapeRig, resolution: int,
                             normalize: str = "per_mask") -> ActivationMaskSet:
    """Rasterize each blendshape's vertex motion magnitude into UV space.

    Pixels outside the atlas are zero. normalize="per_mask" divides each mask
    by its own peak (masks with peak < 1e-9 stay all-zero); "global" divides
    all masks by the common peak.
    """
    neutral = rig.neutral
    if neutral.uvs is None:
        raise MeshError("no uv atlas")
    face, bary = uv_pixel_index(neutral, resolution)
    inside = face >= 0
    tri = neutral.faces[face[inside]]
    w = bary[inside]

    e0 = neutral.vertices
    masks = np.zeros((len(rig.shapes), resolution, resolution))
    raw_max = np.zeros(len(rig.shapes))
    for j, shape in enumerate(rig.shapes):
        mag = np.linalg.norm(shape.vertices - e0, axis=1)
        pix = np.einsum("ik,ik->i", w, mag[tri])
        grid = np.zeros((resolution, resolution))
        grid[inside] = pix
        raw_max[j] = grid.max()
        masks[j] = grid
    if normalize == "per_mask":
        for j in range(len(masks)):
            if raw_max[j] >= 1e-9:
                masks[j] /= raw_max[j]
            else:
                masks[j] = 0.0
    elif normalize == "global":
        peak = raw_max.max()
        masks = masks / peak if peak >= 1e-9 else masks * 0.0
    else:
        raise ValueError("normalize must be 'per_mask' or 'global'")
    return ActivationMaskSet(np.clip(masks, 0.0, 1.0), raw_max)


def compute_weight_masks(acts: ActivationMaskSet, weights: RigWeights,
                         key_weights) -> WeightMaskSet:
    """Blend activation masks into per-key weight masks.

    M_i = clamp01( sum_j alpha_j * key_weight_i[j] * A_j );
    M_0 = max(0, 1 - sum_i M_i).
    """
    alpha = weights.alpha
    if len(alpha) != len(acts):
        raise ModelError("alpha length must match activation mask count")
    kw = np.asarray(key_weights, dtype=np.float64)
    if kw.ndim != 2 or kw.shape[1] != len(alpha):
        raise ModelError("key weights must be (K, J)")
    coeff = kw * alpha[None, :]  # (K, J)
    mi = np.einsum("kj,jxy->kxy", coeff, acts.masks)
    mi = np.clip(mi, 0.0, 1.0)
    m0 = np.maximum(0.0, 1.0 - mi.sum(axis=0))
    return WeightMaskSet(m0, mi)


def blend_displacement(provider: DisplacementProvider, w: WeightMaskSet) -> DisplacementMap:
    """Pixelwise F = M0 * F0 + sum_i Mi * Fi over the provider's maps.

    Invalid provider pixels contribute zero; an output pixel is invalid only
    where every contributing map (mask > 0) is invalid there.
    """
    if provider.key_count != len(w.mi):
        raise ModelError(
            f"provider has {provider.key_count} key maps but {len(w.mi)} weight masks"
        )
    res = w.resolution
    f0 = provider.get(0)
    if f0.resolution != res:
        raise ModelError("resolution mismatch between provider maps and masks")
    out = w.m0 * f0.masked()
    any_valid = (w.m0 > 0.0) & f0.valid
    any_contrib = w.m0 > 0.0
    for i in range(provider.key_count):
        fi = provider.get(i + 1)
        if fi.resolution != res:
            raise ModelError("resolution mismatch between provider maps and masks")
        mask = w.mi[i]
        out = out + mask * fi.masked()
        contributes = mask > 0.0
        any_valid |= contributes & fi.valid
        any_contrib |= contributes
    valid = np.where(any_contrib, any_valid, False)
    return DisplacementMap(res, out, valid)


def rig_detailed_mesh(rig: BlendshapeRig, weights: RigWeights, acts: ActivationMaskSet,
                      provider: DisplacementProvider, subdiv: int) -> Mesh:
    """Pose the rig and re-apply expression-blended detail."""
    base = rig.blend(weights.alpha)
    wm = compute_weight_masks(acts, weights, rig.key_weights)
    f = blend_displacement(provider, wm)
    return apply_displacement(base, f, subdiv)


# ---------------------------------------------------------------------------
# Rig bundle export (consumed by the browser viewer)


def _quantize_unit(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(grid * 65535.0), 0, 65535).astype(np.uint16)


def export_bundle(rig: BlendshapeRig, acts: ActivationMaskSet,
                  provider: DisplacementProvider, out_dir) -> dict:
    """Write the static rig bundle: manifest, buffers, masks and key maps.

    Buffers are little-endian float32 / uint32; masks quantize [0,1] over the
    full 16-bit range; displacement maps use the zero-sentinel quantization
    with per-map scale/offset recorded in the manifest.
    """
    from .displacement import quantize

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)

    neutral = rig.neutral
    (out / "neutral.f32").write_bytes(neutral.vertices.astype("<f4").tobytes())
    (out / "faces.u32").write_bytes(neutral.faces.astype("<u4").tobytes())
    if neutral.uvs is not None:
        (out / "uvs.f32").write_bytes(neutral.uvs.astype("<f4").tobytes())
    for j, shape in enumerate(rig.shapes):
        (out / f"blendshape_{j:03d}.f32").write_bytes(shape.vertices.astype("<f4").tobytes())

    mask_entries = []
    for j in range(len(acts)):
        name = f"masks/activation_{j:03d}.png"
        (out / name).write_bytes(pngio.encode_gray16(_quantize_unit(acts.masks[j])))
        mask_entries.append({"file": name, "raw_max_mm": float(acts.raw_max[j])})

    map_entries = []
    for i in range(provider.key_count + 1):
        dmap = provider.get(i)
        codes, scale, offset = quantize(dmap)
        name = f"maps/key_{i:03d}.png"
        (out / name).write_bytes(pngio.encode_gray16(codes))
        sidecar = {
            "resolution": int(dmap.resolution),
            "scale_mm": float(scale),
            "offset_mm": float(offset),
            "valid": "zero-sentinel",
            "row0_v": 0.0,
        }
        with open(out / f"maps/key_{i:03d}.json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
            fh.write("\n")
        map_entries.append({
            "file": name,
            "scale_mm": float(scale),
            "offset_mm": float(offset),
            "valid": "zero-sentinel",
        })

    with open(out / "key_weights.json", "w") as fh:
        json.dump([[float(x) for x in kw] for kw in rig.key_weights], fh, indent=1)
        fh.write("\n")

    manifest = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "vertex_count": int(neutral.n_vertices),
        "face_count": int(neutral.n_faces),
        "blendshape_count": len(rig.shapes),
        "key_count": provider.key_count,
        "resolution": int(acts.resolution),
        "buffers": {
            "neutral": "neutral.f32",
            "faces": "faces.u32",
            "uvs": "uvs.f32" if neutral.uvs is not None else None,
            "blendshapes": [f"blendshape_{j:03d}.f32" for j in range(len(rig.shapes))],
        },
        "masks": mask_entries,
        "maps": map_entries,
        "key_weights": "key_weights.json",
        "mask_quantization": {"scale": 1.0 / 65535.0, "offset": 0.0},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def summary_vector(arr: np.ndarray, samples: int = 64) -> dict:
    """Tolerance-comparable digest of a float array for conformance files."""
    flat = np.asarray(arr, dtype=np.float64).ravel()
    stride = max(1, len(flat) // samples)
    return {
        "count": int(flat.size),
        "mean": float(flat.mean()),
        "abs_mean": float(np.abs(flat).mean()),
        "rms": float(np.sqrt((flat**2).mean())),
        "min": float(flat.min()),
        "max": float(flat.max()),
        "samples": [float(x) for x in flat[::stride][:samples]],
    }


def export_conformance_vectors(rig: BlendshapeRig, acts: ActivationMaskSet,
                               provider: DisplacementProvider, out_path,
                               extra_alphas=None) -> dict:
    """Shared test vectors for the viewer: alpha -> blended map / vertex digests.

    Always includes the zero vector and every one-hot; float32-rounded before
    digesting to match the client's arithmetic domain.
    """
    j = len(rig.shapes)
    alphas = [np.zeros(j)]
    alphas += [np.eye(j)[k] for k in range(j)]
    if extra_alphas is not None:
        alphas += [np.asarray(a, dtype=np.float64) for a in extra_alphas]

    neutral32 = rig.neutral.vertices.astype(np.float32)
    cases = []
    for alpha in alphas:
        w = RigWeights(alpha)
        wm = compute_weight_masks(acts, w, rig.key_weights)
        f = blend_displacement(provider, wm)
        base = rig.blend(alpha)
        cases.append({
            "alpha": [float(a) for a in alpha],
            "blended_map": summary_vector(f.masked().astype(np.float32)),
            "vertices": summary_vector(base.vertices.astype(np.float32)),
            "weight_mask_sum": summary_vector((wm.m0 + wm.mi.sum(axis=0)).astype(np.float32)),
        })
    doc = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "neutral_sha256": hashlib.sha256(neutral32.astype("<f4").tobytes()).hexdigest(),
        "tolerance": 1e-3,
        "cases": cases,
    }
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc
