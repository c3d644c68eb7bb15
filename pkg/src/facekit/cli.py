"""Command-line pipeline: synth, register, bake, build-model, fit, rig, export-bundle.

Every command writes its artifact plus a JSON run-report (inputs hash, merged
config, metrics, timing). Exit codes: 0 ok, 1 pipeline error, 2 usage/config.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import (
    FacekitError,
    FitError,
    MeshError,
    ModelError,
    PipelineError,
    RegistrationError,
    RenderError,
)

REPORT_SCHEMA_VERSION = 1

_ERROR_MODULE = {
    MeshError: "mesh_core",
    RegistrationError: "registration",
    ModelError: "morphable",
    RenderError: "render",
    FitError: "fitting",
    PipelineError: "cli",
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = load_config(args.config, _flag_overrides(args))
    except PipelineError as exc:
        print(f"cli: {exc}", file=sys.stderr)
        return 2
    threads = cfg["threads"]
    if threads:
        import numba

        numba.set_num_threads(threads)
    try:
        return args.func(args, cfg)
    except FacekitError as exc:
        module = next((m for t, m in _ERROR_MODULE.items() if isinstance(exc, t)), "facekit")
        print(f"{module}: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cli: {args.command} failed: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facekit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.set_defaults(command=None)
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", default=None, help="pipeline config JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--tier", choices=("tiny", "small", "default"), default=None)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("out", help="output dataset directory")
    sp.add_argument("--ids", type=int, default=None)
    sp.add_argument("--exps", type=int, default=None)
    sp.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    sp.add_argument("--no-raw", action="store_true")
    sp.add_argument("--no-fixtures", action="store_true")
    sp.add_argument("--image-size", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("register", help="register the template onto every scan")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("bake", help="bake displacement maps for registered scans")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--registered", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--smooth-raw", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_bake)

    sp = sub.add_parser("build-model", help="build the bilinear model from registered meshes")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--registered", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--r-id", type=int, default=None)
    sp.add_argument("--r-exp", type=int, default=None)
    sp.add_argument("--use-truth", action="store_true",
                    help="assemble from truth base meshes instead of registered ones")
    common(sp)
    sp.set_defaults(func=cmd_build_model)

    sp = sub.add_parser("fit", help="fit the model to one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--albedo", default=None, help="albedo npz (default: <model>.albedo.npz)")
    sp.add_argument("--image", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--out", required=True, help="output prefix (.json/.bin)")
    sp.add_argument("--truth-mesh", default=None, help="optional truth mesh for metrics")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("rig", help="export a rig bundle for a fitted identity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fit", required=True, help="fit result prefix")
    sp.add_argument("--maps", required=True, help="directory of key_###.png displacement maps")
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha", default=None, help="comma-separated weights for a posed sample")
    sp.add_argument("--key-weights", default=None,
                    help="JSON file overriding the solved key-expression weights")
    common(sp)
    sp.set_defaults(func=cmd_rig)

    sp = sub.add_parser("export-bundle", help="rig bundle plus viewer conformance vectors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--maps", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--extra-alphas", type=int, default=4)
    sp.add_argument("--key-weights", default=None,
                    help="JSON file overriding the solved key-expression weights")
    common(sp)
    sp.set_defaults(func=cmd_export_bundle)
    return p


def _flag_overrides(args) -> dict:
    ov: dict = {}
    for key in ("seed", "threads", "tier"):
        v = getattr(args, key, None)
        if v is not None:
            ov[key] = v
    if getattr(args, "ids", None) is not None:
        ov.setdefault("synth", {})["ids"] = args.ids
    if getattr(args, "exps", None) is not None:
        ov.setdefault("synth", {})["exps"] = args.exps
    if getattr(args, "no_raw", False):
        ov.setdefault("synth", {})["write_raw"] = False
    if getattr(args, "no_fixtures", False):
        ov.setdefault("synth", {})["render_fixtures"] = False
    if getattr(args, "image_size", None) is not None:
        ov.setdefault("synth", {})["image_size"] = args.image_size
    if getattr(args, "resolution", None) is not None:
        ov.setdefault("bake", {})["resolution"] = args.resolution
    if getattr(args, "smooth_raw", False):
        ov.setdefault("bake", {})["smooth_raw"] = True
    if getattr(args, "r_id", None) is not None:
        ov.setdefault("model", {})["r_id"] = args.r_id
    if getattr(args, "r_exp", None) is not None:
        ov.setdefault("model", {})["r_exp"] = args.r_exp
    if getattr(args, "use_truth", False):
        ov.setdefault("model", {})["use_truth_bases"] = True
    return ov


# ---------------------------------------------------------------------------
# Run reports


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digest(paths: dict) -> dict:
    out = {}
    for name, p in paths.items():
        p = Path(p)
        if p.is_file():
            out[name] = _hash_file(p)
        elif p.is_dir():
            manifest = p / "manifest.json"
            out[name] = _hash_file(manifest) if manifest.exists() else "directory"
        else:
            out[name] = "missing"
    return out


def _write_report(path: Path, command: str, inputs: dict, cfg, metrics: dict, t0: float) -> None:
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "inputs": _input_digest(inputs),
        "config": cfg.to_json(),
        "metrics": metrics,
        "timing": {
            "wall_seconds": round(time.time() - t0, 3),
            "started_utc": datetime.fromtimestamp(t0, tz=timezone.utc).isoformat(),
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg) -> int:
    from .synthetic import WrinkleParams, generate_population

    t0 = time.time()
    out = Path(args.out)
    if out.parent != out and not out.parent.exists():
        print(f"cli: parent directory does not exist: {out.parent}", file=sys.stderr)
        return 2
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"cli: {out} exists; pass --force to overwrite", file=sys.stderr)
            return 2
        import shutil

        shutil.rmtree(out)
    s = cfg.section("synth")
    manifest = generate_population(
        s["ids"], s["exps"], cfg["seed"], out, tier=cfg["tier"], write_raw=s["write_raw"],
    )
    metrics = {"subjects": s["ids"], "expressions": s["exps"],
               "topology_id": manifest["topology_id"]}
    if s["render_fixtures"]:
        metrics["fixtures"] = _render_fixtures(out, cfg)
    _write_report(out / "run_report.json", "synth", {"out": out}, cfg, metrics, t0)
    print(f"synth: wrote {s['ids']}x{s['exps']} dataset to {out}")
    return 0


def _render_fixtures(dataset: Path, cfg) -> int:
    """Render one fit fixture (image + 2d landmarks) per subject."""
    from .fitting import rodrigues
    from .mesh import load_mesh
    from .registration import LandmarkSet, load_landmarks, save_landmarks
    from .render import CameraPose, fit_directional_light, project, rasterize, save_image
    from .synthetic import synthetic_albedo_model

    s = cfg.section("synth")
    size = s["image_size"]
    manifest = json.loads((dataset / "manifest.json").read_text())
    template = load_mesh(dataset / "template" / "template.ply")
    albedo = synthetic_albedo_model(template, cfg.section("model")["albedo_components"],
                                    seed=cfg["seed"])
    count = 0
    for i, subj in enumerate(manifest["subjects"]):
        sdir = dataset / "subjects" / subj["name"]
        e = 1 % manifest["n_exp"]
        mesh = load_mesh(sdir / "truth_base" / f"exp_{e:03d}.ply")
        rng = np.random.default_rng(cfg["seed"] * 7919 + i)
        rot = rodrigues(rng.normal(0.0, 0.12, 3)) @ np.diag([1.0, -1.0, -1.0])
        extent = np.abs(mesh.vertices).max()
        pose = CameraPose(0.42 * size / extent, rot, np.array([size / 2.0, size / 2.0]))
        light = fit_directional_light(
            np.array([rng.normal(0, 0.4), rng.normal(0, 0.4), -0.9]), rgb=(1.6, 1.5, 1.4)
        )
        light.coeffs[0] += 1.2
        w_alb = rng.normal(0.0, albedo.stddev * 0.8)
        img = rasterize(mesh, albedo.vertex_colors(w_alb), pose, light, size, size).color

        fdir = sdir / "fit_fixture"
        fdir.mkdir(parents=True, exist_ok=True)
        save_image(fdir / "image.png", img)
        lm3d = load_landmarks(sdir / "landmarks" / f"exp_{e:03d}.json")
        pts2d = project(mesh.vertices[lm3d.template_vertex_ids], pose)
        save_landmarks(fdir / "landmarks.json",
                       LandmarkSet(lm3d.semantic_ids, lm3d.template_vertex_ids, points2d=pts2d))
        ref = {
            "expression": e,
            "truth_mesh": f"../truth_base/exp_{e:03d}.ply",
            "pose": {"s": pose.s, "R": [float(x) for x in pose.R.ravel()],
                     "t": [float(x) for x in pose.t]},
        }
        with open(fdir / "truth_ref.json", "w") as fh:
            json.dump(ref, fh, indent=1, sort_keys=True)
            fh.write("\n")
        count += 1
    return count


def _dataset_subjects(dataset: Path):
    manifest = json.loads((dataset / "manifest.json").read_text())
    return manifest, [s["name"] for s in manifest["subjects"]]


def cmd_register(args, cfg) -> int:
    from .mesh import load_mesh, save_mesh
    from .registration import NicpConfig, load_landmarks, procrustes_align, register_scan_set

    t0 = time.time()
    dataset = Path(args.dataset)
    out = Path(args.out)
    manifest, subjects = _dataset_subjects(dataset)
    n_exp = manifest["n_exp"]
    nc = cfg.section("nicp")
    nicp_cfg = NicpConfig(
        stiffness_schedule=tuple(nc["stiffness_schedule"]),
        landmark_weight=nc["landmark_weight"],
        landmark_decay=nc["landmark_decay"],
        max_inner_iterations=nc["max_inner_iterations"],
        convergence_eps=nc["convergence_eps"],
    )
    template = load_mesh(dataset / "template" / "template.ply")
    expr_templates = [load_mesh(dataset / "template" / "expressions" / f"exp_{e:03d}.ply")
                      for e in range(1, n_exp)]
    per_subject = {}
    for name in subjects:
        sdir = dataset / "subjects" / name
        scans = [load_mesh(sdir / "raw" / f"exp_{e:03d}.ply") for e in range(n_exp)]
        # prefer the dense registration protocol when the dataset provides it
        lm_dir = "registration_landmarks" if (sdir / "registration_landmarks").exists() else "landmarks"
        lms = [load_landmarks(sdir / lm_dir / f"exp_{e:03d}.json") for e in range(n_exp)]
        registered = register_scan_set(template, scans[0], scans[1:], expr_templates, lms, nicp_cfg)
        # registered meshes live in the template frame; persist the scan
        # alignment so later stages (bake) can bring raw scans across
        to_template = procrustes_align(
            lms[0].points3d, template.vertices[lms[0].template_vertex_ids], with_scale=True
        )
        odir = out / name
        odir.mkdir(parents=True, exist_ok=True)
        with open(odir / "alignment.json", "w") as fh:
            json.dump({
                "scale": float(to_template.scale),
                "rotation": [float(x) for x in to_template.rotation.ravel()],
                "translation": [float(x) for x in to_template.translation],
            }, fh, indent=1, sort_keys=True)
            fh.write("\n")
        dists = []
        for e, mesh in enumerate(registered):
            save_mesh(odir / f"exp_{e:03d}.ply", mesh)
            from . import bvh as _bvh

            aligned = to_template.apply_mesh(scans[e])
            _, dist, _, _ = _bvh.closest_point_batch(aligned.bvh(), mesh.vertices)
            dists.append(float(np.abs(dist).mean()))
        per_subject[name] = {"mean_surface_distance_mm": dists}
        print(f"register: {name} mean dist {np.mean(dists):.4f} mm")
    _write_report(out / "run_report.json", "register",
                  {"dataset": dataset}, cfg, {"subjects": per_subject}, t0)
    return 0


def cmd_bake(args, cfg) -> int:
    from .displacement import bake_displacement, save_displacement
    from .mesh import load_mesh
    from .registration import SimilarityTransform

    t0 = time.time()
    dataset = Path(args.dataset)
    registered = Path(args.registered)
    out = Path(args.out)
    manifest, subjects = _dataset_subjects(dataset)
    n_exp = manifest["n_exp"]
    b = cfg.section("bake")
    stats = {}
    for name in subjects:
        odir = out / name
        odir.mkdir(parents=True, exist_ok=True)
        align_path = registered / name / "alignment.json"
        if align_path.exists():
            a = json.loads(align_path.read_text())
            to_template = SimilarityTransform(
                a["scale"], np.array(a["rotation"]).reshape(3, 3), np.array(a["translation"])
            )
        else:
            to_template = None
        per_exp = []
        for e in range(n_exp):
            base = load_mesh(registered / name / f"exp_{e:03d}.ply")
            raw = load_mesh(dataset / "subjects" / name / "raw" / f"exp_{e:03d}.ply")
            if to_template is not None:
                raw = to_template.apply_mesh(raw)
            dmap = bake_displacement(base, raw, b["resolution"], smooth_raw=b["smooth_raw"])
            save_displacement(odir / f"key_{e:03d}", dmap)
            per_exp.append(dmap.stats())
        stats[name] = per_exp
        print(f"bake: {name} ({n_exp} maps at {b['resolution']})")
    _write_report(out / "run_report.json", "bake",
                  {"dataset": dataset, "registered": registered}, cfg, {"maps": stats}, t0)
    return 0


def cmd_build_model(args, cfg) -> int:
    from .mesh import load_mesh
    from .morphable import assemble_tensor, save_model, tucker_decompose
    from .synthetic import synthetic_albedo_model

    t0 = time.time()
    dataset = Path(args.dataset)
    mc = cfg.section("model")
    use_truth = mc["use_truth_bases"]
    if not use_truth and args.registered is None:
        raise PipelineError("build-model needs --registered (or --use-truth)")
    manifest, subjects = _dataset_subjects(dataset)
    n_exp = manifest["n_exp"]
    grid = []
    for name in subjects:
        if use_truth:
            row = [load_mesh(dataset / "subjects" / name / "truth_base" / f"exp_{e:03d}.ply")
                   for e in range(n_exp)]
        else:
            row = [load_mesh(Path(args.registered) / name / f"exp_{e:03d}.ply")
                   for e in range(n_exp)]
        grid.append(row)
    tensor, template = assemble_tensor(grid)
    model = tucker_decompose(tensor, template, mc["r_id"], mc["r_exp"], method=mc["method"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model)
    albedo = synthetic_albedo_model(model.template_mesh(), mc["albedo_components"],
                                    seed=cfg["seed"])
    albedo.save(str(out) + ".albedo.npz")

    from .morphable import reconstruct

    rel = float(np.linalg.norm(reconstruct(model) - tensor.data) / max(np.linalg.norm(tensor.data), 1e-300))
    inputs = {"dataset": dataset}
    if args.registered:
        inputs["registered"] = Path(args.registered)
    _write_report(out.parent / (out.name + ".report.json"), "build-model", inputs, cfg,
                  {"relative_reconstruction_error": rel,
                   "ranks": [mc["r_id"], mc["r_exp"]],
                   "identities": len(subjects), "expressions": n_exp}, t0)
    print(f"build-model: ranks ({mc['r_id']},{mc['r_exp']}), rel recon err {rel:.3e}")
    return 0


def cmd_fit(args, cfg) -> int:
    from .fitting import AlbedoModel, FitConfig, FitResult, fit_image
    from .mesh import load_mesh
    from .morphable import load_model, synthesize_mesh
    from .registration import load_landmarks
    from .render import load_image, project
    from .synthetic import CONTOUR_SEMANTIC_IDS

    t0 = time.time()
    model = load_model(args.model)
    albedo_path = args.albedo or (args.model + ".albedo.npz")
    albedo = AlbedoModel.load(albedo_path)
    image = load_image(args.image)
    lms = load_landmarks(args.landmarks)
    f = cfg.section("fit")
    fit_cfg = FitConfig(
        lambda_pixel=f["lambda_pixel"], lambda_id=f["lambda_id"],
        lambda_exp=f["lambda_exp"], lambda_alb=f["lambda_alb"],
        max_outer_iterations=f["max_outer_iterations"],
        n_id=f["n_id"], n_exp=f["n_exp"], n_alb=f["n_alb"],
        pixel_norm=f["pixel_norm"], contour_semantic_ids=CONTOUR_SEMANTIC_IDS,
    )
    result = fit_image(model, albedo, image, lms, fit_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.save(out)

    metrics = {
        "final_energy": result.energy_trace[-1] if result.energy_trace else None,
        "iterations": len(result.energy_trace),
        "warning": result.warning,
    }
    if args.truth_mesh:
        truth = load_mesh(args.truth_mesh)
        fitted = synthesize_mesh(model, result.w_id, result.w_exp)
        rms = float(np.sqrt(((fitted.vertices - truth.vertices) ** 2).sum(axis=1).mean()))
        metrics["vertex_rms_mm"] = rms
        reproj = project(fitted.vertices[result.landmark_vertex_ids], result.pose)
        lrmse = float(np.sqrt(((reproj - lms.points2d) ** 2).sum(axis=1).mean()))
        metrics["landmark_rmse_px"] = lrmse
        print(f"fit: vertex RMS {rms:.3f} mm, landmark RMSE {lrmse:.3f} px")
    inputs = {"model": args.model, "albedo": albedo_path, "image": args.image,
              "landmarks": args.landmarks}
    _write_report(out.parent / (out.name + ".report.json"), "fit", inputs, cfg, metrics, t0)
    return 0


def _load_rig(args, cfg):
    from .dynamic_detail import BakedDirectoryProvider, compute_activation_masks
    from .fitting import FitResult
    from .morphable import generate_blendshapes, load_model

    model = load_model(args.model)
    fit = FitResult.load(args.fit)
    rig = generate_blendshapes(model, fit.w_id)
    if getattr(args, "key_weights", None):
        rows = json.loads(Path(args.key_weights).read_text())
        if any(len(r) != len(rig.shapes) for r in rows):
            raise PipelineError("key-weights rows must match the blendshape count")
        rig.key_weights = [np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0) for r in rows]
    provider = BakedDirectoryProvider(args.maps)
    if provider.key_count != len(rig.shapes):
        raise PipelineError(
            f"provider has {provider.key_count} key maps, rig has {len(rig.shapes)} blendshapes"
        )
    r = cfg.section("rig")
    acts = compute_activation_masks(rig, provider.resolution, normalize=r["mask_normalize"])
    return model, rig, provider, acts


def cmd_rig(args, cfg) -> int:
    from .dynamic_detail import RigWeights, blend_displacement, compute_weight_masks, export_bundle, rig_detailed_mesh
    from .displacement import save_displacement
    from .mesh import save_mesh

    t0 = time.time()
    model, rig, provider, acts = _load_rig(args, cfg)
    out = Path(args.out)
    manifest = export_bundle(rig, acts, provider, out)
    metrics = {"vertex_count": manifest["vertex_count"],
               "blendshape_count": manifest["blendshape_count"],
               "key_count": manifest["key_count"]}
    if args.alpha is not None:
        alpha = np.array([float(x) for x in args.alpha.split(",")])
        weights = RigWeights(alpha)
        wm = compute_weight_masks(acts, weights, rig.key_weights)
        blended = blend_displacement(provider, wm)
        save_displacement(out / "posed_map", blended)
        detailed = rig_detailed_mesh(rig, weights, acts, provider, cfg.section("rig")["subdiv"])
        save_mesh(out / "posed_mesh.ply", detailed)
        metrics["posed_alpha"] = [float(x) for x in alpha]
        metrics["posed_map_rms_mm"] = blended.stats()["rms"]
    _write_report(out / "run_report.json", "rig",
                  {"model": args.model, "fit": args.fit + ".json", "maps": args.maps},
                  cfg, metrics, t0)
    print(f"rig: bundle with {metrics['blendshape_count']} blendshapes -> {out}")
    return 0


def cmd_export_bundle(args, cfg) -> int:
    from .dynamic_detail import export_bundle, export_conformance_vectors

    t0 = time.time()
    model, rig, provider, acts = _load_rig(args, cfg)
    out = Path(args.out)
    manifest = export_bundle(rig, acts, provider, out)
    rng = np.random.default_rng(cfg["seed"])
    extra = [rng.uniform(0.0, 1.0, len(rig.shapes)) for _ in range(args.extra_alphas)]
    doc = export_conformance_vectors(rig, acts, provider, out / "conformance.json", extra)
    _write_report(out / "run_report.json", "export-bundle",
                  {"model": args.model, "fit": args.fit + ".json", "maps": args.maps},
                  cfg, {"alphas": len(doc["cases"]),
                        "blendshape_count": manifest["blendshape_count"]}, t0)
    print(f"export-bundle: {len(doc['cases'])} conformance vectors -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
