"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with `pytest -s tests/test_acceptance.py` to see the PASS lines as they
complete. Criteria run on synthetic fixtures with analytically known truth.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from facekit import bvh as fbvh
from facekit.displacement import DisplacementMap, bake_displacement, representation_error
from facekit.dynamic_detail import (
    ArrayProvider,
    RigWeights,
    WeightMaskSet,
    blend_displacement,
    compute_activation_masks,
    compute_weight_masks,
)
from facekit.fitting import (
    FitConfig,
    fit_image,
    landmark_energy,
    pixel_energy,
    regularization_energy,
    rodrigues,
)
from facekit.mesh import Mesh
from facekit.morphable import (
    generate_blendshapes,
    reconstruct,
    synthesize_mesh,
    tucker_decompose,
)
from facekit.registration import NicpConfig, deformation_transfer, nicp_register, procrustes_align
from facekit.render import CameraPose, SH9Lighting, fit_directional_light, project, rasterize, sh_basis, sh_shade
from facekit.registration import LandmarkSet
from facekit.synthetic import (
    CONTOUR_SEMANTIC_IDS,
    SyntheticSpec,
    generate_subject,
    template_landmark_vertices,
)


def verdict(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(line)
    assert ok, line


def y_down_rotation(omega):
    return rodrigues(np.asarray(omega)) @ np.diag([1.0, -1.0, -1.0])


def test_criterion_1_two_layer_representation():
    """Wrinkled head at full fixture scale: mae < 0.3mm, size_ratio <= 0.05, < 60s."""
    t0 = time.monotonic()
    subj = generate_subject(SyntheticSpec(id_seed=11, tier="default"), 2)
    base = subj.base_mesh(1)
    raw = subj.raw_mesh(1)
    assert 100_000 < raw.n_vertices < 160_000
    assert 7_000 < base.n_vertices < 9_000
    # synthetic scans carry no sensor noise, so the pre-bake smoothing pass
    # that guards against registration artifacts is disabled here
    dmap = bake_displacement(base, raw, 1024, smooth_raw=False)
    res = representation_error(raw, base, dmap, 2)
    elapsed = time.monotonic() - t0
    ok = res["mae"] < 0.3 and res["size_ratio"] <= 0.05 and elapsed < 60.0
    verdict(1, ok, f"mae {res['mae']:.4f}mm, size_ratio {res['size_ratio']:.4f}, {elapsed:.1f}s")


def test_criterion_2_tucker_fidelity(tiny_population, tiny_model):
    """Known multilinear rank (5,3): exact recovery and monotone rank sweeps, < 30s."""
    t0 = time.monotonic()
    tensor = tiny_model["tensor"]
    template = tiny_model["template"]
    norm = np.linalg.norm(tensor.data)
    model = tiny_model["model"]  # decomposed at (5, 3)
    rel = float(np.linalg.norm(reconstruct(model) - tensor.data) / norm)

    id_errs = []
    for r_id in range(1, 9):
        m = tucker_decompose(tensor, template, r_id, 3)
        id_errs.append(np.linalg.norm(reconstruct(m) - tensor.data) / norm)
    exp_errs = []
    for r_exp in range(1, 5):
        m = tucker_decompose(tensor, template, 5, r_exp)
        exp_errs.append(np.linalg.norm(reconstruct(m) - tensor.data) / norm)
    mono = all(b <= a + 1e-12 for a, b in zip(id_errs, id_errs[1:])) and all(
        b <= a + 1e-12 for a, b in zip(exp_errs, exp_errs[1:])
    )
    elapsed = time.monotonic() - t0
    ok = rel < 1e-6 and mono and elapsed < 30.0
    verdict(2, ok, f"rel err {rel:.2e}, sweeps monotone over {len(id_errs) + len(exp_errs)} points, {elapsed:.1f}s")


def test_criterion_3_fit_recovery(tiny_model, tiny_albedo):
    """20 rendered faces: vertex RMS < 2mm and landmark RMSE < 2px on >= 18, < 5 min."""
    t0 = time.monotonic()
    model = tiny_model["model"]
    albedo = tiny_albedo
    sem, vids = template_landmark_vertices("tiny")
    passes = 0
    all_monotone = True
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        wid_t = model.id_basis[seed % 8] + 0.01 * rng.normal(size=5)
        wexp_t = model.exp_basis[seed % 4]
        walb_t = rng.normal(0.0, albedo.stddev * 0.8)
        mesh_t = synthesize_mesh(model, wid_t, wexp_t)
        pose_t = CameraPose(0.55, y_down_rotation(rng.normal(0, 0.15, 3)), np.array([64.0, 66.0]))
        light = fit_directional_light(
            np.array([rng.normal(0, 0.4), rng.normal(0, 0.4), -0.9]), rgb=(1.6, 1.5, 1.4)
        )
        light.coeffs[0] += 1.2
        img = rasterize(mesh_t, albedo.vertex_colors(walb_t), pose_t, light, 128, 128).color
        lm2d = project(mesh_t.vertices[vids], pose_t)
        lms = LandmarkSet(sem, vids, points2d=lm2d)
        cfg = FitConfig(n_id=5, n_exp=3, n_alb=6, contour_semantic_ids=CONTOUR_SEMANTIC_IDS,
                        max_outer_iterations=10)
        res = fit_image(model, albedo, img, lms, cfg)
        fitted = synthesize_mesh(model, res.w_id, res.w_exp)
        rms = float(np.sqrt(((fitted.vertices - mesh_t.vertices) ** 2).sum(axis=1).mean()))
        reproj = project(fitted.vertices[res.landmark_vertex_ids], res.pose)
        lrmse = float(np.sqrt(((reproj - lm2d) ** 2).sum(axis=1).mean()))
        totals = [t["total"] for t in res.energy_trace]
        if not all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(totals, totals[1:])):
            all_monotone = False
        if rms < 2.0 and lrmse < 2.0:
            passes += 1
        worst = max(worst, rms)
    elapsed = time.monotonic() - t0
    ok = passes >= 18 and all_monotone and elapsed < 300.0
    verdict(3, ok, f"{passes}/20 under (2mm, 2px), worst RMS {worst:.2f}mm, "
                   f"monotone traces {all_monotone}, {elapsed:.0f}s")


def test_criterion_4_gradient_suite(tiny_model, tiny_albedo):
    """Analytic gradients match central differences (< 1e-4 rel) on 20 seeded states, < 60s."""
    t0 = time.monotonic()
    model = tiny_model["model"]
    albedo = tiny_albedo
    sem, vids = template_landmark_vertices("tiny")
    h = 1e-6
    worst = 0.0

    def check(f, x0, g):
        nonlocal worst
        fd = np.zeros_like(x0, dtype=np.float64)
        for i in range(len(x0)):
            d = np.zeros_like(fd)
            d[i] = h
            fd[i] = (f(x0 + d) - f(x0 - d)) / (2 * h)
        rel = np.max(np.abs(fd - g) / np.maximum(np.abs(fd), 1e-7))
        worst = max(worst, float(rel))
        return rel < 1e-4

    ok = True
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        pose = CameraPose(
            rng.uniform(0.4, 1.5), y_down_rotation(rng.normal(0, 0.25, 3)),
            rng.normal(64, 5, 2),
        )
        wid = rng.normal(0, 0.3, 5)
        wexp = rng.normal(0, 0.3, 3)
        pts2d = rng.normal(64, 25, (len(vids), 2))
        _, g = landmark_energy(model, pose, wid, wexp, pts2d, vids)
        ok &= check(lambda d: landmark_energy(
            model, CameraPose(pose.s, rodrigues(d) @ pose.R, pose.t), wid, wexp, pts2d, vids)[0],
            np.zeros(3), g["omega"])
        ok &= check(lambda d: landmark_energy(
            model, CameraPose(pose.s, pose.R, pose.t + d), wid, wexp, pts2d, vids)[0],
            np.zeros(2), g["t"])
        ok &= check(lambda d: landmark_energy(model, pose, wid + d, wexp, pts2d, vids)[0],
                    np.zeros(5), g["w_id"])
        ok &= check(lambda d: landmark_energy(model, pose, wid, wexp + d, pts2d, vids)[0],
                    np.zeros(3), g["w_exp"])

        # photometric state: render a target, perturb lighting and albedo
        walb = rng.normal(0, albedo.stddev)
        mesh = synthesize_mesh(model, wid * 0.3, model.exp_basis[seed % 4])
        light = fit_directional_light(np.array([rng.normal(0, 0.3), rng.normal(0, 0.3), -0.9]))
        light.coeffs[0] += 1.1
        img = rasterize(mesh, albedo.vertex_colors(walb), CameraPose(0.5, y_down_rotation((0, 0, 0)), np.array([64.0, 64.0])), light, 128, 128).color
        pose_p = CameraPose(0.5, y_down_rotation((0, 0, 0)), np.array([64.0, 64.0]))
        sh0 = light.coeffs * rng.uniform(0.8, 1.2)
        walb0 = walb * 0.6
        buffers = rasterize(mesh, albedo.vertex_colors(walb0), pose_p, SH9Lighting(sh0), 128, 128)
        _, gsh, galb, _ = pixel_energy(mesh, albedo, walb0, pose_p, sh0, img, buffers=buffers)
        ok &= check(lambda flat: pixel_energy(mesh, albedo, walb0, pose_p, flat.reshape(9, 3),
                                              img, buffers=buffers)[0],
                    sh0.ravel().copy(), gsh.ravel())
        ok &= check(lambda w: pixel_energy(mesh, albedo, w, pose_p, sh0, img,
                                           buffers=buffers)[0],
                    walb0.copy(), galb)

        # regularizer
        w = rng.normal(size=6)
        sd = rng.uniform(0.2, 2.0, 6)
        _, gr = regularization_energy(w, sd)
        ok &= check(lambda x: regularization_energy(x, sd)[0], w, gr)

        # SH irradiance is linear in its coefficients
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        coeffs = rng.normal(size=(9, 3))
        g_sh = np.where((sh_basis(n) @ coeffs) > 0, 1.0, 0.0)[0] * sh_basis(n)
        ok &= check(lambda c: float(sh_shade(n, SH9Lighting(
            np.column_stack([c, coeffs[:, 1], coeffs[:, 2]])))[0]),
            coeffs[:, 0].copy(), g_sh)

    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 60.0
    verdict(4, ok, f"worst relative gradient error {worst:.2e} over 20 states, {elapsed:.0f}s")


def test_criterion_5_dynamic_detail_algebra(tiny_model):
    """Mask blending identities: neutral bit-exact, saturation, naive oracle, clamp/M0."""
    model = tiny_model["model"]
    rig = generate_blendshapes(model, model.id_basis[1])
    acts = compute_activation_masks(rig, 64)
    kw = np.stack(rig.key_weights)
    rng = np.random.default_rng(0)
    res = 64
    k = len(rig.shapes)
    maps = [DisplacementMap(res, rng.normal(0, 0.6, (res, res)), rng.random((res, res)) > 0.04)
            for _ in range(k + 1)]
    provider = ArrayProvider(maps)

    # alpha = 0 -> F == F0 bit-exact
    w0 = compute_weight_masks(acts, RigWeights(np.zeros(k)), kw)
    f = blend_displacement(provider, w0)
    neutral_ok = np.array_equal(f.values, maps[0].masked()) and np.array_equal(f.valid, maps[0].valid)

    # one-hot saturated region reproduces that key map
    mi = np.zeros((k, res, res))
    mi[2 % k, 10:30, 5:25] = 1.0
    ws = WeightMaskSet(np.maximum(0.0, 1.0 - mi.sum(axis=0)), mi)
    fs = blend_displacement(provider, ws)
    region = np.zeros((res, res), bool)
    region[10:30, 5:25] = True
    sat_ok = np.array_equal(fs.values[region], maps[(2 % k) + 1].masked()[region])

    # naive per-pixel oracle, bit-exact, 10 random cases; clamp and M0 identity
    oracle_ok = True
    identity_ok = True
    for case in range(10):
        alpha = rng.uniform(0.0, 1.0, k)
        w = compute_weight_masks(acts, RigWeights(alpha), kw)
        ssum = w.mi.sum(axis=0)
        identity_ok &= np.all(w.mi >= 0.0) and np.all(w.mi <= 1.0)
        identity_ok &= np.array_equal(w.m0, np.maximum(0.0, 1.0 - ssum))
        identity_ok &= np.all(w.m0[ssum >= 1.0] == 0.0)
        under = ssum <= 1.0
        identity_ok &= np.all((w.m0 + ssum)[under] >= 1.0 - 1e-15)
        f = blend_displacement(provider, w)
        naive = np.zeros((res, res))
        for yy in range(res):
            for xx in range(res):
                acc = w.m0[yy, xx] * (maps[0].values[yy, xx] if maps[0].valid[yy, xx] else 0.0)
                for i in range(k):
                    mp = maps[i + 1]
                    acc += w.mi[i, yy, xx] * (mp.values[yy, xx] if mp.valid[yy, xx] else 0.0)
                naive[yy, xx] = acc
        oracle_ok &= np.array_equal(naive, f.values)

    ok = neutral_ok and sat_ok and oracle_ok and identity_ok
    verdict(5, ok, f"neutral bit-exact {neutral_ok}, saturation {sat_ok}, "
                   f"naive oracle {oracle_ok}, mask identities {identity_ok}")


def test_criterion_6_registration():
    """NICP on 10 warped pairs < 0.3mm mean; 100 Procrustes exact; transfer rotation 1e-6."""
    from facekit.primitives import icosphere

    # procrustes: 100 random similarity transforms recovered to 1e-9
    proc_ok = True
    rng = np.random.default_rng(5)
    for _ in range(100):
        src = rng.normal(size=(12, 3)) * rng.uniform(1, 30)
        rot = rodrigues(rng.normal(0, 1.5, 3))
        s = rng.uniform(0.2, 4.0)
        t = rng.normal(0, 50, 3)
        dst = s * src @ rot.T + t
        got = procrustes_align(src, dst)
        proc_ok &= abs(got.scale - s) < 1e-9 * max(1, s)
        proc_ok &= np.abs(got.rotation - rot).max() < 1e-9
        proc_ok &= np.abs(got.apply(src) - dst).max() < 1e-7

    # NICP: 10 smoothly warped targets
    subj = generate_subject(SyntheticSpec(id_seed=0, tier="tiny"), 1)
    template = subj.base_mesh(0)
    dists = []
    for i in range(10):
        r = np.random.default_rng(100 + i)
        v = template.vertices
        normals = template.vertex_normals()
        warp = np.zeros(len(v))
        for _ in range(3):
            cu, cv = r.uniform(0.2, 0.8, 2)
            amp = r.uniform(-5.0, 5.0)
            width = r.uniform(0.004, 0.02)
            uv = template.uvs
            warp += amp * np.exp(-(((uv[:, 0] - cu) ** 2 + (uv[:, 1] - cv) ** 2) / width))
        rim = np.minimum.reduce([
            np.clip(template.uvs[:, 0] / 0.1, 0, 1), np.clip((1 - template.uvs[:, 0]) / 0.1, 0, 1),
            np.clip(template.uvs[:, 1] / 0.1, 0, 1), np.clip((1 - template.uvs[:, 1]) / 0.1, 0, 1),
        ])
        target = template.with_vertices(v + (warp * rim)[:, None] * normals)
        out = nicp_register(template, target, None, NicpConfig())
        _, dist, _, _ = fbvh.closest_point_batch(target.bvh(), out.vertices)
        dists.append(float(np.abs(dist).mean()))
    nicp_ok = all(d < 0.3 for d in dists)

    # deformation transfer: global-rotation source pair transfers exactly
    src = icosphere(10.0, 2)
    rot = rodrigues(np.array([0.4, -0.8, 0.3]))
    src_expr = src.with_vertices(src.vertices @ rot.T)
    tgt = src.with_vertices(src.vertices * np.array([1.25, 0.85, 1.1]))
    out = deformation_transfer(src, src_expr, tgt)
    expect = tgt.vertices @ rot.T
    delta = out.vertices - expect
    transfer_ok = np.abs(delta - delta[0]).max() < 1e-6

    ok = proc_ok and nicp_ok and transfer_ok
    verdict(6, ok, f"procrustes 100/100 {proc_ok}, nicp mean dist max {max(dists):.3f}mm, "
                   f"transfer exact {transfer_ok}")


def test_criterion_7_cli_determinism(tmp_path):
    """Full chain with a fixed seed twice: byte-identical artifacts and reports."""
    from facekit.cli import main

    cfg = {
        "tier": "tiny",
        "seed": 7,
        "nicp": {"stiffness_schedule": [20.0, 5.0, 1.0], "max_inner_iterations": 3,
                 "convergence_eps": 0.1, "landmark_weight": 20.0, "landmark_decay": 1.0},
        "bake": {"resolution": 256},
        "model": {"r_id": 3, "r_exp": 3},
        "synth": {"ids": 3, "exps": 3, "image_size": 96},
        "rig": {"mask_resolution": 256, "subdiv": 0},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    def run(root: Path):
        a = ["--config", str(cfg_path)]
        assert main(["synth", str(root / "data"), *a]) == 0
        assert main(["register", "--dataset", str(root / "data"), "--out", str(root / "reg"), *a]) == 0
        assert main(["bake", "--dataset", str(root / "data"), "--registered", str(root / "reg"),
                     "--out", str(root / "maps"), *a]) == 0
        assert main(["build-model", "--dataset", str(root / "data"), "--registered",
                     str(root / "reg"), "--out", str(root / "model.fsbm"), *a]) == 0
        fx = root / "data" / "subjects" / "subj_000" / "fit_fixture"
        assert main(["fit", "--model", str(root / "model.fsbm"), "--image", str(fx / "image.png"),
                     "--landmarks", str(fx / "landmarks.json"), "--out", str(root / "fit0"), *a]) == 0
        assert main(["rig", "--model", str(root / "model.fsbm"), "--fit", str(root / "fit0"),
                     "--maps", str(root / "maps" / "subj_000"), "--out", str(root / "rig0"),
                     "--alpha", "0,0", *a]) == 0
        assert main(["export-bundle", "--model", str(root / "model.fsbm"), "--fit", str(root / "fit0"),
                     "--maps", str(root / "maps" / "subj_000"), "--out", str(root / "bundle0"), *a]) == 0

    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    run(tmp_path / "a")
    run(tmp_path / "b")

    mismatches = []
    files_a = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
    for pa in files_a:
        rel = pa.relative_to(tmp_path / "a")
        pb = tmp_path / "b" / rel
        if not pb.exists():
            mismatches.append(f"missing {rel}")
            continue
        ba, bb = pa.read_bytes(), pb.read_bytes()
        if ba == bb:
            continue
        if pa.suffix == ".json":
            da, db = json.loads(ba), json.loads(bb)
            da.pop("timing", None)
            db.pop("timing", None)
            if da == db:
                continue
        mismatches.append(str(rel))
    ok = not mismatches and len(files_a) > 30
    verdict(7, ok, f"{len(files_a)} artifacts byte-identical across runs"
                   + (f"; mismatches: {mismatches[:5]}" if mismatches else ""))
