#!/usr/bin/env python3
"""Batch single-image fitting against rendered ground truth; prints RMS stats."""
import argparse
import time

import numpy as np

from facekit.fitting import FitConfig, fit_image, rodrigues
from facekit.morphable import assemble_tensor, synthesize_mesh, tucker_decompose
from facekit.registration import LandmarkSet
from facekit.render import CameraPose, fit_directional_light, project, rasterize
from facekit.synthetic import (
    CONTOUR_SEMANTIC_IDS,
    N_ID_FIELDS,
    SyntheticSpec,
    default_expression_params,
    generate_subject,
    synthetic_albedo_model,
    template_landmark_vertices,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--ids", type=int, default=8)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--tier", default="tiny")
    args = ap.parse_args()

    rng = np.random.default_rng(5)
    ids = rng.normal(0.0, 1.0, (args.ids, N_ID_FIELDS))
    exps = default_expression_params(4)
    grid = [
        [generate_subject(SyntheticSpec(id_params=ids[i], exp_params=exps, tier=args.tier), 4)
         .base_mesh(e) for e in range(4)]
        for i in range(args.ids)
    ]
    tensor, template = assemble_tensor(grid)
    model = tucker_decompose(tensor, template, min(5, args.ids), 3)
    albedo = synthetic_albedo_model(model.template_mesh(), k=6, seed=3)
    sem, vids = template_landmark_vertices(args.tier)

    stats = []
    t0 = time.monotonic()
    for seed in range(args.count):
        r = np.random.default_rng(seed)
        wid = model.id_basis[seed % args.ids] + 0.01 * r.normal(size=model.r_id)
        wexp = model.exp_basis[seed % 4]
        walb = r.normal(0.0, albedo.stddev * 0.8)
        mesh_t = synthesize_mesh(model, wid, wexp)
        pose = CameraPose(
            0.42 * args.size / np.abs(mesh_t.vertices).max(),
            rodrigues(r.normal(0, 0.15, 3)) @ np.diag([1.0, -1.0, -1.0]),
            np.array([args.size / 2.0, args.size / 2.0]),
        )
        light = fit_directional_light(np.array([r.normal(0, 0.4), r.normal(0, 0.4), -0.9]),
                                      rgb=(1.6, 1.5, 1.4))
        light.coeffs[0] += 1.2
        img = rasterize(mesh_t, albedo.vertex_colors(walb), pose, light,
                        args.size, args.size).color
        lm2d = project(mesh_t.vertices[vids], pose)
        cfg = FitConfig(n_id=model.r_id, n_exp=model.r_exp, n_alb=albedo.k,
                        contour_semantic_ids=CONTOUR_SEMANTIC_IDS, max_outer_iterations=10)
        res = fit_image(model, albedo, img, LandmarkSet(sem, vids, points2d=lm2d), cfg)
        fitted = synthesize_mesh(model, res.w_id, res.w_exp)
        rms = float(np.sqrt(((fitted.vertices - mesh_t.vertices) ** 2).sum(axis=1).mean()))
        reproj = project(fitted.vertices[res.landmark_vertex_ids], res.pose)
        lrmse = float(np.sqrt(((reproj - lm2d) ** 2).sum(axis=1).mean()))
        stats.append((rms, lrmse))
        print(f"  fit {seed:>2}: vertex RMS {rms:6.3f} mm, landmark RMSE {lrmse:5.2f} px")
    arr = np.array(stats)
    dt = time.monotonic() - t0
    print(f"\n{args.count} fits in {dt:.1f}s: RMS mean {arr[:, 0].mean():.3f} mm "
          f"(max {arr[:, 0].max():.3f}), under 2mm/2px: "
          f"{int(((arr[:, 0] < 2) & (arr[:, 1] < 2)).sum())}/{args.count}")


if __name__ == "__main__":
    main()
