import numpy as np
import pytest

from facekit.errors import FitError
from facekit.fitting import (
    FitConfig,
    FitResult,
    fit_image,
    landmark_energy,
    pixel_energy,
    pose_from_landmarks,
    regularization_energy,
    rodrigues,
    silhouette_vertices,
    update_contour_vertices,
)
from facekit.morphable import synthesize_mesh
from facekit.registration import LandmarkSet
from facekit.render import CameraPose, SH9Lighting, fit_directional_light, project, rasterize
from facekit.synthetic import CONTOUR_SEMANTIC_IDS, template_landmark_vertices


def y_down_rotation(omega=(0.0, 0.0, 0.0)):
    return rodrigues(np.array(omega)) @ np.diag([1.0, -1.0, -1.0])


@pytest.fixture(scope="module")
def fit_scene(tiny_model, tiny_albedo):
    model = tiny_model["model"]
    albedo = tiny_albedo
    sem, vids = template_landmark_vertices("tiny")
    rng = np.random.default_rng(7)
    wid_t = model.id_basis[4] + 0.003 * rng.normal(size=5)
    wexp_t = model.exp_basis[2]
    walb_t = rng.normal(0.0, albedo.stddev * 0.8)
    mesh_t = synthesize_mesh(model, wid_t, wexp_t)
    pose_t = CameraPose(0.55, y_down_rotation((0.1, -0.25, 0.05)), np.array([64.0, 66.0]))
    light_t = fit_directional_light(np.array([0.3, -0.3, -0.9]), rgb=(1.6, 1.5, 1.4))
    light_t.coeffs[0] += 1.2
    img = rasterize(mesh_t, albedo.vertex_colors(walb_t), pose_t, light_t, 128, 128).color
    return {
        "model": model, "albedo": albedo, "sem": sem, "vids": vids,
        "wid": wid_t, "wexp": wexp_t, "walb": walb_t,
        "mesh": mesh_t, "pose": pose_t, "light": light_t, "img": img,
    }


# --- pose init -------------------------------------------------------------------


def test_pose_from_landmarks_recovers_truth(fit_scene):
    mesh = fit_scene["mesh"]
    pose_t = fit_scene["pose"]
    vids = fit_scene["vids"]
    pts2d = project(mesh.vertices[vids], pose_t)
    pose = pose_from_landmarks(mesh.vertices[vids], pts2d)
    assert abs(pose.s - pose_t.s) < 1e-6
    np.testing.assert_allclose(pose.R[:2], pose_t.R[:2], atol=1e-6)
    np.testing.assert_allclose(pose.t, pose_t.t, atol=1e-4)


def test_pose_from_landmarks_degenerate():
    pts3 = np.outer(np.arange(8.0), [1.0, 0.5, 0.25])  # collinear
    pts2 = np.random.default_rng(0).normal(size=(8, 2))
    with pytest.raises(FitError, match="pose init failed"):
        pose_from_landmarks(pts3, pts2)


# --- landmark energy --------------------------------------------------------------


def test_landmark_energy_zero_at_truth(fit_scene):
    s = fit_scene
    pts2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    e, _ = landmark_energy(s["model"], s["pose"], s["wid"], s["wexp"], pts2d, s["vids"])
    assert e < 1e-18


def test_landmark_energy_three_four_five(fit_scene):
    s = fit_scene
    pts2d = project(s["mesh"].vertices[s["vids"]], s["pose"]) + np.array([3.0, 4.0])
    e, _ = landmark_energy(s["model"], s["pose"], s["wid"], s["wexp"], pts2d, s["vids"])
    assert abs(e - 25.0) < 1e-9


def gradient_check(f, x0, g, h=1e-6, rtol=1e-4):
    fd = np.zeros_like(x0, dtype=np.float64)
    for i in range(len(x0)):
        d = np.zeros_like(fd)
        d[i] = h
        fd[i] = (f(x0 + d) - f(x0 - d)) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-7)
    assert np.max(np.abs(fd - g) / denom) < rtol, (fd, g)


def test_landmark_gradients_match_fd(fit_scene):
    s = fit_scene
    model = s["model"]
    rng = np.random.default_rng(11)
    pose0 = CameraPose(1.3, y_down_rotation((0.2, 0.1, -0.3)), np.array([60.0, 70.0]))
    wid = rng.normal(0, 0.3, 5)
    wexp = rng.normal(0, 0.3, 3)
    pts2d = rng.normal(64, 25, (len(s["vids"]), 2))
    e0, g = landmark_energy(model, pose0, wid, wexp, pts2d, s["vids"])

    gradient_check(
        lambda d: landmark_energy(
            model, CameraPose(pose0.s, rodrigues(d) @ pose0.R, pose0.t), wid, wexp,
            pts2d, s["vids"])[0],
        np.zeros(3), g["omega"])
    gradient_check(
        lambda d: landmark_energy(
            model, CameraPose(pose0.s, pose0.R, pose0.t + d), wid, wexp, pts2d, s["vids"])[0],
        np.zeros(2), g["t"])
    gradient_check(
        lambda d: landmark_energy(model, pose0, wid + d, wexp, pts2d, s["vids"])[0],
        np.zeros(5), g["w_id"])
    gradient_check(
        lambda d: landmark_energy(model, pose0, wid, wexp + d, pts2d, s["vids"])[0],
        np.zeros(3), g["w_exp"])


# --- pixel energy ------------------------------------------------------------------


def test_pixel_energy_zero_on_rendered_state(fit_scene):
    s = fit_scene
    e, _, _, _ = pixel_energy(s["mesh"], s["albedo"], s["walb"], s["pose"],
                              s["light"].coeffs, s["img"])
    assert e < 1e-6


def test_pixel_energy_uniform_brightness_offset(fit_scene):
    s = fit_scene
    e, _, _, _ = pixel_energy(s["mesh"], s["albedo"], s["walb"], s["pose"],
                              s["light"].coeffs, s["img"] + 0.1)
    assert abs(e - 0.1 * np.sqrt(3.0)) < 1e-6


def test_pixel_energy_squared_variant(fit_scene):
    s = fit_scene
    e, _, _, _ = pixel_energy(s["mesh"], s["albedo"], s["walb"], s["pose"],
                              s["light"].coeffs, s["img"] + 0.1, pixel_norm="squared")
    assert abs(e - 0.03) < 1e-6  # 3 channels x 0.1^2


def test_pixel_energy_face_not_visible(fit_scene):
    s = fit_scene
    pose_away = CameraPose(s["pose"].s, s["pose"].R, np.array([5000.0, 5000.0]))
    with pytest.raises(FitError, match="face not visible"):
        pixel_energy(s["mesh"], s["albedo"], s["walb"], pose_away, s["light"].coeffs, s["img"])


def test_pixel_gradients_match_fd(fit_scene):
    s = fit_scene
    sh0 = s["light"].coeffs * 0.9
    walb0 = s["walb"] * 0.7
    buffers = rasterize(s["mesh"], s["albedo"].vertex_colors(walb0), s["pose"],
                        SH9Lighting(sh0), 128, 128)
    _, gsh, galb, _ = pixel_energy(s["mesh"], s["albedo"], walb0, s["pose"], sh0,
                                   s["img"], buffers=buffers)

    def e_sh(flat):
        e, *_ = pixel_energy(s["mesh"], s["albedo"], walb0, s["pose"],
                             flat.reshape(9, 3), s["img"], buffers=buffers)
        return e

    gradient_check(e_sh, sh0.ravel().copy(), gsh.ravel())

    def e_alb(w):
        e, *_ = pixel_energy(s["mesh"], s["albedo"], w, s["pose"], sh0, s["img"],
                             buffers=buffers)
        return e

    gradient_check(e_alb, walb0.copy(), galb)


# --- regularization -----------------------------------------------------------------


def test_regularizer_zero_weights():
    e, g = regularization_energy(np.zeros(5), np.ones(5))
    assert e == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_regularizer_unit_sigma_count():
    sd = np.array([0.3, 0.5, 1.2])
    e, _ = regularization_energy(sd.copy(), sd)
    assert abs(e - 3.0) < 1e-12


def test_regularizer_quadratic_scaling():
    rng = np.random.default_rng(1)
    w = rng.normal(size=6)
    sd = rng.uniform(0.2, 2.0, 6)
    e1, g1 = regularization_energy(w, sd)
    e2, _ = regularization_energy(2 * w, sd)
    assert abs(e2 - 4 * e1) < 1e-9
    gradient_check(lambda x: regularization_energy(x, sd)[0], w, g1)


# --- contour update ----------------------------------------------------------------


def test_silhouette_includes_boundary(fit_scene):
    s = fit_scene
    sil = silhouette_vertices(s["mesh"], s["pose"])
    assert len(sil) > 0
    # open-patch boundary vertices are always silhouette candidates
    uv = s["mesh"].uvs
    border = np.nonzero((np.abs(uv[:, 0] - 0.5) > 0.47) | (np.abs(uv[:, 1] - 0.5) > 0.47))[0]
    assert np.isin(border, sil).mean() > 0.9


def test_contour_update_never_increases_distance(fit_scene):
    s = fit_scene
    pts2d = project(s["mesh"].vertices[s["vids"]], s["pose"]) + 3.0
    mask = np.isin(s["sem"], np.asarray(CONTOUR_SEMANTIC_IDS))
    new_ids = update_contour_vertices(s["mesh"], s["pose"], pts2d, s["vids"], mask)
    for k in np.nonzero(mask)[0]:
        d_old = np.linalg.norm(project(s["mesh"].vertices[s["vids"][k]][None], s["pose"])[0] - pts2d[k])
        d_new = np.linalg.norm(project(s["mesh"].vertices[new_ids[k]][None], s["pose"])[0] - pts2d[k])
        assert d_new <= d_old + 1e-12
    assert np.array_equal(new_ids[~mask], s["vids"][~mask])


# --- full fit ---------------------------------------------------------------------


def fit_cfg(**kw):
    base = dict(n_id=5, n_exp=3, n_alb=6, contour_semantic_ids=CONTOUR_SEMANTIC_IDS,
                max_outer_iterations=10)
    base.update(kw)
    return FitConfig(**base)


def test_fit_image_recovers_truth(fit_scene):
    s = fit_scene
    lm2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    lms = LandmarkSet(s["sem"], s["vids"], points2d=lm2d)
    res = fit_image(s["model"], s["albedo"], s["img"], lms, fit_cfg())
    fitted = synthesize_mesh(s["model"], res.w_id, res.w_exp)
    rms = np.sqrt(((fitted.vertices - s["mesh"].vertices) ** 2).sum(axis=1).mean())
    reproj = project(fitted.vertices[res.landmark_vertex_ids], res.pose)
    lrmse = np.sqrt(((reproj - lm2d) ** 2).sum(axis=1).mean())
    assert rms < 2.0
    assert lrmse < 2.0
    totals = [t["total"] for t in res.energy_trace]
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(totals, totals[1:]))


def test_fit_image_huge_regularizers_return_mean_face(fit_scene):
    s = fit_scene
    lm2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    lms = LandmarkSet(s["sem"], s["vids"], points2d=lm2d)
    res = fit_image(s["model"], s["albedo"], s["img"], lms,
                    fit_cfg(lambda_id=1e9, lambda_exp=1e9, max_outer_iterations=4))
    centered = synthesize_mesh(s["model"], res.w_id, res.w_exp).vertices.ravel()
    np.testing.assert_allclose(centered, s["model"].mean_shape, atol=1e-3)


def test_fit_image_deterministic(fit_scene):
    s = fit_scene
    lm2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    lms = LandmarkSet(s["sem"], s["vids"], points2d=lm2d)
    r1 = fit_image(s["model"], s["albedo"], s["img"], lms, fit_cfg(max_outer_iterations=4))
    r2 = fit_image(s["model"], s["albedo"], s["img"], lms, fit_cfg(max_outer_iterations=4))
    assert np.array_equal(r1.w_id, r2.w_id)
    assert np.array_equal(r1.w_exp, r2.w_exp)
    assert np.array_equal(r1.w_alb, r2.w_alb)
    assert np.array_equal(r1.sh, r2.sh)
    assert np.array_equal(r1.pose.R, r2.pose.R)
    assert r1.energy_trace == r2.energy_trace


def test_fit_image_needs_landmarks(fit_scene):
    s = fit_scene
    lms = LandmarkSet(np.arange(3), s["vids"][:3],
                      points2d=np.zeros((3, 2)))
    with pytest.raises(FitError, match="pose init failed"):
        fit_image(s["model"], s["albedo"], s["img"], lms, fit_cfg())


def test_fit_parameter_count_clamping(fit_scene):
    # requested 50/52/100 clamp to the model ranks
    s = fit_scene
    lm2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    lms = LandmarkSet(s["sem"], s["vids"], points2d=lm2d)
    cfg = FitConfig(n_id=50, n_exp=52, n_alb=100, max_outer_iterations=2,
                    contour_semantic_ids=CONTOUR_SEMANTIC_IDS)
    assert (cfg.n_id, cfg.n_exp, cfg.n_alb) == (50, 52, 100)
    res = fit_image(s["model"], s["albedo"], s["img"], lms, cfg)
    assert len(res.w_id) == s["model"].r_id
    assert len(res.w_exp) == s["model"].r_exp
    assert len(res.w_alb) == s["albedo"].k


def test_fit_result_roundtrip(tmp_path, fit_scene):
    s = fit_scene
    lm2d = project(s["mesh"].vertices[s["vids"]], s["pose"])
    lms = LandmarkSet(s["sem"], s["vids"], points2d=lm2d)
    res = fit_image(s["model"], s["albedo"], s["img"], lms, fit_cfg(max_outer_iterations=3))
    res.save(tmp_path / "fit")
    back = FitResult.load(tmp_path / "fit")
    np.testing.assert_array_equal(back.w_id, res.w_id)
    np.testing.assert_array_equal(back.sh, res.sh)
    assert abs(back.pose.s - res.pose.s) < 1e-12
