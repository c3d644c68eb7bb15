import json

import numpy as np
import pytest

from facekit.morphable import assemble_tensor, reconstruct, tucker_decompose
from facekit.subdivision import subdivide
from facekit.synthetic import (
    TRUTH_RANK,
    SyntheticSpec,
    WrinkleParams,
    default_expression_params,
    generate_population,
    generate_subject,
    mean_subject,
    population_checksum,
    synthetic_albedo_model,
)


def test_same_spec_identical_meshes():
    a = generate_subject(SyntheticSpec(id_seed=3, tier="tiny"), 3)
    b = generate_subject(SyntheticSpec(id_seed=3, tier="tiny"), 3)
    for e in range(3):
        assert np.array_equal(a.base_mesh(e).vertices, b.base_mesh(e).vertices)
        assert np.array_equal(a.raw_mesh(e).vertices, b.raw_mesh(e).vertices)


def test_zero_wrinkle_raw_equals_subdivided_base():
    subj = generate_subject(
        SyntheticSpec(id_seed=1, tier="tiny", wrinkle=WrinkleParams(amplitude_mm=0.0)), 2
    )
    raw = subj.raw_mesh(1)
    plain = subdivide(subj.base_mesh(1), 1, "midpoint")
    assert np.array_equal(raw.vertices, plain.vertices)


def test_coupling_neutral_expression_static_only():
    full = generate_subject(
        SyntheticSpec(id_seed=2, tier="tiny", wrinkle=WrinkleParams(expression_coupling=1.0)), 2
    )
    rng = np.random.default_rng(0)
    uv = rng.uniform(0.1, 0.9, (200, 2))
    neutral_field = full.wrinkle_field(0, uv)
    static_only = generate_subject(
        SyntheticSpec(id_seed=2, tier="tiny", wrinkle=WrinkleParams(expression_coupling=0.0)), 2
    ).wrinkle_field(0, uv)
    np.testing.assert_array_equal(neutral_field, static_only)
    # a non-neutral expression with coupling produces a different field
    assert np.abs(full.wrinkle_field(1, uv) - neutral_field).max() > 1e-3


def test_population_shared_topology_and_collar(tmp_path):
    exps = default_expression_params(3)
    subj = generate_subject(SyntheticSpec(id_seed=5, tier="tiny", exp_params=exps), 3)
    topo = {subj.base_mesh(e).topology_id for e in range(3)}
    assert len(topo) == 1
    # expression deformation vanishes at the boundary collar
    neutral = subj.base_mesh(0)
    uv = neutral.uvs
    rim = (np.abs(uv[:, 0] - 0.5) > 0.47) | (np.abs(uv[:, 1] - 0.5) > 0.47)
    for e in (1, 2):
        delta = np.linalg.norm(subj.base_mesh(e).vertices - neutral.vertices, axis=1)
        assert delta[rim].max() < 1e-9
        assert delta[~rim].max() > 0.5


def test_population_directory_determinism(tmp_path):
    m1 = generate_population(3, 2, seed=7, out_dir=tmp_path / "a", tier="tiny")
    m2 = generate_population(3, 2, seed=7, out_dir=tmp_path / "b", tier="tiny")
    assert m1["topology_id"] == m2["topology_id"]
    assert population_checksum(tmp_path / "a") == population_checksum(tmp_path / "b")


def test_population_manifest_counts(tmp_path):
    generate_population(3, 2, seed=1, out_dir=tmp_path / "d", tier="tiny", write_raw=False)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["n_id"] == 3 and manifest["n_exp"] == 2
    subj_dirs = sorted((tmp_path / "d" / "subjects").iterdir())
    assert len(subj_dirs) == 3
    for sdir in subj_dirs:
        assert len(list((sdir / "truth_base").glob("*.ply"))) == 2
        assert len(list((sdir / "landmarks").glob("*.json"))) == 2
    assert (tmp_path / "d" / "schema.json").exists()


def test_population_tensor_has_truth_rank(tmp_path):
    from facekit.mesh import load_mesh

    generate_population(7, 4, seed=3, out_dir=tmp_path / "p", tier="tiny", write_raw=False)
    grid = []
    for i in range(7):
        row = [load_mesh(tmp_path / "p" / "subjects" / f"subj_{i:03d}" / "truth_base" / f"exp_{e:03d}.ply")
               for e in range(4)]
        grid.append(row)
    tensor, template = assemble_tensor(grid)
    r_id, r_exp = TRUTH_RANK
    model = tucker_decompose(tensor, template, r_id, r_exp)
    rel = np.linalg.norm(reconstruct(model) - tensor.data) / np.linalg.norm(tensor.data)
    assert rel < 1e-6


def test_landmarks_on_scan_surface():
    subj = generate_subject(SyntheticSpec(id_seed=4, tier="tiny"), 2)
    lms = subj.landmarks(1)
    base = subj.base_mesh(1)
    np.testing.assert_allclose(lms.points3d, base.vertices[lms.template_vertex_ids])
    assert len(lms) >= 18


def test_min_expressions_validated():
    with pytest.raises(ValueError):
        generate_subject(SyntheticSpec(tier="tiny"), 0)


def test_mean_subject_is_identity_zero():
    ms = mean_subject("tiny", 2)
    np.testing.assert_array_equal(ms.id_params, 0.0)


def test_albedo_model_orthonormal(tiny_model):
    alb = synthetic_albedo_model(tiny_model["model"].template_mesh(), k=5, seed=1)
    np.testing.assert_allclose(alb.basis.T @ alb.basis, np.eye(5), atol=1e-9)
    assert alb.mean.min() > 0.2 and alb.mean.max() < 0.9
    assert np.all(np.diff(alb.stddev) < 0)


def test_wrinkle_field_localized():
    subj = generate_subject(SyntheticSpec(id_seed=6, tier="tiny"), 2)
    rng = np.random.default_rng(1)
    uv = rng.uniform(0.05, 0.95, (4000, 2))
    field = subj.wrinkle_field(1, uv)
    frac_active = (np.abs(field) > 1e-4).mean()
    assert 0.05 < frac_active < 0.6  # band-limited wrinkles, not everywhere
