import json
from pathlib import Path

import numpy as np
import pytest

from facekit.cli import main
from facekit.config import load_config
from facekit.errors import PipelineError


def write_cfg(path, extra=None):
    cfg = {
        "tier": "tiny",
        "seed": 7,
        "nicp": {"stiffness_schedule": [20.0, 5.0, 1.0], "max_inner_iterations": 3,
                 "convergence_eps": 0.1, "landmark_weight": 20.0, "landmark_decay": 1.0},
        "bake": {"resolution": 256},
        "model": {"r_id": 2, "r_exp": 2},
        "synth": {"ids": 2, "exps": 2, "image_size": 96},
        "rig": {"mask_resolution": 256, "subdiv": 0},
    }
    if extra:
        cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    cfg = write_cfg(root / "cfg.json")
    args = ["--config", str(cfg)]
    assert main(["synth", str(root / "data"), *args]) == 0
    assert main(["register", "--dataset", str(root / "data"), "--out", str(root / "reg"), *args]) == 0
    assert main(["bake", "--dataset", str(root / "data"), "--registered", str(root / "reg"),
                 "--out", str(root / "maps"), *args]) == 0
    assert main(["build-model", "--dataset", str(root / "data"), "--registered", str(root / "reg"),
                 "--out", str(root / "model.fsbm"), *args]) == 0
    fx = root / "data" / "subjects" / "subj_000" / "fit_fixture"
    assert main(["fit", "--model", str(root / "model.fsbm"), "--image", str(fx / "image.png"),
                 "--landmarks", str(fx / "landmarks.json"), "--out", str(root / "fit0"),
                 "--truth-mesh", str(root / "data" / "subjects" / "subj_000" / "truth_base" / "exp_001.ply"),
                 *args]) == 0
    assert main(["rig", "--model", str(root / "model.fsbm"), "--fit", str(root / "fit0"),
                 "--maps", str(root / "maps" / "subj_000"), "--out", str(root / "rig0"),
                 "--alpha", "0", *args]) == 0
    assert main(["export-bundle", "--model", str(root / "model.fsbm"), "--fit", str(root / "fit0"),
                 "--maps", str(root / "maps" / "subj_000"), "--out", str(root / "bundle0"),
                 *args]) == 0
    return root


def test_chain_artifacts_exist(chain):
    assert (chain / "data" / "manifest.json").exists()
    assert (chain / "reg" / "subj_001" / "exp_001.ply").exists()
    assert (chain / "maps" / "subj_000" / "key_001.png").exists()
    assert (chain / "model.fsbm").exists()
    assert (chain / "model.fsbm.albedo.npz").exists()
    assert (chain / "fit0.json").exists() and (chain / "fit0.bin").exists()
    assert (chain / "bundle0" / "conformance.json").exists()


def test_run_reports_schema(chain):
    for rep in [chain / "data" / "run_report.json", chain / "reg" / "run_report.json",
                chain / "maps" / "run_report.json", chain / "model.fsbm.report.json",
                chain / "fit0.report.json", chain / "rig0" / "run_report.json"]:
        doc = json.loads(rep.read_text())
        assert doc["schema_version"] == 1
        assert set(doc) >= {"command", "inputs", "config", "metrics", "timing"}
        assert "wall_seconds" in doc["timing"]


def test_rig_alpha_zero_blend_equals_neutral(chain):
    from facekit.displacement import load_displacement

    posed = load_displacement(chain / "rig0" / "posed_map")
    neutral = load_displacement(chain / "maps" / "subj_000" / "key_000")
    assert np.array_equal(posed.valid, neutral.valid)
    span = max(neutral.values[neutral.valid].max() - neutral.values[neutral.valid].min(), 1e-9)
    assert np.abs(posed.values - neutral.values)[neutral.valid].max() <= 2 * span / 2**16


def test_fit_report_metrics(chain):
    doc = json.loads((chain / "fit0.report.json").read_text())
    assert "vertex_rms_mm" in doc["metrics"]
    assert doc["metrics"]["vertex_rms_mm"] < 5.0


def test_conformance_file_contents(chain):
    doc = json.loads((chain / "bundle0" / "conformance.json").read_text())
    assert len(doc["cases"]) >= 5
    j = json.loads((chain / "bundle0" / "manifest.json").read_text())["blendshape_count"]
    alphas = [tuple(c["alpha"]) for c in doc["cases"]]
    assert tuple([0.0] * j) in alphas
    for k in range(j):
        onehot = tuple(1.0 if i == k else 0.0 for i in range(j))
        assert onehot in alphas


def test_synth_refuses_overwrite(tmp_path):
    cfg = write_cfg(tmp_path / "cfg.json")
    out = tmp_path / "ds"
    assert main(["synth", str(out), "--config", str(cfg)]) == 0
    assert main(["synth", str(out), "--config", str(cfg)]) == 2
    assert main(["synth", str(out), "--config", str(cfg), "--force"]) == 0


def test_synth_missing_parent_exits_2(tmp_path):
    cfg = write_cfg(tmp_path / "cfg.json")
    assert main(["synth", str(tmp_path / "no" / "such" / "dir"), "--config", str(cfg)]) == 2


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bake": {"resolution": 123}}))
    assert main(["synth", str(tmp_path / "x"), "--config", str(bad)]) == 2


def test_pipeline_error_exits_1(tmp_path):
    cfg = write_cfg(tmp_path / "cfg.json")
    rc = main(["register", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o"),
               "--config", str(cfg)])
    assert rc in (1, 2) and rc != 0


def test_config_validation():
    with pytest.raises(PipelineError):
        load_config(None, {"bake": {"resolution": 333}})
    cfg = load_config(None, {"seed": 11})
    assert cfg["seed"] == 11
    assert cfg.section("fit")["n_id"] == 50


def test_rig_key_weights_override(chain, tmp_path):
    import numpy as np

    manifest = json.loads((chain / "bundle0" / "manifest.json").read_text())
    j = manifest["blendshape_count"]
    k = manifest["key_count"]
    rows = [[1.0 if i == kk else 0.0 for i in range(j)] for kk in range(k)]
    override = tmp_path / "kw.json"
    override.write_text(json.dumps(rows))
    cfg = write_cfg(tmp_path / "cfg.json")
    rc = main(["rig", "--model", str(chain / "model.fsbm"), "--fit", str(chain / "fit0"),
               "--maps", str(chain / "maps" / "subj_000"), "--out", str(tmp_path / "rig_kw"),
               "--key-weights", str(override), "--config", str(cfg)])
    assert rc == 0
    written = json.loads((tmp_path / "rig_kw" / "key_weights.json").read_text())
    assert written == rows
