"""End-to-end pipeline and CLI tests on a miniature configuration."""

import json

import numpy as np
import pytest

from sliceprop.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, main
from sliceprop.errors import ConfigError, StageDependencyError
from sliceprop.pipeline import (
    CONFIG_DEFAULTS,
    build_phantom_specs,
    file_digest,
    load_config,
    parse_config_text,
    render_phantom,
    resolve_config,
    stage_eval,
    stage_synth,
)

MINI = {
    "families": ["cylinder"],
    "n_train": 1,
    "n_test": 1,
    "shape": [6, 24, 24],
    "window_radius": 3,
    "encoder_hidden": [4],
    "feature_dim": 4,
    "epochs": 1,
    "refiner": "identity",
}


def _mini_cfg(out, **kw):
    raw = dict(MINI)
    raw.update(kw)
    raw["out"] = str(out)
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# configuration


def test_parse_key_value_text():
    raw = parse_config_text("seed = 3\n# comment\nfamilies=cylinder\nplot=false\n")
    cfg = resolve_config(raw)
    assert cfg["seed"] == 3
    assert cfg["families"] == ["cylinder"]
    assert cfg["plot"] is False


def test_parse_json_text():
    raw = parse_config_text(json.dumps({"seed": 5, "shape": [4, 16, 16]}))
    cfg = resolve_config(raw)
    assert cfg["seed"] == 5
    assert cfg["shape"] == [4, 16, 16]


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config keys: learning_rte"):
        resolve_config({"learning_rte": 1e-4})


def test_bad_family_rejected():
    with pytest.raises(ConfigError, match="family"):
        resolve_config({"families": ["spleen"]})


def test_defaults_are_complete():
    cfg = resolve_config({})
    assert set(cfg) == set(CONFIG_DEFAULTS)
    assert cfg["learning_rate"] == 1e-4
    assert cfg["weight_decay"] == 0.005
    assert cfg["epochs"] == 4
    assert cfg["window_radius"] == 7


def test_overrides_take_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1}))
    cfg = load_config(path, {"seed": 9, "out": "somewhere"})
    assert cfg["seed"] == 9
    assert cfg["out"] == "somewhere"


# ---------------------------------------------------------------------------
# phantom families


def test_family_specs_have_soi_first_and_same_support():
    for family in ("cylinder", "object_appears", "object_ends"):
        full, soi = build_phantom_specs(family, (8, 24, 24), 0.0, seed=3)
        assert soi.objects == [full.objects[0]]
        assert full.seed == soi.seed


def test_object_ends_family_ends():
    vol, gt = render_phantom("object_ends", (10, 24, 24), 0.0, 5, "x")
    areas = gt.data.reshape(10, -1).sum(axis=1)
    assert areas[0] > 0
    assert areas[-1] == 0


def test_object_appears_distractor_not_in_gt():
    vol, gt = render_phantom("object_appears", (10, 24, 24), 0.0, 5, "x")
    areas = gt.data.reshape(10, -1).sum(axis=1)
    # SOI spans the full depth; the appearing distractor never enters the mask
    assert (areas > 0).all()
    assert len(set(areas.tolist())) == 1


def test_cylinder_family_z_constant_volume():
    vol, gt = render_phantom("cylinder", (6, 24, 24), 0.0, 1, "c")
    for z in range(1, 6):
        assert np.array_equal(vol.data[z], vol.data[0])


# ---------------------------------------------------------------------------
# stages on a miniature problem


def test_stage_synth_layout_and_manifest(tmp_path):
    cfg = _mini_cfg(tmp_path)
    stage_synth(cfg)
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert manifest["stage"] == "synth"
    train = manifest["volumes"]["train"]
    assert len(train) == 1
    entry = train[0]
    assert (tmp_path / "data" / (entry["stem"] + ".json")).exists()
    assert (tmp_path / "data" / (entry["stem"] + ".raw")).exists()
    assert (tmp_path / "data" / (entry["mask_stem"] + ".raw")).exists()
    assert 0 <= entry["annotated_index"] < 6


def test_stage_synth_deterministic(tmp_path):
    cfg_a = _mini_cfg(tmp_path / "a")
    cfg_b = _mini_cfg(tmp_path / "b")
    stage_synth(cfg_a)
    stage_synth(cfg_b)
    for rel in ["data/train/cylinder-train-00.raw", "data/test/cylinder-test-00.raw"]:
        assert file_digest(tmp_path / "a" / rel) == file_digest(tmp_path / "b" / rel)


def test_eval_requires_runs(tmp_path):
    cfg = _mini_cfg(tmp_path)
    stage_synth(cfg)
    with pytest.raises(StageDependencyError, match="propagation"):
        stage_eval(cfg)


def test_cli_exit_codes(tmp_path):
    # missing upstream stage -> dependency error
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**MINI, "out": str(tmp_path / "o")}))
    assert main(["synth", "--config", str(cfg_path)]) == EXIT_OK
    assert main(["gen-pls", "--config", str(cfg_path)]) == EXIT_DEPENDENCY
    # unknown config key -> config error
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"does_not_exist": 1, "out": str(tmp_path / "o")}))
    assert main(["synth", "--config", str(bad)]) == EXIT_CONFIG
    # unknown subcommand -> usage error
    assert main(["frobnicate", "--config", str(cfg_path)]) == EXIT_CONFIG
    # missing out dir -> config error
    none = tmp_path / "none.json"
    none.write_text(json.dumps(dict(MINI)))
    assert main(["synth", "--config", str(none)]) == EXIT_CONFIG


@pytest.mark.slow
def test_full_pipeline_mini_and_idempotent_rerun(tmp_path):
    """Run every stage twice on a tiny problem; artifacts must be identical."""
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**MINI, "out": str(out), "plot": True}))

    stages = [
        "synth",
        "train-bootstrap",
        "gen-pls",
        "refine-pls",
        "train-oeg",
        "propagate",
        "eval",
        "plot",
    ]
    for stage in stages:
        assert main([stage, "--config", str(cfg_path)]) == EXIT_OK, stage

    artifacts = [
        "bootstrap/encoder.ckpt",
        "bootstrap/train_log.csv",
        "pls/cylinder-train-00.pl.raw",
        "pls_refined/cylinder-train-00.pl.raw",
        "oeg/encoder.ckpt",
        "propagate/dual_reuse_prev/cylinder-test-00.soft.raw",
        "propagate/dual_reuse_prev/cylinder-test-00.bin.raw",
        "propagate/dual_reuse_prev/trace.csv",
        "eval/results.csv",
        "eval/summary.csv",
        "eval/decay.csv",
    ]
    digests = {rel: file_digest(out / rel) for rel in artifacts}
    assert (out / "eval" / "decay.png").exists()

    # idempotence: rerunning any stage with the unchanged config reproduces
    # identical bytes
    for stage in stages:
        assert main([stage, "--config", str(cfg_path)]) == EXIT_OK, stage
    for rel, digest in digests.items():
        assert file_digest(out / rel) == digest, rel


@pytest.mark.slow
def test_eval_refuses_mixed_provenance(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**MINI, "out": str(out)}))
    for stage in ["synth", "train-bootstrap", "gen-pls", "refine-pls", "train-oeg", "propagate"]:
        assert main([stage, "--config", str(cfg_path)]) == EXIT_OK
    # regenerate the data with a different seed: the existing propagation run
    # no longer matches the data manifest
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps({**MINI, "out": str(out), "seed": 123}))
    assert main(["synth", "--config", str(cfg2)]) == EXIT_OK
    assert main(["eval", "--config", str(cfg2)]) == EXIT_DEPENDENCY


def test_plot_flag_off_csv_only(tmp_path, monkeypatch):
    # build the minimal eval inputs by hand: decay.csv + manifest
    out = tmp_path / "o"
    (out / "eval").mkdir(parents=True)
    (out / "eval" / "decay.csv").write_text("run,distance,mean_dice\nr,0,1.0\n")
    (out / "eval" / "manifest.json").write_text(json.dumps({"stage": "eval"}))
    from sliceprop.pipeline import stage_plot

    cfg = _mini_cfg(out, plot=False)
    stage_plot(cfg)
    assert not (out / "eval" / "decay.png").exists()
    cfg = _mini_cfg(out, plot=True)
    stage_plot(cfg)
    assert (out / "eval" / "decay.png").exists()
