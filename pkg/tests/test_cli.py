import json

import numpy as np
import pytest

from affordiff import execution as E
from affordiff.cli import ConfigError, RunConfig, draw_waypoints, load_run_config, main
from affordiff.data import load_manifest
from affordiff.netpbm import read_ppm, write_ppm

TINY = {"model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "patch_size": 16},
        "train": {"batch_size": 4, "eval_interval": 2}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--task", "push-line", "--count", "12", "--seed", "7", "--out", str(root / "corpus")]) == 0
    return root


def run_pipeline(root, tag):
    out = root / tag
    cfg = str(root / "cfg.json")
    data = str(root / "corpus")
    assert main(["pretrain", "--config", cfg, "--data", data, "--out", str(out / "ck"), "--steps", "2"]) == 0
    assert main(["finetune", "--config", cfg, "--init", str(out / "ck" / "best"), "--data", data,
                 "--out", str(out / "ft"), "--steps", "4"]) == 0
    assert main(["eval", "--checkpoint", str(out / "ft" / "final.ckpt"), "--data", data,
                 "--out", str(out / "report.json"), "--predictions"]) == 0
    return out


def test_gen_data_writes_manifest(workspace):
    m = load_manifest(workspace / "corpus")
    assert len(m) == 12 and len(m.train) + len(m.test) == 12


def test_pipeline_outputs(workspace):
    out = run_pipeline(workspace, "a")
    for f in ("ck/best.ckpt", "ck/final.ckpt", "ck/metrics.jsonl", "ft/best.ckpt", "ft/final.ckpt", "ft/metrics.jsonl"):
        assert (out / f).exists(), f
    steps = [json.loads(x)["step"] for x in (out / "ft" / "metrics.jsonl").read_text().splitlines()]
    assert steps == [2, 4]
    report = json.loads((out / "report.json").read_text())
    assert len(report["predictions"]) == len(report["mae_norm_per_record"])


def test_pipeline_is_byte_identical(workspace):
    a = run_pipeline(workspace, "r1")
    b = run_pipeline(workspace, "r2")
    for f in ("ck/best.ckpt", "ck/metrics.jsonl", "ft/final.ckpt", "ft/metrics.jsonl", "report.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_seed_changes_training(workspace):
    base = run_pipeline(workspace, "s0")
    cfg, data = str(workspace / "cfg.json"), str(workspace / "corpus")
    out = workspace / "s1"
    assert main(["pretrain", "--config", cfg, "--data", data, "--out", str(out), "--steps", "2", "--seed", "1"]) == 0
    assert (out / "final.ckpt").read_bytes() != (base / "ck" / "final.ckpt").read_bytes()


def test_predict_with_overlay(workspace, tmp_path):
    run_pipeline(workspace, "p")
    rec = load_manifest(workspace / "corpus").records[0]
    write_ppm(tmp_path / "cur.ppm", rec.image_current)
    write_ppm(tmp_path / "prev.ppm", rec.image_previous)
    args = ["predict", "--checkpoint", str(workspace / "p" / "ft" / "final"), "--image", str(tmp_path / "cur.ppm"),
            "--previous", str(tmp_path / "prev.ppm"), "--instruction", "push red circle right",
            "--out", str(tmp_path / "wp.json"), "--overlay", str(tmp_path / "ov.ppm")]
    assert main(args) == 0
    wp = json.loads((tmp_path / "wp.json").read_text())
    assert len(wp["waypoints"]) == 5 and wp["resolution"] == [64, 64]
    assert read_ppm(tmp_path / "ov.ppm").shape == (256, 256, 3)
    first = (tmp_path / "wp.json").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "wp.json").read_bytes() == first


def test_overlay_marks_contact_point():
    img = draw_waypoints(np.zeros((16, 16, 3), dtype=np.uint8), np.array([[0.5, 0.5], [0.9, 0.5]]))
    assert tuple(img[32, 32]) == (255, 0, 255)
    assert tuple(img[32, 45]) == (255, 255, 255)


def test_execute(tmp_path):
    (tmp_path / "wp.json").write_text(json.dumps({"waypoints": [[0.5, 0.5], [0.6, 0.5], [0.7, 0.5]],
                                                   "resolution": [64, 64]}))
    E.save_depth(tmp_path / "d.pgm", E.DepthMap(np.full((64, 64), 0.75)))
    (tmp_path / "k.json").write_text(json.dumps({"fx": 60.0, "fy": 60.0, "cx": 31.5, "cy": 31.5}))
    (tmp_path / "g.json").write_text(json.dumps([{"position": [0, 0, 0.75], "quaternion": [1, 0, 0, 0]}]))
    args = ["execute", "--waypoints", str(tmp_path / "wp.json"), "--depth", str(tmp_path / "d.pgm"),
            "--intrinsics", str(tmp_path / "k.json"), "--grasps", str(tmp_path / "g.json"),
            "--out", str(tmp_path / "plan.json")]
    assert main(args) == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["heights"] == ["at-target-level", "above-target", "at-target-level"]
    steps = np.linalg.norm(np.diff([p["position"] for p in plan["poses"]], axis=0), axis=1)
    assert steps.max() <= 0.01 + 1e-12


def test_execute_uses_supplied_heights(tmp_path):
    (tmp_path / "wp.json").write_text(json.dumps({"waypoints": [[0.5, 0.5], [0.6, 0.5]], "resolution": [8, 8],
                                                   "heights": ["above-target", "above-target"]}))
    E.save_depth(tmp_path / "d.pgm", E.DepthMap(np.full((8, 8), 1.0)))
    (tmp_path / "k.json").write_text(json.dumps({"fx": 8.0, "fy": 8.0, "cx": 3.5, "cy": 3.5}))
    (tmp_path / "g.json").write_text(json.dumps([{"position": [0, 0, 1]}]))
    assert main(["execute", "--waypoints", str(tmp_path / "wp.json"), "--depth", str(tmp_path / "d.pgm"),
                 "--intrinsics", str(tmp_path / "k.json"), "--grasps", str(tmp_path / "g.json"),
                 "--out", str(tmp_path / "plan.json"), "--clearance", "0.2"]) == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert [p[2] for p in plan["waypoints3d"]] == pytest.approx([1.2, 1.2])


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--precision", "64", "--seeds", "2", "--coords", "20"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "model" in out


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 1
    assert main(["gen-data", "--count", "1", "--out", str(tmp_path / "c")]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"d_model": 30, "n_heads": 4}}))
    assert main(["pretrain", "--config", str(tmp_path / "bad.json"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_run_config_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    cfg = load_run_config(tmp_path / "c.json", ["train.lr=0.003", "schedule.kind=linear-beta", "sampler.num_steps=8"])
    assert cfg.train.lr == 0.003 and cfg.schedule.kind == "linear-beta" and cfg.sampler.num_steps == 8
    assert cfg.model.d_model == 32
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        load_run_config(None, ["train.momentum=0.9"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["optimizer.lr=1"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["lr=1"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["schedule.kind=quadratic"])
