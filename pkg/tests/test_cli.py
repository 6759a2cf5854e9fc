import json

import numpy as np
import pytest

from clothfold import io
from clothfold.cli import main
from clothfold.sim import EnvConfig, reset, render, top_camera


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo") / "left"
    assert main(["demo", "--task", "left", "--image-size", "48", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def classifier(tmp_path_factory):
    path = tmp_path_factory.mktemp("clf") / "clf.json"
    assert main(["classify", "train", "--per-class", "6", "--out", str(path)]) == 0
    return path


def error_id(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert err and err[0].startswith("error: ")
    return err[0].split(":")[1].strip()


# demo


def test_demo_manifest_and_determinism(demo_dir, tmp_path):
    manifest = json.loads((demo_dir / "manifest.json").read_text())
    assert manifest["task"] == "left" and manifest["horizon"] == 40
    again = tmp_path / "again"
    assert main(["demo", "--task", "left", "--image-size", "48", "--out", str(again)]) == 0
    assert (again / "trajectory.csv").read_bytes() == (demo_dir / "trajectory.csv").read_bytes()
    assert len(list((demo_dir / "frames").glob("*.png"))) == 41


def test_demo_mid_ends_folded(tmp_path):
    assert main(["demo", "--task", "mid", "--image-size", "32", "--out", str(tmp_path / "mid")]) == 0
    header, rows = io.read_rows(tmp_path / "mid" / "sim_states.csv")
    assert rows[-1, header.index("flap_mid")] == np.pi
    assert rows[-1, header.index("flap_left")] == 0 == rows[-1, header.index("flap_right")]


def test_demo_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["demo", "--out", str(blocker / "sub")]) != 0
    assert error_id(capsys) == "E_IO"


# train


def test_train_writes_metrics(demo_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--demo", str(demo_dir), "--out", str(out), "--iterations", "1", "--rollouts", "2",
                 "--image-size", "48", "--quiet"]) == 0
    header, rows = io.read_rows(out / "metrics.csv")
    assert header == ["iteration", "mean_cost", "min_cost", "success"] and len(rows) == 2
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["config"]["iterations"] == 1 and len(cfg["config_hash"]) == 16
    assert io.load_model(out / "policy.json", "tvlg_policy")["task"] == "left"


def test_train_bool_flag(demo_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--demo", str(demo_dir), "--out", str(out), "--iterations", "0", "--rollouts", "2",
                 "--image-size", "48", "--step-normalize", "false", "--quiet"]) == 0
    assert json.loads((out / "config.json").read_text())["config"]["step_normalize"] is False


def test_train_validation_enumerated(demo_dir, tmp_path, capsys):
    code = main(["train", "--demo", str(demo_dir), "--out", str(tmp_path / "x"), "--epsilon", "2.0",
                 "--rollouts", "1"])
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2 and all(e.startswith("error: E_CONFIG_RANGE:") for e in err)
    assert not (tmp_path / "x").exists()


def test_train_task_mismatch(demo_dir, tmp_path, capsys):
    assert main(["train", "--demo", str(demo_dir), "--out", str(tmp_path / "x"), "--task", "right"]) == 1
    assert error_id(capsys) == "E_TASK_MISMATCH"


def test_train_missing_demo(tmp_path, capsys):
    assert main(["train", "--demo", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == 1
    assert error_id(capsys) == "E_IO"


# eval


def test_eval_expert_and_zero(classifier, tmp_path, capsys):
    assert main(["eval", "--expert", "--classifier", str(classifier), "--out", str(tmp_path / "e.json")]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert rep["counts"]["summary"] == 8 and len(rep["runs"]) == 8
    assert "8/8" in capsys.readouterr().out
    assert main(["eval", "--zero", "--classifier", str(classifier), "--out", str(tmp_path / "z.json")]) == 0
    rep = json.loads((tmp_path / "z.json").read_text())
    assert rep["counts"] == {"approaching": 0, "lifting": 0, "rotating": 0, "pushing": 0, "summary": 0}


def test_eval_dimension_mismatch(classifier, tmp_path, capsys):
    from clothfold.policy import TvlgPolicy

    io.dump_model(tmp_path / "p.json", "tvlg_policy", {"task": "left", **TvlgPolicy.zeros(5, 25, 7).to_record()})
    assert main(["eval", str(tmp_path / "p.json"), "--classifier", str(classifier)]) == 1
    assert error_id(capsys) == "E_DIMENSION"


def test_eval_wrong_model_kind(classifier, capsys):
    assert main(["eval", str(classifier), "--classifier", str(classifier)]) == 1
    assert error_id(capsys) == "E_MODEL_KIND"


# saliency


def test_saliency_identical_frames(tmp_path):
    img = render(reset(EnvConfig(), "left"), EnvConfig(), top_camera(48)).image
    io.save_image(tmp_path / "a.png", img)
    assert main(["saliency", str(tmp_path / "a.png"), str(tmp_path / "a.png"), "--out", str(tmp_path / "o")]) == 0
    assert not io.load_mask(tmp_path / "o" / "segmentation.png").any()
    for name in ("flow_hsv", "static", "contour", "refined"):
        assert (tmp_path / "o" / f"{name}.png").exists()


def test_saliency_errors(tmp_path, capsys):
    io.save_image(tmp_path / "a.png", np.zeros((8, 8, 3)))
    io.save_image(tmp_path / "b.png", np.zeros((8, 9, 3)))
    assert main(["saliency", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--out", str(tmp_path / "o")]) == 1
    assert error_id(capsys) == "E_SHAPE"
    (tmp_path / "bad.png").write_bytes(b"not an image")
    assert main(["saliency", str(tmp_path / "bad.png"), str(tmp_path / "a.png"), "--out", str(tmp_path / "o")]) == 1
    assert error_id(capsys) == "E_IO"
    assert main(["saliency", str(tmp_path / "a.png"), str(tmp_path / "a.png"), "--out", str(tmp_path / "o"),
                 "--epsilon", "1.0"]) == 1
    assert error_id(capsys) == "E_CONFIG_RANGE"


# classify


def test_classify_predict(classifier, demo_dir, tmp_path, capsys):
    first, last = demo_dir / "frames" / "0000.png", demo_dir / "frames" / "0040.png"
    capsys.readouterr()
    assert main(["classify", "predict", "--model", str(classifier), str(first), str(last)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[1] == "flat"
    io.save_image(tmp_path / "blank.png", np.zeros((16, 16, 3)))
    assert main(["classify", "predict", "--model", str(classifier), str(tmp_path / "blank.png")]) == 1
    assert error_id(capsys) == "E_EMPTY_MASK"


# descriptor-train


def test_descriptor_train_small(tmp_path, capsys):
    out = tmp_path / "f.json"
    assert main(["descriptor-train", "--pairs", "2", "--test-pairs", "1", "--steps", "5", "--out", str(out)]) == 0
    assert io.load_model(out, "patch_featurizer")["trained"]
    assert "accuracy" in capsys.readouterr().out
    assert main(["descriptor-train", "--pairs", "0", "--out", str(out)]) == 1
    assert error_id(capsys) == "E_CONFIG_RANGE"


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["nonexistent"])
    assert exc.value.code == 2
