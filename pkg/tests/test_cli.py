import json
import subprocess
import sys

import numpy as np
import pytest

from distillkit.cli import build_parser, main

SUBCOMMANDS = ["synth-data", "prepare", "train-teacher", "train-student", "distill", "matrix", "evaluate",
               "gradcam", "report"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth-data", "--classes", "4", "--per-class", "50", "--seed", "7", "--size", "32",
                 "--out", str(root)]) == 0
    assert main(["prepare", "--root", str(root), "--seed", "1"]) == 0
    return root


def test_synth_then_prepare_counts(prepared, capsys, tmp_path):
    code, out, _ = _run(capsys, "prepare", "--root", str(prepared), "--seed", "1", "--sidecar", str(tmp_path / "s.json"))
    assert code == 0
    summary = json.loads(out)
    assert summary["counts"] == {"train": 120, "val": 40, "test": 40}
    assert (prepared / "split.json").read_bytes() == (tmp_path / "s.json").read_bytes()


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_for_every_subcommand(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "distillkit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "distill" in res.stdout


def test_relation_with_one_teacher_is_config_error(prepared, capsys, tmp_path):
    code, _, err = _run(capsys, "distill", "--mode", "kd_relation", "--teachers", "t1.ckpt",
                        "--data", str(prepared / "split.json"), "--out", str(tmp_path))
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == "configuration" and payload["key"] == "train.teacher_ids"


def test_missing_teacher_checkpoint_exit_code(prepared, capsys, tmp_path):
    code, _, err = _run(capsys, "distill", "--mode", "kd_response", "--teachers", str(tmp_path / "gone.ckpt"),
                        "--data", str(prepared / "split.json"), "--out", str(tmp_path / "run"))
    assert code == 3
    assert json.loads(err)["error"] == "missing_artifact"
    assert not (tmp_path / "run").exists()


def test_unknown_config_key_exit_code(prepared, capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "attention": {"dmodel": 8}}}))
    code, _, err = _run(capsys, "train-student", "--config", str(cfg), "--data", str(prepared / "split.json"),
                        "--out", str(tmp_path))
    assert code == 2
    assert json.loads(err)["key"] == "train.attention.dmodel"
    cfg.write_text(json.dumps({"trian": {}}))
    code, _, err = _run(capsys, "train-student", "--config", str(cfg))
    assert code == 2 and json.loads(err)["key"] == "trian"


def test_missing_sidecar_exit_code(capsys, tmp_path):
    code, _, _ = _run(capsys, "train-student", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path))
    assert code == 3


def test_flag_beats_file_beats_default(prepared, capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 16, "learning_rate": 5e-4},
                               "data": {"sidecar": str(prepared / "split.json")}}))
    out = tmp_path / "run"
    code, _, _ = _run(capsys, "train-student", "--config", str(cfg), "--batch-size", "32", "--image-size", "32",
                      "--out", str(out))
    assert code == 0
    resolved = json.loads((out / "config.resolved.json").read_text())["train"]
    assert resolved["batch_size"] == 32
    assert resolved["learning_rate"] == 5e-4
    assert resolved["temperature"] == 1.0


def test_train_distill_evaluate_gradcam_report(prepared, capsys, tmp_path):
    common = ["--data", str(prepared / "split.json"), "--epochs", "1", "--batch-size", "16", "--image-size", "32"]
    teachers = []
    for k in (1, 2):
        out = tmp_path / f"T{k}"
        code, _, _ = _run(capsys, "train-teacher", "--backbone", "TOY", "--seed", str(k), "--out", str(out),
                          "--name", f"T{k}", *common)
        assert code == 0
        teachers.append(str(out / "model.ckpt"))
    code, stdout, _ = _run(capsys, "distill", "--mode", "kd_relation", "--teachers", *teachers, "--d-model", "16",
                           "--num-heads", "2", "--ffn-dim", "32", "--beta-rel", "0.5", "--out",
                           str(tmp_path / "runs" / "rel"), "--name", "KD_REL_T2", *common)
    assert code == 0
    assert json.loads(stdout)["name"] == "KD_REL_T2"
    resolved = json.loads((tmp_path / "runs" / "rel" / "config.resolved.json").read_text())["train"]
    assert resolved["attention"]["d_model"] == 16 and resolved["loss_weights"]["rel"] == 0.5

    code, stdout, _ = _run(capsys, "evaluate", "--checkpoint", str(tmp_path / "runs" / "rel" / "model.ckpt"),
                           "--data", str(prepared / "split.json"), "--out", str(tmp_path / "eval"))
    assert code == 0
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert metrics["accuracy"] == json.loads(stdout)["accuracy"]
    assert (tmp_path / "eval" / "confusion_matrix.png").is_file()

    image = next((prepared / "class_00").glob("*.png"))
    code, _, _ = _run(capsys, "gradcam", "--checkpoint", teachers[0], "--image", str(image), "--target-class", "0",
                      "--out", str(tmp_path / "cam"))
    assert code == 0
    heat = np.load(tmp_path / "cam" / "saliency.npy")
    assert heat.shape == (32, 32) and heat.min() >= 0 and heat.max() <= 1
    assert (tmp_path / "cam" / "saliency_overlay.png").is_file()

    code, _, _ = _run(capsys, "report", "--runs", str(tmp_path), "--format", "markdown")
    assert code == 0
    table = (tmp_path / "report.md").read_text()
    assert table.startswith("| Type | Model | Fine-Tuning | Accuracy | Precision | F1 Score | Recall |")
    assert "| KD Models | KD_REL_T2 |" in table and "| Teacher Models | T1 |" in table


def test_report_without_records(capsys, tmp_path):
    code, _, _ = _run(capsys, "report", "--runs", str(tmp_path))
    assert code == 3


def test_matrix_command(prepared, capsys, tmp_path):
    cfg = tmp_path / "matrix.json"
    cfg.write_text(json.dumps({
        "seed": 0,
        "defaults": {"epochs": 1, "batch_size": 16, "image_size": 32},
        "teachers": {"T1": {"backbone": "TOY"}, "T2": {"backbone": "TOY", "seed": 9}},
        "runs": ["STU", "KD_RESP_T1", "KD_FEAT_T1", "KD_FEAT_T2", "KD_REL_T2"],
    }))
    code, stdout, _ = _run(capsys, "matrix", "--config", str(cfg), "--data", str(prepared / "split.json"),
                           "--out", str(tmp_path / "m"))
    assert code == 0
    statuses = {r["name"]: r["status"] for r in json.loads(stdout)}
    assert set(statuses.values()) == {"ok"} and len(statuses) == 7
    doc = json.loads((tmp_path / "m" / "report.json").read_text())
    assert [r["Model"] for r in doc["rows"]] == ["T1", "T2", "STU", "KD_RESP_T1", "KD_FEAT_T1", "KD_FEAT_T2",
                                                 "KD_REL_T2"]
