import csv
import json

import pytest

from vesseldistill.cli import run

TINY = {"teacher_widths": [8, 8, 8, 16], "student_widths": [4, 4, 4, 8], "codebook_size": 16,
        "patch_size": 16}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run(["gen-data", "--seed", "3", "--unlabeled", "2", "--labeled", "2", "--test", "1",
                "--dims", "16", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def teacher_runs(dataset, config, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    common = ["--data", str(dataset / "manifest.json"), "--config", str(config), "--epochs", "1"]
    assert run(["pretrain", *common, "--out", str(root / "pre")]) == 0
    assert run(["finetune", *common, "--teacher", str(root / "pre" / "checkpoint.vdck"),
                "--out", str(root / "fine")]) == 0
    return root


def test_gen_data_counts(dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    assert m["counts"] == {"unlabeled": 2, "labeled": 2, "test": 1}
    assert len(list(dataset.glob("*_image.vvol"))) == 5
    assert len(list(dataset.glob("*_label.vvol"))) == 3


def test_gen_data_refuses_nonempty(dataset):
    assert run(["gen-data", "--unlabeled", "1", "--labeled", "0", "--dims", "16",
                "--out", str(dataset)]) == 1


def test_evaluate_against_itself(dataset, tmp_path, capsys):
    assert run(["evaluate", "--pred", str(dataset), "--gt", str(dataset), "--eps", "0.001",
                "--out", str(tmp_path)]) == 0
    records = [json.loads(x) for x in (tmp_path / "metrics_report.jsonl").read_text().splitlines()]
    per_volume, summary = records[:-1], records[-1]
    assert len(per_volume) == 3 and summary["n"] == 3 and not summary["skipped"]
    for r in per_volume:
        assert r["DSC"] == 1.0 and r["HD95"] == 0.0 and r["Cl_Dice"] == 1.0
    assert "1.000" in capsys.readouterr().out


def test_pretrain_finetune_distill_chain(teacher_runs, dataset, config):
    assert (teacher_runs / "pre" / "config.json").is_file()
    assert (teacher_runs / "fine" / "metrics.jsonl").read_text().count("\n") == 1
    out = teacher_runs / "dis"
    assert run(["distill", "--data", str(dataset / "manifest.json"), "--config", str(config),
                "--epochs", "1", "--teacher", str(teacher_runs / "fine" / "checkpoint.vdck"),
                "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["weights"]["ramp_epochs"] == 1 and cfg["stage"] == "distill"


def test_existing_run_needs_force(teacher_runs, dataset, config):
    args = ["pretrain", "--data", str(dataset / "manifest.json"), "--config", str(config),
            "--epochs", "1", "--out", str(teacher_runs / "pre")]
    assert run(args) == 1


def test_distill_without_teacher(dataset, config, tmp_path, capsys):
    base = ["distill", "--data", str(dataset / "manifest.json"), "--config", str(config),
            "--epochs", "1"]
    assert run([*base, "--out", str(tmp_path / "a")]) == 1
    assert "--teacher" in capsys.readouterr().err
    assert run([*base, "--beta-max", "0", "--gamma", "0.5", "--out", str(tmp_path / "b")]) == 1
    assert run([*base, "--beta-max", "0", "--gamma", "0", "--out", str(tmp_path / "c")]) == 0


def test_infer_then_evaluate(teacher_runs, dataset, tmp_path):
    assert run(["infer", "--checkpoint", str(teacher_runs / "fine" / "checkpoint.vdck"),
                "--input", str(dataset), "--patch-size", "16", "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*_prob.vvol"))) == 5
    assert run(["evaluate", "--pred", str(tmp_path / "p"), "--gt", str(dataset)]) == 0


def test_inspect_codebook(teacher_runs, tmp_path):
    out = tmp_path / "cb.json"
    assert run(["inspect-codebook", "--checkpoint", str(teacher_runs / "pre" / "checkpoint.vdck"),
                "--out", str(out)]) == 0
    info = json.loads(out.read_text())
    assert info["size"] == 16 and info["dim"] == 8 and len(info["usage_counts"]) == 16
    assert sum(info["usage_counts"]) > 0
    assert 1.0 <= info["window_perplexity"] <= 16 and 1.0 <= info["eval_perplexity"] <= 16


def test_export_curves(teacher_runs, tmp_path):
    assert run(["export-curves", "--run-dir", str(teacher_runs / "pre"), "--out", str(tmp_path)]) == 0
    with (tmp_path / "pretrain_curves.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and float(rows[0]["L_rec"]) > 0 and rows[0]["L_dis"] == ""


def test_usage_errors(tmp_path):
    assert run([]) == 1
    assert run(["pretrain"]) == 1
    assert run(["pretrain", "--data", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert run(["export-curves", "--run-dir", str(tmp_path)]) == 1
    assert run(["gen-data", "--dims", "16", "16", "--out", str(tmp_path / "d")]) == 1


def test_corrupt_checkpoint_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.vdck"
    bad.write_bytes(b"VDCK" + b"\0" * 40)
    assert run(["inspect-codebook", "--checkpoint", str(bad)]) == 2
