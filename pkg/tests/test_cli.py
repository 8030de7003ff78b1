import json
import subprocess
import sys

import pytest

from qspace.cli import main

PHANTOM = ["phantom", "generate", "--preset", "separable", "--n-per-class", "4", "--desk-lesions"]
TRAIN = ["--profile", "desk", "--folds", "3", "--epochs", "1", "--batches-per-epoch", "2",
         "--config"]


@pytest.fixture
def train_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"slices_per_class": 4},
                                "network": {"signal_widths": [8, 8, 8], "ddc_channels": 8,
                                            "rep_width": 4}}))
    return str(path)


def run_pipeline(root, cfg, seed=7, model="e2e"):
    d = {k: str(root / k) for k in ("ph", "fit", "train", "eval", "rep")}
    assert main(PHANTOM + ["--seed", str(seed), "--out", d["ph"]]) == 0
    assert main(["fit", "dki", "--dataset", d["ph"], "--out", d["fit"]]) == 0
    assert main(["train", "--dataset", d["ph"], "--fit", d["fit"], "--model", model, "--seed",
                 str(seed), "--out", d["train"]] + TRAIN + [cfg]) == 0
    assert main(["evaluate", "--dataset", d["ph"], "--models", d["train"], "--fit", d["fit"],
                 "--bootstrap", "50", "--out", d["eval"]]) == 0
    assert main(["report", d["eval"], "--out", d["rep"]]) == 0
    return d


def test_end_to_end_five_row_table(tmp_path, train_cfg, capsys):
    d = run_pipeline(tmp_path, train_cfg)
    lines = (tmp_path / "rep" / "table.md").read_text().splitlines()
    assert len(lines) == 2 + 5
    assert [l.split("|")[1].strip() for l in lines[2:]] == ["E2E", "F2E", "DDC", "ADC", "AKC"]
    for sub in ("ph", "fit", "train", "eval", "rep"):
        manifest = json.loads((tmp_path / sub / "run_manifest.json").read_text())
        assert manifest["build"] and "elapsed_s" in manifest
    for name in ("report.json", "report.csv", "roc_E2E.csv", "roc.svg"):
        assert (tmp_path / "eval" / name).is_file()
    assert (tmp_path / "eval" / "roc.svg").read_text().startswith("<svg")
    train_manifest = json.loads((tmp_path / "train" / "run_manifest.json").read_text())
    # flags beat the file, the file beats the profile
    assert train_manifest["config"]["train"]["epochs"] == 1
    assert train_manifest["config"]["train"]["slices_per_class"] == 4
    assert train_manifest["config"]["train"]["lr0"] == 3e-3


def test_same_seed_identical_reports(tmp_path, train_cfg):
    a = run_pipeline(tmp_path / "a", train_cfg)
    b = run_pipeline(tmp_path / "b", train_cfg)
    ra = (tmp_path / "a" / "eval" / "report.json").read_bytes()
    rb = (tmp_path / "b" / "eval" / "report.json").read_bytes()
    assert ra == rb


def test_all_models(tmp_path, train_cfg):
    run_pipeline(tmp_path, train_cfg, model="all")
    doc = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert set(doc["methods"]) == {"E2E", "F2E", "DDC", "ADC", "AKC"}
    assert [r["Method"] for r in doc["table"]] == ["E2E", "F2E", "DDC", "ADC", "AKC"]
    assert set(doc["mcnemar_vs_E2E"]) == {"F2E", "DDC", "ADC", "AKC"}


def test_missing_manifest_exits_bad_dataset(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qspace", "evaluate", "--dataset", str(tmp_path),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode != 0
    err = proc.stderr.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("BadDataset:")


def test_config_errors(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path), "--model", "adc"]) == 2
    assert capsys.readouterr().err.startswith("ConfigError:")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {}}))
    assert main(PHANTOM + ["--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_output_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("QSPACE_OUT", str(tmp_path / "root"))
    assert main(PHANTOM + ["--seed", "1"]) == 0
    assert (tmp_path / "root" / "phantom" / "manifest.json").is_file()


def test_report_version_check(tmp_path, train_cfg):
    d = run_pipeline(tmp_path, train_cfg)
    path = tmp_path / "eval" / "report.json"
    doc = json.loads(path.read_text())
    doc["version"] = "0.0"
    path.write_text(json.dumps(doc))
    assert main(["report", str(path), "--out", str(tmp_path / "r2")]) == 2
