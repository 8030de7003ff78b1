import json
import math

import numpy as np
import pytest

from qspace.errors import InsufficientData
from qspace.experiment import (TABLE_COLUMNS, evaluate_scores, run_experiment)
from qspace.phantom import generate, preset
from qspace.pipelines import ModelKind, NetworkConfig
from qspace.train import TrainConfig

NET = NetworkConfig(signal_widths=(8, 8, 8), rep_width=4, ddc_channels=8, dropout_p=0.0)
CFG = TrainConfig(epochs=2, batches_per_epoch=3, slices_per_class=4, ensemble_size=1, folds=3,
                  lr0=3e-3, seed=2)


@pytest.fixture(scope="module")
def ds():
    return generate(preset("separable", n_patients_per_class=6, seed=3, volume_shape=(4, 24, 24),
                           lesion_size_range=(4, 8)))


@pytest.fixture(scope="module")
def report(ds):
    return run_experiment(ds, CFG, NET, n_boot=50)


def test_report_has_table_columns(report):
    rows = report.table()
    assert [r["Method"] for r in rows] == ["E2E", "F2E", "DDC", "ADC", "AKC"]
    for r in rows:
        assert set(r) == {"Method", *TABLE_COLUMNS}
    assert TABLE_COLUMNS == ("AUC", "Acc. at t_c", "Spec. (Sens.) at t_c", "t_c")
    assert rows[3]["t_c"].startswith("ADC <= ") and rows[4]["t_c"].startswith("AKC >= ")


def test_every_patient_predicted_once(report, ds):
    for m in report.ordered():
        assert sorted(m.scores) == sorted(ds.patient_ids)
    tests = sorted(i for f in report.folds for i in f["test"])
    assert tests == list(range(len(ds)))


def test_counts_consistent(report, ds):
    for m in report.ordered():
        pt = m.point
        assert pt.tp + pt.fp + pt.tn + pt.fn == len(ds)
        assert pt.sensitivity >= 0.96 or pt.flag
    assert set(report.mcnemar) == {"F2E", "DDC", "ADC", "AKC"}


def test_json_and_csv(report):
    doc = json.loads(report.to_json())
    assert doc["schema"] == "qspace-eval-report"
    assert any("bootstrap" in n for n in doc["notes"])
    assert any("optimistic" in n for n in doc["notes"])
    assert report.to_csv().splitlines()[0].startswith("method,auc,auc_sd")
    roc = report.roc_csv(ModelKind.ADC_SCALAR).splitlines()
    assert roc[0] == "threshold,fpr,tpr" and roc[-1].endswith(",1.0,1.0")


def test_parallel_equals_serial(ds, report):
    par = run_experiment(ds, CFG, NET, jobs=3, n_boot=50)
    assert par.to_json() == report.to_json()


def test_identical_scores_give_unit_mcnemar():
    labels = {f"p{i}": i % 2 for i in range(10)}
    s = {f"p{i}": float(i) for i in range(10)}
    rep = evaluate_scores({k: dict(s) for k in ModelKind}, labels, n_boot=20)
    assert all(r.p_value == 1.0 for r in rep.mcnemar.values())


def test_missing_prediction_rejected():
    labels = {"a": 0, "b": 1}
    with pytest.raises(InsufficientData):
        evaluate_scores({ModelKind.E2E: {"a": 0.1}}, labels, n_boot=5)


def test_sentinel_serialised():
    labels = {"a": 0, "b": 1, "c": 0}
    rep = evaluate_scores({ModelKind.ADC_SCALAR: {"a": -math.inf, "b": -1.0, "c": -2.0}}, labels,
                          n_boot=5)
    doc = json.loads(rep.to_json())
    assert doc["methods"]["ADC"]["scores"]["a"] == "-inf"
