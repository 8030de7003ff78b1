"""Full cross-validated comparison of the five classifiers on one dataset."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .dki import fit_lesion, parametric_maps
from .errors import InsufficientData
from .metrics import (SENSITIVITY_FLOOR, bootstrap_sd, mcnemar, operating_point, roc_auc,
                      roc_curve, threshold_at_sensitivity)
from .pipelines import TABLE_ORDER, ModelKind, NetworkConfig, scalar_baseline, score_to_coefficient
from .train import (Fold, TrainConfig, TrainedModel, build_pool, make_folds, predict_patient,
                    train_model)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "qspace-eval-report"
REPORT_VERSION = "1.0"
TABLE_COLUMNS = ("AUC", "Acc. at t_c", "Spec. (Sens.) at t_c", "t_c")
BOOTSTRAP_SAMPLES = 1000
NOTES = (
    "uncertainties are standard deviations over 1000 patient-level bootstrap resamples",
    "t_c is selected on the pooled test predictions of all folds, which biases the "
    "operating point optimistically",
)

# Single-core desk profile: narrow widths, one member, no dropout, shorter epochs.
# The full-width defaults stay available through TrainConfig() / NetworkConfig().
DESK_NETWORK = NetworkConfig(signal_widths=(16, 32, 32), rep_width=16, dropout_p=0.0, ddc_channels=32)
DESK_TRAIN = TrainConfig(batches_per_epoch=20, lr0=3e-3, ensemble_size=1, folds=5)
DESK_LESION_SIZE = (4, 12)
PROFILES = {"full": (TrainConfig(), NetworkConfig()), "desk": (DESK_TRAIN, DESK_NETWORK)}


def fit_all(ds: Dataset) -> tuple:
    """Lesion coefficients and parametric maps per patient id (None for invisible lesions)."""
    coeffs, maps = {}, {}
    for p in ds.patients:
        if p.roi.invisible:
            coeffs[p.patient_id] = None
            maps[p.patient_id] = None
            continue
        c = fit_lesion(p.stack, p.roi, ds.bvalues)
        maps[p.patient_id] = parametric_maps(p.stack, p.roi, ds.bvalues, c)
        coeffs[p.patient_id] = c
    return coeffs, maps


def train_fold(kind: ModelKind, ds: Dataset, fold: Fold, train_cfg: TrainConfig,
               net_cfg: NetworkConfig, maps: Optional[dict] = None) -> TrainedModel:
    patients = ds.patients
    train_pool = build_pool(kind, net_cfg, [patients[i] for i in fold.train], maps)
    val_pool = build_pool(kind, net_cfg, [patients[i] for i in fold.val], maps)
    return train_model(kind, train_pool, val_pool, train_cfg, net_cfg,
                       in_channels=len(ds.bvalues) + 1, fold=fold.index)


def fold_predictions(kind: ModelKind, model: TrainedModel, ds: Dataset, fold: Fold,
                     net_cfg: NetworkConfig, maps: Optional[dict] = None) -> dict:
    out = {}
    for i in fold.test:
        p = ds.patients[i]
        m = maps.get(p.patient_id) if maps is not None else None
        out[p.patient_id] = predict_patient(model.members, kind, net_cfg, p, m)
    return out


@dataclass
class MethodResult:
    kind: ModelKind
    scores: dict                          # patient_id -> malignancy score
    auc: float = math.nan
    auc_sd: float = math.nan
    accuracy_sd: float = math.nan
    specificity_sd: float = math.nan
    point: Optional[object] = None

    def row(self) -> dict:
        pt = self.point
        return {
            "Method": self.kind.value,
            "AUC": f"{self.auc:.3f} ± {self.auc_sd:.3f}",
            "Acc. at t_c": f"{pt.accuracy:.3f} ± {self.accuracy_sd:.3f}",
            "Spec. (Sens.) at t_c": f"{pt.specificity:.3f} ± {self.specificity_sd:.3f} ({pt.sensitivity:.3f})",
            "t_c": score_to_coefficient(self.kind, pt.threshold),
        }

    def to_dict(self) -> dict:
        pt = self.point
        return {
            "auc": self.auc, "auc_sd": self.auc_sd,
            "accuracy": pt.accuracy, "accuracy_sd": self.accuracy_sd,
            "specificity": pt.specificity, "specificity_sd": self.specificity_sd,
            "sensitivity": pt.sensitivity,
            "threshold": pt.to_dict()["threshold"],
            "threshold_display": score_to_coefficient(self.kind, pt.threshold),
            "confusion": {"tp": pt.tp, "fp": pt.fp, "tn": pt.tn, "fn": pt.fn},
            "flag": pt.flag,
            "scores": {pid: _json_float(s) for pid, s in sorted(self.scores.items())},
        }


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


@dataclass
class EvalReport:
    methods: dict                         # ModelKind -> MethodResult
    labels: dict                          # patient_id -> 0/1
    mcnemar: dict = field(default_factory=dict)   # method name -> McNemarResult vs E2E
    floor: float = SENSITIVITY_FLOOR
    folds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def ordered(self) -> list:
        return [self.methods[k] for k in TABLE_ORDER if k in self.methods]

    def table(self) -> list:
        return [m.row() for m in self.ordered()]

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "columns": list(TABLE_COLUMNS),
            "sensitivity_floor": self.floor,
            "n_patients": len(self.labels),
            "n_malignant": int(sum(self.labels.values())),
            "methods": {m.kind.value: m.to_dict() for m in self.ordered()},
            "mcnemar_vs_E2E": {k: v.to_dict() for k, v in sorted(self.mcnemar.items())},
            "table": self.table(),
            "labels": dict(sorted(self.labels.items())),
            "folds": self.folds,
            "config": self.config,
            "notes": list(NOTES),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "auc", "auc_sd", "accuracy", "accuracy_sd", "specificity",
                    "specificity_sd", "sensitivity", "threshold", "tp", "fp", "tn", "fn",
                    "mcnemar_p_vs_E2E"])
        for m in self.ordered():
            pt = m.point
            mc = self.mcnemar.get(m.kind.value)
            w.writerow([m.kind.value, m.auc, m.auc_sd, pt.accuracy, m.accuracy_sd, pt.specificity,
                        m.specificity_sd, pt.sensitivity, _json_float(pt.threshold), pt.tp, pt.fp,
                        pt.tn, pt.fn, "" if mc is None else mc.p_value])
        return buf.getvalue()

    def roc_csv(self, kind: ModelKind) -> str:
        m = self.methods[kind]
        pids = sorted(m.scores)
        pts = roc_curve([m.scores[p] for p in pids], [self.labels[p] for p in pids])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in pts:
            w.writerow([_json_float(t), fpr, tpr])
        return buf.getvalue()


def evaluate_scores(kind_scores: dict, labels: dict, floor: float = SENSITIVITY_FLOOR,
                    n_boot: int = BOOTSTRAP_SAMPLES, seed: int = 0) -> EvalReport:
    """Pooled metrics per method plus McNemar specificity tests against E2E."""
    pids = sorted(labels)
    y = np.array([labels[p] for p in pids])
    methods = {}
    for kind, scores in kind_scores.items():
        missing = set(pids) - set(scores)
        if missing:
            raise InsufficientData(f"{kind.value} has no prediction for {sorted(missing)[:3]}")
        s = np.array([scores[p] for p in pids], dtype=np.float64)
        pt = threshold_at_sensitivity(s, y, floor)
        t = pt.threshold
        res = MethodResult(kind, dict(scores), roc_auc(s, y), point=pt)
        res.auc_sd = bootstrap_sd(roc_auc, s, y, n_boot, seed)
        res.accuracy_sd = bootstrap_sd(lambda a, b: operating_point(a, b, t).accuracy, s, y, n_boot, seed)
        res.specificity_sd = bootstrap_sd(lambda a, b: operating_point(a, b, t).specificity,
                                          s, y, n_boot, seed)
        methods[kind] = res
    report = EvalReport(methods, dict(labels), floor=floor)
    ref = methods.get(ModelKind.E2E)
    if ref is not None:
        a = np.array([ref.scores[p] for p in pids])
        for kind, res in methods.items():
            if kind is ModelKind.E2E:
                continue
            b = np.array([res.scores[p] for p in pids])
            report.mcnemar[kind.value] = mcnemar(a, b, y, ref.point.threshold, res.point.threshold)
    return report


def run_experiment(ds: Dataset, train_cfg: TrainConfig, net_cfg: NetworkConfig,
                   kinds: Sequence[ModelKind] = TABLE_ORDER, jobs: int = 1,
                   floor: float = SENSITIVITY_FLOOR, n_boot: int = BOOTSTRAP_SAMPLES) -> EvalReport:
    """Cross-validate every requested method and evaluate the pooled test predictions.

    With ``jobs > 1`` folds train in a thread pool; every member draws from seeds
    derived from (seed, kind, fold, member), so the report does not depend on
    ``jobs``.
    """
    kinds = [ModelKind(k) for k in kinds]
    folds = make_folds(ds.labels, train_cfg)
    need_fit = any(k in (ModelKind.F2E, ModelKind.ADC_SCALAR, ModelKind.AKC_SCALAR) for k in kinds)
    coeffs, maps = fit_all(ds) if need_fit else ({}, {})

    kind_scores = {}
    for kind in kinds:
        if not kind.is_network:
            kind_scores[kind] = {p.patient_id: scalar_baseline(kind, coeffs[p.patient_id])
                                 for p in ds.patients}
            continue
        use_maps = maps if kind.uses_maps else None

        def one(fold, kind=kind, use_maps=use_maps):
            model = train_fold(kind, ds, fold, train_cfg, net_cfg, use_maps)
            return fold_predictions(kind, model, ds, fold, net_cfg, use_maps)

        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(jobs) as pool:
                results = list(pool.map(one, folds))
        else:
            results = [one(f) for f in folds]
        preds = {}
        for r in results:
            preds.update(r)
        kind_scores[kind] = {pid: pr.p_malignant for pid, pr in preds.items()}
        log.info("%s done", kind.value)

    labels = {p.patient_id: p.label.target for p in ds.patients}
    report = evaluate_scores(kind_scores, labels, floor, n_boot, train_cfg.seed)
    report.folds = [f.to_dict() for f in folds]
    report.config = {"train": train_cfg.to_dict(), "network": net_cfg.to_dict(),
                     "kinds": [k.value for k in kinds]}
    return report
