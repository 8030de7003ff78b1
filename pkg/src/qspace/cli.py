"""Command-line entry point: ``qspace phantom|fit|train|evaluate|report``.

Every command writes a ``run_manifest.json`` into its output directory. Failures
exit with status 2 and print a single ``ErrorClass: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import read_dataset, write_dataset
from .dki import LesionCoefficients, fit_lesion, parametric_maps
from .errors import BadDataset, ConfigError, FormatVersionError, QSpaceError, ShapeMismatch
from .experiment import (DESK_LESION_SIZE, PROFILES, EvalReport, REPORT_SCHEMA, REPORT_VERSION,
                         evaluate_scores, fold_predictions, train_fold)
from .metrics import SENSITIVITY_FLOOR
from .nn import load_checkpoint, save_checkpoint
from .phantom import PRESETS, PhantomConfig, generate, preset
from .pipelines import TABLE_ORDER, ModelKind, NetworkConfig, scalar_baseline
from .plots import roc_svg
from .train import Fold, TrainConfig, TrainedModel, make_folds

log = logging.getLogger("qspace")

OUT_ENV = "QSPACE_OUT"
MANIFEST_NAME = "run_manifest.json"
COEFF_FORMAT = "qspace-coefficients"
MODELS_FORMAT = "qspace-models"
ARTIFACT_VERSION = "1.0"


# ---------------------------------------------------------------------------
# manifest and config plumbing


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict
    outputs: list = field(default_factory=list)
    build: str = field(default_factory=_build_id)
    started: float = field(default_factory=time.time)
    elapsed_s: float = 0.0

    def write(self, out: Path) -> Path:
        self.elapsed_s = round(time.time() - self.started, 3)
        path = out / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "qspace_out")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - {"profile", "preset", "phantom", "train", "network"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _train_configs(args, file_cfg: dict) -> tuple:
    """Defaults from the profile, then the file, then flags."""
    profile = args.profile or file_cfg.get("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    tc, nc = PROFILES[profile]
    train = tc.to_dict()
    train.update(file_cfg.get("train", {}))
    for flag, key in (("seed", "seed"), ("folds", "folds"), ("ensemble_size", "ensemble_size"),
                      ("epochs", "epochs"), ("batches_per_epoch", "batches_per_epoch")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    network = nc.to_dict()
    network.update(file_cfg.get("network", {}))
    return profile, TrainConfig.from_dict(train), NetworkConfig.from_dict(network)


def _kinds(names) -> list:
    if not names or any(n.lower() == "all" for n in names):
        return [k for k in TABLE_ORDER if k.is_network]
    kinds = []
    for n in names:
        k = ModelKind.parse(n)
        if not k.is_network:
            raise ConfigError(f"{k.value} is a scalar baseline; it needs no training")
        if k not in kinds:
            kinds.append(k)
    return [k for k in TABLE_ORDER if k in kinds]


def _check_artifact(meta: dict, fmt: str, path: Path):
    if meta.get("format") != fmt:
        raise BadDataset(f"{path} is not a {fmt} file")
    if meta.get("version") != ARTIFACT_VERSION:
        raise FormatVersionError(f"{path}: version {meta.get('version')!r}, expected {ARTIFACT_VERSION!r}")


def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise BadDataset(f"missing {what} {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadDataset(f"unreadable {what} {path}: {exc}") from None


# ---------------------------------------------------------------------------
# phantom generate


def cmd_phantom(args) -> int:
    file_cfg = _load_config(args.config)
    name = args.preset or file_cfg.get("preset", "default")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    overrides = dict(file_cfg.get("phantom", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_per_class is not None:
        overrides["n_patients_per_class"] = args.n_per_class
    if args.snr is not None:
        overrides["snr"] = args.snr
    if args.desk_lesions:
        overrides["lesion_size_range"] = list(DESK_LESION_SIZE)
    base = preset(name).to_dict()
    base.update(overrides)
    config = PhantomConfig.from_dict(base)
    out = _out_dir(args, "phantom")
    manifest = RunManifest("phantom generate", sys.argv[1:], {"preset": name, "phantom": config.to_dict()},
                           {"phantom": config.seed}, {})
    ds = generate(config, jobs=args.jobs)
    manifest.outputs.append(str(write_dataset(ds, out)))
    manifest.write(out)
    print(f"wrote {len(ds)} patients to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit dki


def cmd_fit(args) -> int:
    ds = read_dataset(args.dataset)
    out = _out_dir(args, "fit")
    (out / "maps").mkdir(exist_ok=True)
    manifest = RunManifest("fit dki", sys.argv[1:], {}, {}, {"dataset": str(args.dataset)})
    patients = {}
    for p in ds.patients:
        pid = p.patient_id
        if p.roi.invisible:
            patients[pid] = None
            continue
        coeffs = fit_lesion(p.stack, p.roi, ds.bvalues)
        maps = parametric_maps(p.stack, p.roi, ds.bvalues, coeffs)
        rel = f"maps/{pid}.f32"
        (out / rel).write_bytes(np.ascontiguousarray(maps, dtype="<f4").tobytes())
        patients[pid] = dict(coeffs.to_dict(), maps=rel)
    doc = {"format": COEFF_FORMAT, "version": ARTIFACT_VERSION, "patients": patients}
    path = out / "coefficients.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    manifest.outputs += [str(path), str(out / "maps")]
    manifest.write(out)
    print(f"fitted {sum(v is not None for v in patients.values())} lesions into {out}")
    return 0


def load_fit(directory, ds) -> tuple:
    """Coefficients and maps written by ``fit dki`` for the patients of ``ds``."""
    root = Path(directory)
    path = root / "coefficients.json"
    doc = _read_json(path, "coefficients")
    _check_artifact(doc, COEFF_FORMAT, path)
    coeffs, maps = {}, {}
    for p in ds.patients:
        pid = p.patient_id
        if pid not in doc["patients"]:
            raise BadDataset(f"coefficients lack patient {pid}")
        e = doc["patients"][pid]
        if e is None:
            coeffs[pid] = maps[pid] = None
            continue
        nan = math.nan
        coeffs[pid] = LesionCoefficients(nan if e["mean_adc"] is None else e["mean_adc"],
                                         nan if e["mean_akc"] is None else e["mean_akc"],
                                         e["n_fitted"], e["n_excluded"])
        raw = np.fromfile(root / e["maps"], dtype="<f4")
        shape = (2,) + p.stack.shape
        if raw.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{e['maps']}: {raw.size} values for shape {shape}")
        maps[pid] = raw.reshape(shape)
    return coeffs, maps


def _fit_in_memory(ds) -> tuple:
    from .experiment import fit_all
    return fit_all(ds)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    profile, train_cfg, net_cfg = _train_configs(args, file_cfg)
    kinds = _kinds(args.model)
    ds = read_dataset(args.dataset)
    maps = None
    if any(k.uses_maps for k in kinds):
        maps = load_fit(args.fit, ds)[1] if args.fit else _fit_in_memory(ds)[1]
    folds = make_folds(ds.labels, train_cfg)
    out = _out_dir(args, "train")
    manifest = RunManifest("train", sys.argv[1:],
                           {"profile": profile, "train": train_cfg.to_dict(), "network": net_cfg.to_dict()},
                           {"train": train_cfg.seed}, {"dataset": str(args.dataset), "fit": args.fit})
    checkpoints, history = {}, {}
    jobs = []
    for kind in kinds:
        for fold in folds:
            jobs.append((kind, fold))

    def run(job):
        kind, fold = job
        return kind, fold, train_fold(kind, ds, fold, train_cfg, net_cfg, maps if kind.uses_maps else None)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(args.jobs) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for kind, fold, model in results:
        paths = []
        for m, net in enumerate(model.members):
            rel = f"checkpoints/{kind.value}/fold{fold.index:02d}_m{m:02d}"
            save_checkpoint(net, out / rel, {"kind": kind.value, "fold": fold.index, "member": m})
            paths.append(rel + ".json")
        checkpoints.setdefault(kind.value, {})[str(fold.index)] = paths
        history.setdefault(kind.value, {})[str(fold.index)] = model.history
        log.info("trained %s fold %d", kind.value, fold.index)
    doc = {"format": MODELS_FORMAT, "version": ARTIFACT_VERSION, "kinds": [k.value for k in kinds],
           "train": train_cfg.to_dict(), "network": net_cfg.to_dict(),
           "patient_ids": [p.patient_id for p in ds.patients],
           "folds": [f.to_dict() for f in folds], "checkpoints": checkpoints, "history": history}
    path = out / "models.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    manifest.outputs += [str(path), str(out / "checkpoints")]
    manifest.write(out)
    print(f"trained {', '.join(k.value for k in kinds)} on {len(folds)} folds into {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _network_scores(models_dir: Path, ds, maps) -> tuple:
    path = models_dir / "models.json"
    doc = _read_json(path, "models")
    _check_artifact(doc, MODELS_FORMAT, path)
    if doc["patient_ids"] != [p.patient_id for p in ds.patients]:
        raise BadDataset("models were trained on a different dataset")
    net_cfg = NetworkConfig.from_dict(doc["network"])
    folds = [Fold(f["index"], tuple(f["train"]), tuple(f["val"]), tuple(f["test"])) for f in doc["folds"]]
    scores = {}
    for name in doc["kinds"]:
        kind = ModelKind(name)
        if kind.uses_maps and maps is None:
            raise ConfigError("F2E evaluation needs parametric maps")
        preds = {}
        for fold in folds:
            members = [load_checkpoint(models_dir / rel)[0] for rel in doc["checkpoints"][name][str(fold.index)]]
            model = TrainedModel(kind, members, [])
            preds.update(fold_predictions(kind, model, ds, fold, net_cfg, maps if kind.uses_maps else None))
        scores[kind] = {pid: pr.p_malignant for pid, pr in preds.items()}
    return scores, doc


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.dataset)
    out = _out_dir(args, "evaluate")
    coeffs, maps = load_fit(args.fit, ds) if args.fit else _fit_in_memory(ds)
    kind_scores, config, doc = {}, {}, None
    if args.models:
        net_scores, doc = _network_scores(Path(args.models), ds, maps)
        kind_scores.update(net_scores)
        config = {"train": doc["train"], "network": doc["network"]}
    for kind in (ModelKind.ADC_SCALAR, ModelKind.AKC_SCALAR):
        kind_scores[kind] = {p.patient_id: scalar_baseline(kind, coeffs[p.patient_id]) for p in ds.patients}
    seed = args.seed if args.seed is not None else (doc["train"]["seed"] if doc else 0)
    labels = {p.patient_id: p.label.target for p in ds.patients}
    report = evaluate_scores(kind_scores, labels, args.floor, args.bootstrap, seed)
    if doc:
        report.folds = doc["folds"]
    report.config = dict(config, kinds=[k.value for k in TABLE_ORDER if k in kind_scores],
                         bootstrap_seed=seed)
    manifest = RunManifest("evaluate", sys.argv[1:], {"floor": args.floor, "bootstrap": args.bootstrap},
                           {"bootstrap": seed},
                           {"dataset": str(args.dataset), "models": args.models, "fit": args.fit})
    emit_report(report, out, manifest)
    manifest.write(out)
    for row in report.table():
        print(" | ".join(row.values()))
    return 0


def emit_report(report: EvalReport, out: Path, manifest: Optional[RunManifest] = None):
    files = {"report.json": report.to_json(), "report.csv": report.to_csv()}
    curves = {}
    for m in report.ordered():
        text = report.roc_csv(m.kind)
        files[f"roc_{m.kind.value}.csv"] = text
        curves[m.kind.value] = text
    files["roc.svg"] = roc_svg(curves)
    for name, text in files.items():
        (out / name).write_text(text)
        if manifest is not None:
            manifest.outputs.append(str(out / name))


# ---------------------------------------------------------------------------
# report


REPORT_COLUMNS = ("Method", "AUC", "Acc. at t_c", "Spec. (Sens.) at t_c", "t_c", "McNemar p vs E2E")


def combine_reports(paths) -> list:
    """Table-1 style rows in fixed method order; methods missing from every report read ``n/a``."""
    rows = {}
    for p in paths:
        path = Path(p)
        if path.is_dir():
            path = path / "report.json"
        doc = _read_json(path, "report")
        if doc.get("schema") != REPORT_SCHEMA:
            raise BadDataset(f"{path} is not an evaluation report")
        if doc.get("version") != REPORT_VERSION:
            raise FormatVersionError(f"{path}: report version {doc.get('version')!r}")
        mc = doc.get("mcnemar_vs_E2E", {})
        for row in doc["table"]:
            name = row["Method"]
            if name in rows:
                continue
            p_value = mc.get(name, {}).get("p_value")
            rows[name] = dict(row, **{"McNemar p vs E2E": "" if p_value is None else f"{p_value:.3g}"})
    table = []
    for kind in TABLE_ORDER:
        table.append(rows.get(kind.value, {c: (kind.value if c == "Method" else "n/a") for c in REPORT_COLUMNS}))
    return table


def format_table(rows: list) -> str:
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in REPORT_COLUMNS]
    line = "| " + " | ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    body = ["| " + " | ".join(r[c].ljust(w) for c, w in zip(REPORT_COLUMNS, widths)) + " |" for r in rows]
    return "\n".join([line, sep] + body) + "\n"


def cmd_report(args) -> int:
    rows = combine_reports(args.reports)
    out = _out_dir(args, "report")
    manifest = RunManifest("report", sys.argv[1:], {}, {}, {"reports": list(args.reports)})
    text = format_table(rows)
    (out / "table.md").write_text(text)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (out / "table.csv").write_text(buf.getvalue())
    manifest.outputs += [str(out / "table.md"), str(out / "table.csv")]
    manifest.write(out)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--config", help="JSON config file; flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qspace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic datasets")
    ph_sub = ph.add_subparsers(dest="action", required=True)
    gen = ph_sub.add_parser("generate", help="write a phantom dataset")
    _common(gen)
    gen.add_argument("--preset", choices=sorted(PRESETS))
    gen.add_argument("--n-per-class", type=int)
    gen.add_argument("--snr", type=float)
    gen.add_argument("--desk-lesions", action="store_true",
                     help=f"lesion sizes {DESK_LESION_SIZE} voxels for quick runs")
    gen.set_defaults(func=cmd_phantom)

    fit = sub.add_parser("fit", help="model fitting")
    fit_sub = fit.add_subparsers(dest="action", required=True)
    dki = fit_sub.add_parser("dki", help="fit the kurtosis model in every lesion")
    _common(dki)
    dki.add_argument("--dataset", required=True)
    dki.set_defaults(func=cmd_fit)

    tr = sub.add_parser("train", help="cross-validated network training")
    _common(tr)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--model", action="append", help="e2e, f2e, ddc or all (repeatable)")
    tr.add_argument("--fit", help="output of 'fit dki' (maps for F2E)")
    tr.add_argument("--profile", choices=sorted(PROFILES))
    tr.add_argument("--folds", type=int)
    tr.add_argument("--ensemble-size", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batches-per-epoch", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="pooled test metrics, ROC curves and McNemar tests")
    _common(ev)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--models", help="output of 'train'")
    ev.add_argument("--fit", help="output of 'fit dki'")
    ev.add_argument("--floor", type=float, default=SENSITIVITY_FLOOR)
    ev.add_argument("--bootstrap", type=int, default=1000)
    ev.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="combine evaluation reports into one table")
    _common(rp)
    rp.add_argument("reports", nargs="+", help="evaluate output directories or report.json files")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("ConfigError: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except QSpaceError as exc:
        print(f"{exc.code}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"IOError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
