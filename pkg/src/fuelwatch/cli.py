"""Command-line entry point: ``fuelwatch <command> [options]``.

Every command reads one YAML pipeline config (``--config``), lets flags
override it, and writes pretty key-sorted JSON reports (plus CSV sidecars) to
``--out``. Report timestamps live only in ``metadata.generated_at``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__, metrics
from .audit import FAIR_ZONE, AuditReport, cross_cluster_matrix, dir, dir_all_clusters
from .explain import background_sample, explain, explanations_json, shap_summary
from .ingest import (
    DEFAULT_SCHEMA,
    FEATURES,
    FleetConfig,
    IngestError,
    LabeledDataset,
    SplitSpec,
    build_dataset,
    export_dataset,
    generate_synthetic_fleet,
    parse_csv,
    read_feature_csv,
    split_stratified,
    write_records_csv,
)
from .ingest.records import REQUIRED_FIELDS
from .models import ModelError, ModelSpec, ModelVersionMismatch, fit_pipeline, grid_search, load_model
from .resample import ResampleConfig

log = logging.getLogger("fuelwatch")


class ConfigInvalid(Exception):
    pass


class FileIO(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "data": {"input": None, "synth": FleetConfig().to_dict()},
    "split": {"test_fraction": 0.25, "stratify_by": "label"},
    "resample": {"method": "smote_tomek", "smote_k": 5, "enn_k": 3},
    "model": {"kind": "GBDT", "hyperparams": {}, "grid": None, "folds": 5},
    "explain": {"background_size": 100, "rows": 20, "top_k": 1, "n_permutations": 100},
    "audit": {"minority_clusters": None, "positive_set": [1, 2, 3], "mmd_max_rows": 500},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and k != "hyperparams" and k != "synth":
            if not isinstance(v, dict):
                raise ConfigInvalid(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    """Resolved pipeline settings. One ``seed`` drives every random stage."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        doc = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise FileIO(f"cannot read config {path}: {exc}") from None
            try:
                doc = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise ConfigInvalid(f"config {path} is not valid YAML: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigInvalid("config root must be a mapping")
        raw = _merge(DEFAULT_CONFIG, doc)
        for k, v in (overrides or {}).items():
            if v is not None:
                raw[k] = v
        cfg = cls(raw)
        cfg.validate()
        # canonical form, so equivalent configs hash alike (YAML int keys vs str keys)
        synth = raw["data"]["synth"]
        synth["anomaly_rates"] = cfg.fleet().to_dict()["anomaly_rates"]
        return cfg

    def validate(self) -> None:
        try:
            self.fleet()
            self.split()
            self.resample()
            self.model_spec()
        except (ValueError, TypeError, IngestError, ModelError) as exc:
            raise ConfigInvalid(str(exc)) from None
        if not isinstance(self.seed, int):
            raise ConfigInvalid("seed must be an integer")

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def fleet(self) -> FleetConfig:
        return FleetConfig.from_dict({**self.raw["data"]["synth"], "seed": self.seed})

    def split(self) -> SplitSpec:
        return SplitSpec(seed=self.seed, **self.raw["split"])

    def resample(self) -> ResampleConfig | None:
        r = self.raw["resample"]
        if r is None or r.get("method") == "none":
            return None
        return ResampleConfig(seed=self.seed, **r)

    def model_spec(self) -> ModelSpec:
        m = self.raw["model"]
        hp = dict(m.get("hyperparams") or {})
        if m["kind"] in ("RF", "GBDT"):
            hp.setdefault("seed", self.seed)
        return ModelSpec(m["kind"], hp)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def config_hash(self) -> str:
        # the output directory does not change results, so it stays out of the hash
        doc = {k: v for k, v in self.raw.items() if k != "out"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# files ---------------------------------------------------------------------


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def report(cfg: PipelineConfig, command: str, body: dict, dataset_hash: str | None = None) -> dict:
    return {
        "metadata": {
            "command": command,
            "tool_version": __version__,
            "config_hash": cfg.config_hash(),
            "dataset_hash": dataset_hash,
            "seed": cfg.seed,
            "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
        **body,
    }


def load_dataset(path) -> tuple[LabeledDataset, dict]:
    """A labeled dataset from a fleet export or a feature-only export.

    Fleet exports (raw record columns) are cleaned, engineered and labelled by
    the rules; feature-only files must carry ``label`` and ``cluster``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileIO(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        header = next(csv.reader(fh), [])
    if all(DEFAULT_SCHEMA[a] in header for a in REQUIRED_FIELDS):
        records, bad = parse_csv(path)
        ds, clog = build_dataset(records)
        return ds, {"unparsable_cells": [b.to_dict() for b in bad], "cleaning": clog.entries}
    return read_feature_csv(path, FEATURES), {}


def dataset_from_config(cfg: PipelineConfig, data_arg=None) -> tuple[LabeledDataset, dict]:
    src = data_arg or cfg.raw["data"]["input"]
    if src:
        return load_dataset(src)
    ds, clog = build_dataset(generate_synthetic_fleet(cfg.fleet()))
    return ds, {"cleaning": clog.entries, "synth": cfg.fleet().to_dict()}


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise FileIO(f"no such model file: {p}")
    return load_model(p)


def _write_matrix_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# commands ------------------------------------------------------------------


def cmd_synth(cfg, args, out: Path) -> dict:
    fleet = cfg.fleet()
    records = generate_synthetic_fleet(fleet)
    path = out / "fleet.csv"
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, path)
    body = {"fleet": fleet.to_dict(), "n_records": len(records), "path": str(path)}
    write_json(out / "synth.json", report(cfg, "synth", body))
    return body


def cmd_label(cfg, args, out: Path) -> dict:
    src = Path(args.input)
    if not src.is_file():
        raise FileIO(f"no such data file: {src}")
    records, bad = parse_csv(src)
    ds, clog = build_dataset(records)
    dst = Path(args.output) if args.output else out / "labeled.csv"
    dst.parent.mkdir(parents=True, exist_ok=True)
    export_dataset(ds, dst)
    clog.write(dst.with_suffix(".cleaning.jsonl"))
    body = {
        "input": str(src),
        "output": str(dst),
        "n_rows": len(ds),
        "class_counts": {str(k): v for k, v in ds.class_counts().items()},
        "dropped": len(clog.entries),
        "unparsable_cells": [b.to_dict() for b in bad],
    }
    write_json(dst.with_suffix(".report.json"), report(cfg, "label", body, ds.content_hash()))
    return {**body, "unparsable_cells": len(bad)}


def cmd_train(cfg, args, out: Path) -> dict:
    ds, info = dataset_from_config(cfg, args.data)
    train, test = split_stratified(ds, cfg.split())
    rcfg = cfg.resample()
    spec = cfg.model_spec()
    search = None
    grid = cfg.raw["model"].get("grid")
    if grid:
        search = grid_search(train, spec.kind, grid, cfg.raw["model"]["folds"], cfg.seed, resample_cfg=rcfg, base=spec.hyperparams)
        spec = search.best_spec
    model = fit_pipeline(train, spec, rcfg)
    bg = background_sample(train, cfg.raw["explain"]["background_size"], cfg.seed)
    model.meta["background"] = bg.X.tolist()
    model.meta["background_hash"] = bg.content_hash()
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    export_dataset(test, out / "test.csv")
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.UndefinedMetricWarning)
        ms = metrics.evaluate_model(model, test)
    body = {
        "model": {"spec": spec.to_dict(), "model_hash": model.model_hash(), "path": str(out / "model.json")},
        "data": {"n_train": len(train), "n_test": len(test), "train_hash": train.content_hash(), "test_hash": test.content_hash()},
        "test_metrics": ms.to_dict(),
        "grid_search": None if search is None else search.to_dict(),
        "resolved_config": cfg.to_dict(),
    }
    write_json(out / "metrics.json", report(cfg, "train", body, ds.content_hash()))
    return {"model_hash": body["model"]["model_hash"], "f1_macro": ms.f1_macro, "out": str(out)}


def cmd_evaluate(cfg, args, out: Path) -> dict:
    model = _load_model(args.model)
    ds, _ = load_dataset(args.data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", metrics.UndefinedMetricWarning)
        ms = metrics.evaluate_model(model, ds)
    body = {"model_hash": model.model_hash(), "n_rows": len(ds), "metrics": ms.to_dict()}
    write_json(out / "evaluation.json", report(cfg, "evaluate", body, ds.content_hash()))
    return {"f1_macro": ms.f1_macro, "accuracy": ms.accuracy}


def cmd_explain(cfg, args, out: Path) -> dict:
    model = _load_model(args.model)
    ds, _ = load_dataset(args.data)
    ecfg = cfg.raw["explain"]
    n = args.rows if args.rows is not None else ecfg["rows"]
    bg = model.meta.get("background")
    background = np.asarray(bg) if bg is not None else background_sample(ds, ecfg["background_size"], cfg.seed).X
    rows = np.arange(min(n, len(ds)))
    pred = model.predict_class(ds.X[rows])
    h = model.model_hash()
    exps = []
    for i, p in zip(rows, pred):
        c = int(np.flatnonzero(model.classes == p)[0])
        e = explain(model, ds.X[i], c, background, ecfg["n_permutations"], cfg.seed)
        e.row_id = int(i)
        e.model_hash = h
        e.group = (model.kind, str(ds.clusters[i]))
        exps.append(e)
    summary = shap_summary(exps, top_k=ecfg["top_k"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "explanations.json").write_text(explanations_json(exps) + "\n", encoding="utf-8")
    (out / "shap_summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    body = {"model_hash": h, "n_explained": len(exps), "summary": summary.to_dict()}
    write_json(out / "shap_summary.json", report(cfg, "explain", body, ds.content_hash()))
    return {"n_explained": len(exps), "top_feature": summary.ranking()[0]}


def cmd_audit(cfg, args, out: Path) -> dict:
    acfg = cfg.raw["audit"]
    positive = frozenset(acfg["positive_set"])
    if args.model:
        model = _load_model(args.model)
        ds, _ = load_dataset(args.data) if args.data else dataset_from_config(cfg)
    else:
        ds, _ = dataset_from_config(cfg, args.data)
        train, _ = split_stratified(ds, cfg.split())
        model = fit_pipeline(train, cfg.model_spec(), cfg.resample())
    pred = model.predict_class(ds.X)
    minority = acfg["minority_clusters"]
    if minority:
        reports, diagnostics = [], []
        for c in minority:
            try:
                reports.append(dir(pred, ds.clusters, c, positive))
            except Exception as exc:  # noqa: BLE001 - undefined DIR becomes a diagnostic
                diagnostics.append(f"{c}: {exc}")
    else:
        reports, diagnostics = dir_all_clusters(pred, ds.clusters, positive)
    rep = AuditReport(reports, diagnostics=diagnostics, seeds={"seed": cfg.seed})
    body = {"model_hash": model.model_hash(), **rep.to_dict()}
    write_json(out / "audit.json", report(cfg, "audit", body, ds.content_hash()))
    _write_matrix_csv(
        out / "dir.csv",
        ["minority_cluster", "minority_rate", "majority_rate", "dir", "verdict"],
        [[r.minority_cluster, repr(r.minority_rate), repr(r.majority_rate), repr(r.dir), r.verdict] for r in reports],
    )
    return {"fair": sum(r.verdict == "Fair" for r in reports), "clusters": len(reports), "fair_zone": list(FAIR_ZONE)}


def cmd_crosscluster(cfg, args, out: Path) -> dict:
    ds, _ = dataset_from_config(cfg, args.data)
    g = cross_cluster_matrix(
        ds,
        cfg.model_spec(),
        cfg.resample(),
        cfg.seed,
        test_fraction=cfg.raw["split"]["test_fraction"],
        mmd_max_rows=cfg.raw["audit"]["mmd_max_rows"],
    )
    rep = AuditReport([], g, seeds={"seed": cfg.seed})
    body = rep.to_dict()
    del body["dir_reports"]
    write_json(out / "crosscluster.json", report(cfg, "crosscluster", body, ds.content_hash()))
    for metric in ("f1_macro", "accuracy", "mmd"):
        (out / f"crosscluster_{metric}.csv").write_text(g.to_csv(metric), encoding="utf-8")
    F = g.table("f1_macro")
    return {"clusters": len(g.clusters), "mean_diagonal_f1": float(np.nanmean(np.diag(F)))}


def cmd_bench(cfg, args, out: Path) -> dict:
    model = _load_model(args.model)
    ds, _ = load_dataset(args.data)
    rows = ds.X[: args.rows]
    rep = metrics.latency_benchmark(model, rows, args.repeats)
    body = {"model_hash": model.model_hash(), "model_kind": model.kind, "latency": rep.to_dict()}
    write_json(out / "bench.json", report(cfg, "bench", body, ds.content_hash()))
    return {"median_s": rep.median}


def cmd_serve(cfg, args, out: Path) -> dict:
    from .serve import serve

    if not Path(args.model).is_file():
        raise FileIO(f"no such model file: {args.model}")
    serve(args.model, args.bind, explain_default=args.explain_default)
    return {}


COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "audit": cmd_audit,
    "crosscluster": cmd_crosscluster,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML pipeline config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fuelwatch", description="Generator fuel anomaly pipeline", parents=[common])
    parser.add_argument("--version", action="version", version=f"fuelwatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic fleet CSV")

    p = sub.add_parser("label", parents=[common], help="clean, engineer and label a fleet export")
    p.add_argument("input")
    p.add_argument("output", nargs="?")

    p = sub.add_parser("train", parents=[common], help="split, resample, train and score")
    p.add_argument("--data", help="fleet CSV; default from config (synthetic when unset)")

    p = sub.add_parser("evaluate", parents=[common], help="score a saved model on a labeled CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("explain", parents=[common], help="Shapley explanations and summary")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", type=int, help="explain the first N rows")

    p = sub.add_parser("audit", parents=[common], help="disparate impact per cluster")
    p.add_argument("--model")
    p.add_argument("--data")

    p = sub.add_parser("crosscluster", parents=[common], help="train-on-one, test-on-all matrix")
    p.add_argument("--data")

    p = sub.add_parser("bench", parents=[common], help="single-row latency")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("serve", parents=[common], help="HTTP scoring service")
    p.add_argument("--model", required=True)
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--explain-default", action="store_true")
    return parser


EXIT_CODES = {ConfigInvalid: 2, FileIO: 3, ModelVersionMismatch: 4}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if quiet:
        warnings.simplefilter("ignore")
    try:
        cfg = PipelineConfig.load(getattr(args, "config", None), {"seed": getattr(args, "seed", None), "out": getattr(args, "out", None)})
        result = COMMANDS[args.command](cfg, args, Path(cfg.raw["out"]))
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error document
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "detail": str(exc), "command": args.command}) + "\n")
        return code
    if not quiet and result:
        print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
