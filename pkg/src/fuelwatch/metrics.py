"""Evaluation metrics, cross-validation and latency measurement.

Binary quantities use the anomaly-vs-normal view: a row counts as an anomaly
when its class is in ``positive_set`` (classes 1-3 by default). TA/TN/FA/FN
are true anomaly, true normal, false anomaly and false normal counts.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

POSITIVE_SET = frozenset({1, 2, 3})


class MetricError(Exception):
    pass


class LengthMismatch(MetricError):
    pass


class SingleClassLabels(MetricError):
    pass


class FoldError(MetricError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {type(cause).__name__}: {cause}")
        self.fold = fold
        self.cause = cause


class UndefinedMetricWarning(UserWarning):
    pass


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} is 0/0; reported as 0", UndefinedMetricWarning, stacklevel=3)
        return 0.0
    return num / den


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    classes: np.ndarray
    matrix: np.ndarray  # rows: true class, columns: predicted class
    ta: int
    tn: int
    fa: int
    fn: int
    positive_set: frozenset = POSITIVE_SET

    @property
    def n(self) -> int:
        return int(self.matrix.sum())

    def to_dict(self) -> dict:
        return {
            "classes": self.classes.tolist(),
            "matrix": self.matrix.tolist(),
            "TA": self.ta,
            "TN": self.tn,
            "FA": self.fa,
            "FN": self.fn,
        }


def confusion(labels, predictions, positive_set=POSITIVE_SET, classes=None) -> ConfusionCounts:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise LengthMismatch(f"{len(labels)} labels vs {len(predictions)} predictions")
    found = np.union1d(labels, predictions)
    classes = found if classes is None else np.union1d(np.asarray(classes, dtype=np.int64), found)
    C = len(classes)
    M = np.zeros((C, C), dtype=np.int64)
    np.add.at(M, (np.searchsorted(classes, labels), np.searchsorted(classes, predictions)), 1)
    true_pos = np.isin(labels, list(positive_set))
    pred_pos = np.isin(predictions, list(positive_set))
    return ConfusionCounts(
        classes,
        M,
        ta=int(np.sum(true_pos & pred_pos)),
        tn=int(np.sum(~true_pos & ~pred_pos)),
        fa=int(np.sum(~true_pos & pred_pos)),
        fn=int(np.sum(true_pos & ~pred_pos)),
        positive_set=frozenset(positive_set),
    )


def precision_recall_f1(cc: ConfusionCounts, averaging: str = "macro") -> dict:
    """One-vs-rest precision, recall and F1 from the full confusion matrix.

    ``averaging`` is ``"macro"`` (plain mean over classes), ``"weighted"``
    (by true support) or ``"per_class"`` (dict keyed by class).
    """
    M = cc.matrix
    tp = np.diag(M).astype(float)
    pred_tot = M.sum(axis=0).astype(float)
    support = M.sum(axis=1).astype(float)
    prec = np.array([_ratio(t, p, f"precision of class {c}") for t, p, c in zip(tp, pred_tot, cc.classes)])
    rec = np.array([_ratio(t, s, f"recall of class {c}") for t, s, c in zip(tp, support, cc.classes)])
    f1 = np.array([0.0 if p + r == 0 else 2 * p * r / (p + r) for p, r in zip(prec, rec)])
    if averaging == "per_class":
        keys = [int(c) for c in cc.classes]
        return {
            "precision": dict(zip(keys, prec.tolist())),
            "recall": dict(zip(keys, rec.tolist())),
            "f1": dict(zip(keys, f1.tolist())),
            "support": dict(zip(keys, support.astype(int).tolist())),
        }
    if averaging == "macro":
        w = np.full(len(tp), 1.0 / len(tp))
    elif averaging == "weighted":
        w = support / support.sum()
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    return {"precision": float(prec @ w), "recall": float(rec @ w), "f1": float(f1 @ w)}


def binary_scores(cc: ConfusionCounts) -> dict:
    """Anomaly-vs-normal accuracy, precision, recall, F1 and false anomaly rate."""
    ta, tn, fa, fn = cc.ta, cc.tn, cc.fa, cc.fn
    precision = _ratio(ta, ta + fa, "anomaly precision")
    recall = _ratio(ta, ta + fn, "anomaly recall")
    return {
        "accuracy": (ta + tn) / (ta + tn + fa + fn),
        "precision": precision,
        "recall": recall,
        "f1": 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall),
        "far": _ratio(fa, fa + tn, "false anomaly rate"),
    }


def auc_roc(labels, probas, classes=None) -> float:
    """Macro one-vs-rest ROC AUC via the Mann-Whitney rank statistic.

    ``probas`` columns follow ``classes`` (default: sorted labels). Tied
    scores share their average rank. Classes present in ``labels`` but absent
    from ``classes`` score 0 for every row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probas = np.asarray(probas, dtype=np.float64)
    present = np.unique(labels)
    if len(present) < 2:
        raise SingleClassLabels("AUC is undefined when labels hold a single class")
    classes = present if classes is None else np.asarray(classes, dtype=np.int64)
    aucs = []
    for c in present:
        hits = np.flatnonzero(classes == c)
        scores = probas[:, hits[0]] if len(hits) else np.zeros(len(labels))
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        ranks = rankdata(scores)
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return float(np.mean(aucs))


@dataclass
class MetricSet:
    accuracy: float
    precision: dict
    recall: dict
    f1: dict
    auc_roc_ovr_macro: float | None
    far: float
    binary: dict
    confusion: ConfusionCounts
    latency_per_row: float | None = None
    diagnostics: list = field(default_factory=list)

    @property
    def f1_macro(self) -> float:
        return self.f1["macro"]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc_roc_ovr_macro": self.auc_roc_ovr_macro,
            "far": self.far,
            "binary": self.binary,
            "confusion": self.confusion.to_dict(),
            "latency_per_row": self.latency_per_row,
            "diagnostics": self.diagnostics,
        }


def evaluate(labels, predictions, probas=None, classes=None, positive_set=POSITIVE_SET) -> MetricSet:
    """All report metrics for one set of predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    cc = confusion(labels, predictions, positive_set)
    parts = {a: precision_recall_f1(cc, a) for a in ("macro", "weighted", "per_class")}
    diagnostics = []
    auc = None
    if probas is not None:
        try:
            auc = auc_roc(labels, probas, classes)
        except SingleClassLabels as exc:
            diagnostics.append(str(exc))
    binary = binary_scores(cc)

    def pick(metric):
        return {
            "macro": parts["macro"][metric],
            "weighted": parts["weighted"][metric],
            "per_class": {str(k): v for k, v in parts["per_class"][metric].items()},
        }

    return MetricSet(
        accuracy=float(np.trace(cc.matrix) / cc.n),
        precision=pick("precision"),
        recall=pick("recall"),
        f1=pick("f1"),
        auc_roc_ovr_macro=auc,
        far=binary["far"],
        binary=binary,
        confusion=cc,
        diagnostics=diagnostics,
    )


def evaluate_model(model, ds) -> MetricSet:
    P = model.predict_proba(ds.X)
    return evaluate(ds.y, model.predict_class(ds.X), P, model.classes)


CV_METRICS = ("accuracy", "f1_macro", "precision_macro", "recall_macro", "far", "auc_roc")


def cross_validate(ds, spec, folds: int = 5, resample_cfg=None, seed: int = 0) -> dict:
    """Stratified k-fold scores of the full fit pipeline.

    Standardization and resampling are refitted on the training folds of each
    split. Returns ``{metric: {"mean", "std", "values"}}``; AUC folds that are
    undefined are left out of its mean.
    """
    from .ingest import stratified_folds
    from .models import fit_pipeline

    fold_of = stratified_folds(ds.y, folds, seed)
    values = {m: [] for m in CV_METRICS}
    for k in range(folds):
        tr = ds.subset(np.flatnonzero(fold_of != k), split="train")
        te = ds.subset(np.flatnonzero(fold_of == k), split="test")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedMetricWarning)
                model = fit_pipeline(tr, spec, resample_cfg)
                ms = evaluate_model(model, te)
        except Exception as exc:
            raise FoldError(k, exc) from exc
        values["accuracy"].append(ms.accuracy)
        values["f1_macro"].append(ms.f1["macro"])
        values["precision_macro"].append(ms.precision["macro"])
        values["recall_macro"].append(ms.recall["macro"])
        values["far"].append(ms.far)
        values["auc_roc"].append(math.nan if ms.auc_roc_ovr_macro is None else ms.auc_roc_ovr_macro)
    out = {}
    for m, v in values.items():
        arr = np.asarray(v, dtype=float)
        ok = arr[~np.isnan(arr)]
        out[m] = {
            "mean": float(ok.mean()) if len(ok) else math.nan,
            "std": float(ok.std()) if len(ok) else math.nan,
            "values": arr.tolist(),
        }
    return out


@dataclass
class LatencyReport:
    median: float
    p90: float
    per_repeat_medians: list
    n_rows: int
    repeats: int

    @property
    def dispersion(self) -> float:
        return max(self.per_repeat_medians) / min(self.per_repeat_medians)

    def to_dict(self) -> dict:
        return {
            "latency_per_row_median_s": self.median,
            "latency_per_row_p90_s": self.p90,
            "per_repeat_medians_s": self.per_repeat_medians,
            "max_over_min_repeat_median": self.dispersion,
            "n_rows": self.n_rows,
            "repeats": self.repeats,
        }


def latency_benchmark(model, rows, repeats: int = 5) -> LatencyReport:
    """Median wall-clock time to score one row at a time.

    A full warm-up pass runs first. Each repeat scores every row singly; the
    report gives the median over all timings and each repeat's own median.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    for r in rows:
        model.predict_proba(r[None, :])
    timings, medians = [], []
    clock = time.perf_counter
    for _ in range(repeats):
        t_rep = []
        for r in rows:
            one = r[None, :]
            t0 = clock()
            model.predict_proba(one)
            t_rep.append(clock() - t0)
        medians.append(float(np.median(t_rep)))
        timings.extend(t_rep)
    return LatencyReport(
        float(np.median(timings)), float(np.percentile(timings, 90)), medians, len(rows), repeats
    )
