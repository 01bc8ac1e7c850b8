"""Fairness across clusters (disparate impact), domain shift (MMD) and the
cross-cluster generalization matrix."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import metrics
from .ingest import LabeledDataset, SplitSpec, split_stratified
from .metrics import POSITIVE_SET

log = logging.getLogger(__name__)

FAIR_ZONE = (0.8, 1.25)
# closed fair zone; absorbs float noise in ratios such as 0.4 / 0.5
_EDGE_EPS = 1e-12


class AuditError(Exception):
    pass


class ZeroMajorityRate(AuditError):
    pass


class UnknownCluster(AuditError):
    pass


class DegenerateBandwidth(UserWarning):
    pass


FAIR = "Fair"
AGAINST = "BiasAgainstMinority"
TOWARD = "BiasTowardMinority"


def verdict(ratio: float, zone=FAIR_ZONE) -> str:
    lo, hi = zone
    if ratio < lo - _EDGE_EPS:
        return AGAINST
    if ratio > hi + _EDGE_EPS:
        return TOWARD
    return FAIR


@dataclass(frozen=True)
class DirReport:
    minority_cluster: str
    minority_rate: float
    majority_rate: float
    dir: float
    verdict: str
    fair_zone: tuple = FAIR_ZONE
    majority_clusters: tuple = ()

    def to_dict(self) -> dict:
        return {
            "minority_cluster": self.minority_cluster,
            "minority_rate": self.minority_rate,
            "majority_rate": self.majority_rate,
            "dir": self.dir,
            "verdict": self.verdict,
            "fair_zone": list(self.fair_zone),
            "majority_clusters": list(self.majority_clusters),
        }


def dir_from_rates(minority_rate: float, majority_rate: float, minority_cluster: str = "", others=()) -> DirReport:
    if majority_rate <= 0:
        raise ZeroMajorityRate(f"majority positive rate is {majority_rate}; DIR undefined")
    ratio = minority_rate / majority_rate
    return DirReport(str(minority_cluster), float(minority_rate), float(majority_rate), ratio, verdict(ratio), FAIR_ZONE, tuple(others))


def dir(predictions, clusters, minority, positive_set=POSITIVE_SET) -> DirReport:  # noqa: A001
    """Disparate impact ratio of predicted-positive shares.

    The minority share is compared with the plain (unweighted) mean of the
    shares of every other cluster.
    """
    pred = np.asarray(predictions)
    clusters = np.asarray(clusters, dtype=object)
    if len(pred) != len(clusters):
        raise metrics.LengthMismatch(f"{len(pred)} predictions vs {len(clusters)} cluster ids")
    names = sorted(set(clusters.tolist()))
    if minority not in names:
        raise UnknownCluster(f"cluster {minority!r} has no rows")
    others = [c for c in names if c != minority]
    if not others:
        raise AuditError("DIR needs at least one cluster besides the minority")
    positive = np.isin(pred, list(positive_set))
    rate = {c: float(positive[clusters == c].mean()) for c in names}
    majority = float(np.mean([rate[c] for c in others]))
    return dir_from_rates(rate[minority], majority, minority, others)


def dir_all_clusters(predictions, clusters, positive_set=POSITIVE_SET) -> tuple[list[DirReport], list[str]]:
    """DIR with each cluster in turn as the minority; undefined ones become diagnostics."""
    reports, diagnostics = [], []
    for c in sorted(set(np.asarray(clusters, dtype=object).tolist())):
        try:
            reports.append(dir(predictions, clusters, c, positive_set))
        except ZeroMajorityRate as exc:
            diagnostics.append(f"{c}: {exc}")
    return reports, diagnostics


# MMD -----------------------------------------------------------------------


@dataclass(frozen=True)
class MmdEstimate:
    mmd_squared: float
    bandwidth: float
    sample_sizes: tuple
    kernel: str = "RBF"
    estimator: str = "unbiased_u_statistic"

    @property
    def mmd(self) -> float:
        return math.sqrt(max(self.mmd_squared, 0.0))

    def to_dict(self) -> dict:
        return {
            "mmd_squared": self.mmd_squared,
            "mmd": self.mmd,
            "kernel": self.kernel,
            "bandwidth": self.bandwidth,
            "estimator": self.estimator,
            "sample_sizes": list(self.sample_sizes),
        }


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median Euclidean distance over the within-sample pairs of both samples."""
    d = np.concatenate([pdist(x), pdist(y)])
    med = float(np.median(d))
    if not med > 0:
        warnings.warn("median pairwise distance is 0; using bandwidth 1", DegenerateBandwidth, stacklevel=3)
        return 1.0
    return med


def mmd_rbf(x, y, bandwidth="auto") -> MmdEstimate:
    """Unbiased estimate of squared MMD under k(a, b) = exp(-|a - b|^2 / (2 s^2)).

    Within-sample sums leave out the diagonal. The estimate can be slightly
    negative when the samples share a distribution.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise AuditError("MMD needs at least two rows per sample")
    if x.shape[1] != y.shape[1]:
        raise AuditError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if isinstance(bandwidth, str):
        if bandwidth.lower() not in ("auto", "median"):
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        s = median_bandwidth(x, y)
    else:
        s = float(bandwidth)
        if not s > 0:
            raise ValueError("bandwidth must be positive")
    g = 1.0 / (2.0 * s * s)
    sizes = (m, n)
    # evaluate in a canonical argument order so mmd(x, y) == mmd(y, x) bit for bit
    if (m, x.tobytes()) > (n, y.tobytes()):
        x, y = y, x

    def within(a):
        k = np.exp(-g * pdist(a, "sqeuclidean"))
        # pdist lists each unordered pair once
        return 2.0 * k.sum() / (len(a) * (len(a) - 1))

    cross = np.exp(-g * cdist(x, y, "sqeuclidean")).mean()
    return MmdEstimate(float(within(x) + within(y) - 2.0 * cross), s, sizes)


# generalization matrix -----------------------------------------------------


@dataclass
class MatrixCell:
    train_cluster: str
    test_cluster: str
    accuracy: float | None = None
    f1_macro: float | None = None
    mmd: float | None = None
    mmd_squared: float | None = None
    n_test: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GeneralizationMatrix:
    clusters: list
    cells: dict  # (train, test) -> MatrixCell
    model_kind: str = ""

    def cell(self, train: str, test: str) -> MatrixCell:
        return self.cells[(train, test)]

    def table(self, metric: str) -> np.ndarray:
        k = len(self.clusters)
        T = np.full((k, k), np.nan)
        for i, a in enumerate(self.clusters):
            for j, b in enumerate(self.clusters):
                v = getattr(self.cells[(a, b)], metric)
                if v is not None:
                    T[i, j] = v
        return T

    def to_dict(self) -> dict:
        return {
            "model": self.model_kind,
            "clusters": list(self.clusters),
            "cells": [self.cells[(a, b)].to_dict() for a in self.clusters for b in self.clusters],
        }

    def to_csv(self, metric: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_cluster \\ test_cluster", *self.clusters])
        for a in self.clusters:
            row = [getattr(self.cells[(a, b)], metric) for b in self.clusters]
            w.writerow([a, *("" if v is None else repr(float(v)) for v in row)])
        return buf.getvalue()


def _subsample(Z: np.ndarray, k: int | None, rng) -> np.ndarray:
    if k is None or len(Z) <= k:
        return Z
    return Z[np.sort(rng.choice(len(Z), size=k, replace=False))]


def cross_cluster_matrix(
    ds: LabeledDataset,
    spec,
    resample_cfg=None,
    seed: int = 0,
    *,
    test_fraction: float = 0.25,
    mmd_max_rows: int | None = 500,
) -> GeneralizationMatrix:
    """Train on each cluster, score on every cluster.

    The train cluster is split into train/test itself; its diagonal cell is
    scored on that held-out part, off-diagonal cells on all rows of the other
    cluster. MMD compares the standardized training rows with the test rows,
    using the model's own standardizer, on at most ``mmd_max_rows`` rows per
    side.
    """
    from .models import fit_pipeline

    names = ds.cluster_ids()
    if len(names) < 2:
        raise AuditError("the generalization matrix needs at least two clusters")
    by_cluster = {c: ds.subset(np.flatnonzero(ds.clusters == c)) for c in names}
    cells = {}
    for a in names:
        rng = np.random.default_rng([seed, names.index(a)])
        try:
            if len(np.unique(by_cluster[a].y)) < 2:
                raise AuditError(f"cluster {a} holds a single class")
            train, held_out = split_stratified(by_cluster[a], SplitSpec(test_fraction, seed))
            model = fit_pipeline(train, spec, resample_cfg)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.warning("training on cluster %s failed: %s", a, exc)
            for b in names:
                cells[(a, b)] = MatrixCell(a, b, error=f"{type(exc).__name__}: {exc}")
            continue
        Ztrain = _subsample(model.prepare(train.X), mmd_max_rows, rng)
        for b in names:
            test = held_out if a == b else by_cluster[b]
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", metrics.UndefinedMetricWarning)
                    ms = metrics.evaluate_model(model, test)
                est = mmd_rbf(Ztrain, _subsample(model.prepare(test.X), mmd_max_rows, rng))
                cells[(a, b)] = MatrixCell(a, b, ms.accuracy, ms.f1_macro, est.mmd, est.mmd_squared, len(test))
            except Exception as exc:  # noqa: BLE001
                cells[(a, b)] = MatrixCell(a, b, n_test=len(test), error=f"{type(exc).__name__}: {exc}")
    return GeneralizationMatrix(names, cells, getattr(spec, "kind", ""))


@dataclass
class AuditReport:
    dir_reports: list
    generalization: GeneralizationMatrix | None = None
    diagnostics: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        g = self.generalization
        return {
            "dir_reports": [r.to_dict() for r in self.dir_reports],
            "thresholds": {"fair_zone": list(FAIR_ZONE)},
            "generalization_matrix": None if g is None else g.to_dict(),
            "mmd_matrix": None if g is None else {
                "clusters": g.clusters,
                "mmd": [[None if math.isnan(v) else v for v in row] for row in g.table("mmd").tolist()],
            },
            "diagnostics": list(self.diagnostics),
            "seeds": dict(self.seeds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def audit_predictions(model, ds: LabeledDataset, positive_set=POSITIVE_SET) -> AuditReport:
    """DIR for every cluster as minority, from ``model``'s predictions on ``ds``."""
    reports, diagnostics = dir_all_clusters(model.predict_class(ds.X), ds.clusters, positive_set)
    return AuditReport(reports, diagnostics=diagnostics)
