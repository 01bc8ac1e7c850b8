"""The feature-matrix container passed between pipeline stages."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .records import DEFAULT_SCHEMA, TelemetryRecord, write_records_csv


class AnomalyClass(IntEnum):
    NORMAL = 0
    ZERO_RUNTIME_CONSUMPTION = 1
    EXCESS_RUNTIME = 2
    OVER_CONSUMPTION = 3


ANOMALY_CLASSES = tuple(int(c) for c in AnomalyClass)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Rows, labels and cluster ids of ``n`` visits over ``d`` features.

    ``split`` tags which side of a train/test split the rows came from;
    resamplers refuse anything tagged ``"test"``. ``synthetic`` marks rows
    created by oversampling, and ``records`` optionally keeps the source
    :class:`TelemetryRecord` of each row so the full export can be rebuilt.
    """

    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    clusters: np.ndarray
    split: str | None = None
    synthetic: np.ndarray | None = None
    records: tuple[TelemetryRecord, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(X), len(self.feature_names))
        y = np.asarray(self.y, dtype=np.int64)
        clusters = np.asarray(self.clusters, dtype=object)
        n, d = X.shape
        if len(y) != n or len(clusters) != n:
            raise ValueError("rows, labels and clusters must have the same length")
        if d != len(self.feature_names):
            raise ValueError(f"{d} columns but {len(self.feature_names)} feature names")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature matrix contains NaN or infinite cells")
        synthetic = self.synthetic
        synthetic = np.zeros(n, dtype=bool) if synthetic is None else np.asarray(synthetic, dtype=bool)
        if self.records is not None and len(self.records) != n:
            raise ValueError("records must align with rows")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "synthetic", synthetic)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, split: str | None = ...) -> "LabeledDataset":
        idx = np.asarray(idx)
        records = None
        if self.records is not None:
            pos = np.arange(len(self))[idx]
            records = tuple(self.records[i] for i in pos)
        return LabeledDataset(
            self.feature_names,
            self.X[idx],
            self.y[idx],
            self.clusters[idx],
            split=self.split if split is ... else split,
            synthetic=self.synthetic[idx],
            records=records,
        )

    def with_rows(self, X: np.ndarray) -> "LabeledDataset":
        return replace(self, X=X)

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.y, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def cluster_ids(self) -> list[str]:
        return sorted({str(c) for c in self.clusters})

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.feature_names).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(self.y.tobytes())
        h.update("\x1f".join(map(str, self.clusters)).encode())
        return h.hexdigest()


def export_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write ``ds`` as CSV with trailing ``label`` and ``cluster`` columns.

    When the dataset still carries its source records the full record schema is
    written, so the file can be re-parsed and relabelled; otherwise only the
    feature columns are emitted.
    """
    labels = [int(v) for v in ds.y]
    clusters = [str(c) for c in ds.clusters]
    if ds.records is not None:
        write_records_csv(ds.records, path, extra={"label": labels, "cluster": clusters})
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([DEFAULT_SCHEMA.get(f, f) for f in ds.feature_names] + ["label", "cluster"])
        for row, lab, cl in zip(ds.X, labels, clusters):
            w.writerow([repr(float(v)) for v in row] + [lab, cl])


def read_feature_csv(path: str | Path, feature_names) -> LabeledDataset:
    """Load a feature-only export written by :func:`export_dataset`."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    cols = [DEFAULT_SCHEMA.get(f, f) for f in feature_names]
    X = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64).reshape(len(rows), len(cols))
    y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    clusters = np.array([r["cluster"] for r in rows], dtype=object)
    return LabeledDataset(tuple(feature_names), X, y, clusters)
