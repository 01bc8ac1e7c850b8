"""Rule-based anomaly labels.

Rules are checked top to bottom and the first match wins:

1. fuel consumed while the generator never ran -> class 1
2. more than 24 running hours per day          -> class 2
3. daily consumption above the generator's max -> class 3
4. otherwise                                   -> class 0 (normal)
"""
from __future__ import annotations

import logging
from collections import defaultdict
from typing import Iterable

import numpy as np

from .dataset import AnomalyClass, LabeledDataset
from .records import FEATURES, IngestError, TelemetryRecord

log = logging.getLogger(__name__)

HOURS_PER_DAY = 24.0
FALLBACK_QUANTILE = 0.95


class MissingThreshold(IngestError):
    def __init__(self, record: TelemetryRecord):
        super().__init__(
            f"no maximum_consumption_per_day for site {record.site_name!r} "
            f"on {record.effective_date_of_visit}"
        )
        self.record = record


def label_record(record: TelemetryRecord) -> AnomalyClass:
    per_day = record.consumption_per_day_within_period
    if per_day > 0 and record.running_time == 0:
        return AnomalyClass.ZERO_RUNTIME_CONSUMPTION
    if record.running_time_per_day > HOURS_PER_DAY:
        return AnomalyClass.EXCESS_RUNTIME
    if record.maximum_consumption_per_day is None:
        raise MissingThreshold(record)
    if per_day > record.maximum_consumption_per_day:
        return AnomalyClass.OVER_CONSUMPTION
    return AnomalyClass.NORMAL


def fill_cluster_thresholds(records: list[TelemetryRecord]) -> list[TelemetryRecord]:
    """Give records without a daily maximum their cluster's 95th percentile.

    The percentile is taken over the daily consumption of every record in the
    cluster. Filled records carry the ``threshold_fallback`` flag.
    """
    per_cluster = defaultdict(list)
    for r in records:
        per_cluster[r.cluster].append(r.consumption_per_day_within_period)
    limits = {c: float(np.quantile(v, FALLBACK_QUANTILE)) for c, v in per_cluster.items()}
    out = []
    for r in records:
        if r.maximum_consumption_per_day is None:
            r = r.replace(
                maximum_consumption_per_day=limits[r.cluster],
                flags=r.flags | {"threshold_fallback"},
            )
        out.append(r)
    return out


def label_dataset(
    records: Iterable[TelemetryRecord],
    *,
    threshold_fallback: bool = True,
    diagnostics: list | None = None,
) -> LabeledDataset:
    """Label engineered records and assemble the model feature matrix.

    With ``threshold_fallback`` disabled, records lacking a daily maximum are
    excluded and their :class:`MissingThreshold` errors appended to
    ``diagnostics`` (when given).
    """
    records = list(records)
    if threshold_fallback:
        records = fill_cluster_thresholds(records)
    kept, labels = [], []
    for r in records:
        try:
            labels.append(int(label_record(r)))
        except MissingThreshold as exc:
            log.warning("%s", exc)
            if diagnostics is not None:
                diagnostics.append(exc)
            continue
        kept.append(r)
    X = np.array([[getattr(r, f) for f in FEATURES] for r in kept], dtype=np.float64)
    return LabeledDataset(
        FEATURES,
        X.reshape(len(kept), len(FEATURES)),
        np.array(labels, dtype=np.int64),
        np.array([r.cluster for r in kept], dtype=object),
        records=tuple(kept),
    )
