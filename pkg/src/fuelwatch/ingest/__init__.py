"""Telemetry ingestion: parse, clean, engineer, label, split, standardize."""
from __future__ import annotations

from typing import Iterable

from .dataset import ANOMALY_CLASSES, AnomalyClass, LabeledDataset, export_dataset, read_feature_csv
from .labeling import MissingThreshold, fill_cluster_thresholds, label_dataset, label_record
from .records import (
    DEFAULT_SCHEMA,
    FEATURES,
    CleaningLog,
    EmptyFile,
    IngestError,
    MissingColumn,
    TelemetryRecord,
    UnparsableCell,
    clean,
    engineer_features,
    parse_csv,
    write_records_csv,
)
from .split import (
    ClassSingletonWarning,
    ConstantFeatureWarning,
    SplitSpec,
    Standardizer,
    TooFewRows,
    split_stratified,
    stratified_folds,
    standardize_apply,
    standardize_fit,
)
from .synth import FleetConfig, InvalidConfig, generate_synthetic_fleet


def build_dataset(records: Iterable[TelemetryRecord], **label_kwargs) -> tuple[LabeledDataset, CleaningLog]:
    """clean -> engineer_features -> label_dataset in one call."""
    cleaned, log = clean(records)
    ds = label_dataset([engineer_features(r) for r in cleaned], **label_kwargs)
    return ds, log


__all__ = [name for name in dir() if not name.startswith("_")]
