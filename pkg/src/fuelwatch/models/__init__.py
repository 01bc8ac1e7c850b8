"""Classifier family: logistic regression, KNN, random forest and GBDT."""
from __future__ import annotations

import numpy as np

from ..ingest import LabeledDataset, standardize_apply, standardize_fit
from ..resample import ResampleConfig, resample
from .base import (
    DEFAULT_GRIDS,
    DEFAULTS,
    KINDS,
    DimensionMismatch,
    InvalidSpec,
    ModelError,
    ModelSpec,
    ModelVersionMismatch,
    NonFiniteError,
    TrainedModel,
    load_model,
    model_from_bytes,
    softmax,
)
from .forest import ForestModel, NotAForest, gini_importance, train_random_forest
from .gbdt import GBDTModel, train_gbdt
from .knn import KNNModel, KTooLarge, train_knn
from .linear import LogisticModel, loss_and_grad, train_logistic
from .tree import Tree, TreeStack, build_cart, build_hist_tree

TRAINERS = {
    "LR": train_logistic,
    "KNN": train_knn,
    "RF": train_random_forest,
    "GBDT": train_gbdt,
}


def _registry():
    return {"LR": LogisticModel, "KNN": KNNModel, "RF": ForestModel, "GBDT": GBDTModel}


def train(ds: LabeledDataset, spec: ModelSpec, *, standardizer=None) -> TrainedModel:
    return TRAINERS[spec.kind](ds, spec, standardizer=standardizer)


def fit_pipeline(
    train_ds: LabeledDataset,
    spec: ModelSpec,
    resample_cfg: ResampleConfig | None = None,
    *,
    standardize: bool = True,
) -> TrainedModel:
    """standardize -> resample -> train, all fitted on ``train_ds`` only.

    The returned model carries the standardizer, so it predicts from raw
    feature rows.
    """
    std = standardize_fit(train_ds) if standardize else None
    ds = standardize_apply(std, train_ds) if std is not None else train_ds
    if resample_cfg is not None:
        ds = resample(ds, resample_cfg)
    return train(ds, spec, standardizer=std)


def predict_proba(model: TrainedModel, rows) -> np.ndarray:
    return model.predict_proba(rows)


def predict_class(model: TrainedModel, rows) -> np.ndarray:
    return model.predict_class(rows)


from .search import GridSearchResult, expand_grid, grid_search  # noqa: E402
