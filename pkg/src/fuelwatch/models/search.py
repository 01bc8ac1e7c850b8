"""Exhaustive hyperparameter search scored by stratified k-fold macro F1."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

from .. import metrics
from ..ingest import LabeledDataset
from ..resample import ResampleConfig
from .base import DEFAULT_GRIDS, ModelError, ModelSpec

log = logging.getLogger(__name__)


@dataclass
class GridCell:
    spec: ModelSpec
    mean_f1: float
    std_f1: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "mean_f1_macro": self.mean_f1,
            "std_f1_macro": self.std_f1,
            "error": self.error,
        }


@dataclass
class GridSearchResult:
    best_spec: ModelSpec
    cv_scores: list[GridCell] = field(default_factory=list)
    folds: int = 5

    def to_dict(self) -> dict:
        return {
            "best_spec": self.best_spec.to_dict(),
            "folds": self.folds,
            "cv_scores": [c.to_dict() for c in self.cv_scores],
        }


def expand_grid(kind: str, grid: dict | None = None, base: dict | None = None) -> list[ModelSpec]:
    grid = DEFAULT_GRIDS[kind] if grid is None else grid
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ModelError("hyperparameter grid must be non-empty")
    keys = list(grid)
    return [
        ModelSpec(kind, {**(base or {}), **dict(zip(keys, values))})
        for values in itertools.product(*(grid[k] for k in keys))
    ]


def _preference(cell: GridCell):
    hp = cell.spec.hyperparams
    size = hp.get("n_estimators", hp.get("n_trees", 0))
    depth = hp.get("max_depth") or 0
    return (-cell.mean_f1, size, depth)


def grid_search(
    train: LabeledDataset,
    kind: str,
    grid: dict | None = None,
    folds: int = 5,
    seed: int = 0,
    *,
    resample_cfg: ResampleConfig | None = None,
    base: dict | None = None,
) -> GridSearchResult:
    """Score every grid point and keep the best mean macro F1.

    Ties prefer fewer estimators, then shallower trees, then grid order. A
    cell whose training fails is recorded with its error and skipped.
    """
    cells = []
    for spec in expand_grid(kind, grid, base):
        try:
            cv = metrics.cross_validate(train, spec, folds=folds, resample_cfg=resample_cfg, seed=seed)
            cells.append(GridCell(spec, cv["f1_macro"]["mean"], cv["f1_macro"]["std"]))
        except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the search
            log.warning("grid cell %s failed: %s", spec.hyperparams, exc)
            cells.append(GridCell(spec, math.nan, math.nan, error=f"{type(exc).__name__}: {exc}"))
    scored = [c for c in cells if c.error is None and not math.isnan(c.mean_f1)]
    if not scored:
        raise ModelError("every grid cell failed")
    best = min(scored, key=_preference)
    return GridSearchResult(best.spec, cells, folds)
