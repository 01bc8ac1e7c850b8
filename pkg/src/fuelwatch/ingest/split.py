"""Stratified train/test splitting and feature standardization."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledDataset
from .records import IngestError


class TooFewRows(IngestError):
    pass


class ClassSingletonWarning(UserWarning):
    pass


class ConstantFeatureWarning(UserWarning):
    pass


MIN_SPLIT_ROWS = 4


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.25
    seed: int = 0
    stratify_by: str = "label"  # or "label_and_cluster"

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.stratify_by not in ("label", "label_and_cluster"):
            raise ValueError(f"unknown stratify_by {self.stratify_by!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``."""
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split_stratified(ds: LabeledDataset, spec: SplitSpec = SplitSpec()):
    """Split ``ds`` into (train, test) preserving per-class proportions.

    Each class contributes ``round(test_fraction * n_class)`` rows to the test
    side (half rounded up). With ``stratify_by="label_and_cluster"`` that count
    is further shared among the class's clusters by largest remainder. Single
    row classes stay in train with a warning.
    """
    n = len(ds)
    if n < MIN_SPLIT_ROWS:
        raise TooFewRows(f"need at least {MIN_SPLIT_ROWS} rows to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    test_idx = []
    for cls in np.unique(ds.y):
        members = np.flatnonzero(ds.y == cls)
        if len(members) == 1:
            warnings.warn(f"class {cls} has a single row; kept in train", ClassSingletonWarning)
            continue
        n_test = min(_round_half_up(spec.test_fraction * len(members)), len(members) - 1)
        if spec.stratify_by == "label":
            test_idx.append(rng.permutation(members)[:n_test])
            continue
        groups = [members[ds.clusters[members] == c] for c in sorted(set(ds.clusters[members]))]
        alloc = _largest_remainder(n_test, np.array([len(g) for g in groups], dtype=float))
        for g, k in zip(groups, alloc):
            test_idx.append(rng.permutation(g)[:k])
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=int)
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    return ds.subset(np.flatnonzero(~mask), split="train"), ds.subset(test, split="test")


@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    std_devs: np.ndarray
    constant: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        scale = np.where(self.constant, 1.0, self.std_devs)
        Z = (X - self.means) / scale
        Z[..., self.constant] = 0.0
        return Z

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "std_devs": self.std_devs.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["std_devs"], dtype=np.float64),
            np.asarray(d["constant"], dtype=bool),
        )


def standardize_fit(train: LabeledDataset) -> Standardizer:
    """Column means and population standard deviations of the training rows."""
    if train.split == "test":
        raise ValueError("standardizer must be fitted on training rows")
    means = train.X.mean(axis=0)
    stds = train.X.std(axis=0)
    constant = ~(stds > 0)
    if constant.any():
        names = [f for f, c in zip(train.feature_names, constant) if c]
        warnings.warn(f"constant features map to 0: {names}", ConstantFeatureWarning)
    return Standardizer(means, stds, constant)


def standardize_apply(s: Standardizer, ds: LabeledDataset) -> LabeledDataset:
    return ds.with_rows(s.transform(ds.X))


def stratified_folds(y: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    """Fold id per row; each class is shuffled and dealt round-robin.

    Dealing continues across classes, so every fold receives a row whenever
    ``folds <= len(y)``.
    """
    y = np.asarray(y)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > len(y):
        raise TooFewRows(f"{folds} folds requested for {len(y)} rows")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    fold = np.empty(len(y), dtype=np.int64)
    fold[order] = np.arange(len(y)) % folds
    return fold
