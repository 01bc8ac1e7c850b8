"""Class rebalancing for the training split: SMOTE, Tomek links, ENN and hybrids."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .ingest import LabeledDataset
from .neighbors import kneighbors

METHODS = ("none", "smote", "smote_tomek", "smote_enn")


class SplitGuardError(AssertionError):
    """Raised when held-out rows reach a resampler."""


class ClassTooSmall(UserWarning):
    pass


class NeighbourCountReduced(UserWarning):
    pass


@dataclass(frozen=True)
class ResampleConfig:
    method: str = "smote_tomek"
    smote_k: int = 5
    enn_k: int = 3
    target: str = "match_majority"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown resampling method {self.method!r}")
        if self.smote_k < 1 or self.enn_k < 1:
            raise ValueError("neighbour counts must be positive")
        if self.target != "match_majority":
            raise ValueError(f"unsupported target {self.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _guard(ds: LabeledDataset) -> None:
    if ds.split == "test":
        raise SplitGuardError("resampling is only allowed on training data")


def _concat(ds: LabeledDataset, X_new, y_new, clusters_new) -> LabeledDataset:
    if len(y_new) == 0:
        return ds
    return LabeledDataset(
        ds.feature_names,
        np.vstack([ds.X, X_new]),
        np.concatenate([ds.y, y_new]),
        np.concatenate([ds.clusters, clusters_new]),
        split=ds.split,
        synthetic=np.concatenate([ds.synthetic, np.ones(len(y_new), dtype=bool)]),
    )


def smote(ds: LabeledDataset, cfg: ResampleConfig = ResampleConfig()) -> LabeledDataset:
    """Oversample every non-majority class up to the majority count.

    A synthetic row is ``x + u * (x_nn - x)`` for a random row ``x`` of the
    class, one of its ``smote_k`` nearest same-class neighbours ``x_nn`` and
    ``u ~ U[0, 1)``. Originals are kept verbatim and come first.
    """
    _guard(ds)
    counts = ds.class_counts()
    if len(counts) < 2:
        return ds
    target = max(counts.values())
    rng = np.random.default_rng(cfg.seed)
    new_X, new_y, new_c = [], [], []
    for cls, count in counts.items():
        need = target - count
        if need == 0:
            continue
        if count < 2:
            warnings.warn(f"class {cls} has {count} row(s); not oversampled", ClassTooSmall)
            continue
        k = cfg.smote_k
        if k >= count:
            k = count - 1
            warnings.warn(f"smote_k reduced to {k} for class {cls}", NeighbourCountReduced)
        members = np.flatnonzero(ds.y == cls)
        Xc = ds.X[members]
        nn, _ = kneighbors(Xc, Xc, k, exclude_self=True)
        base = rng.integers(0, count, size=need)
        pick = nn[base, rng.integers(0, k, size=need)]
        u = rng.uniform(0.0, 1.0, size=(need, 1))
        new_X.append(Xc[base] + u * (Xc[pick] - Xc[base]))
        new_y.append(np.full(need, cls, dtype=np.int64))
        new_c.append(ds.clusters[members][base])
    if not new_X:
        return ds
    return _concat(ds, np.vstack(new_X), np.concatenate(new_y), np.concatenate(new_c))


def tomek_links(ds: LabeledDataset, cfg: ResampleConfig | None = None) -> LabeledDataset:
    """Remove the majority-class member of every Tomek link.

    A link is a pair of rows that are each other's nearest neighbour (ties to
    the lower index) and carry different labels. "Majority" compares the two
    classes' row counts in ``ds``; when they are equal both members go.
    """
    _guard(ds)
    if len(ds) < 2 or len(np.unique(ds.y)) < 2:
        return ds
    nn, _ = kneighbors(ds.X, ds.X, 1, exclude_self=True)
    nn = nn[:, 0]
    counts = ds.class_counts()
    drop = np.zeros(len(ds), dtype=bool)
    i = np.arange(len(ds))
    linked = (nn[nn] == i) & (ds.y != ds.y[nn]) & (i < nn)
    for a in np.flatnonzero(linked):
        b = nn[a]
        ca, cb = counts[int(ds.y[a])], counts[int(ds.y[b])]
        if ca >= cb:
            drop[a] = True
        if cb >= ca:
            drop[b] = True
    return ds.subset(np.flatnonzero(~drop))


def enn(ds: LabeledDataset, cfg: ResampleConfig = ResampleConfig()) -> LabeledDataset:
    """Edited nearest neighbours: drop rows outvoted by their neighbourhood.

    A row goes when a single label holds the plurality among its ``enn_k``
    nearest neighbours and differs from its own. Votes are all taken on the
    input, so removals do not cascade; tied votes keep the row.
    """
    _guard(ds)
    k = cfg.enn_k
    if len(ds) <= k:
        raise ValueError(f"ENN needs more than enn_k={k} rows, got {len(ds)}")
    nn, _ = kneighbors(ds.X, ds.X, k, exclude_self=True)
    votes = ds.y[nn]
    classes = np.unique(ds.y)
    tallies = (votes[:, :, None] == classes[None, None, :]).sum(axis=1)
    top = tallies.max(axis=1)
    unique_top = (tallies == top[:, None]).sum(axis=1) == 1
    winner = classes[tallies.argmax(axis=1)]
    drop = unique_top & (winner != ds.y)
    return ds.subset(np.flatnonzero(~drop))


def smote_tomek(ds: LabeledDataset, cfg: ResampleConfig = ResampleConfig()) -> LabeledDataset:
    return tomek_links(smote(ds, cfg), cfg)


def smote_enn(ds: LabeledDataset, cfg: ResampleConfig = ResampleConfig()) -> LabeledDataset:
    return enn(smote(ds, cfg), cfg)


def resample(ds: LabeledDataset, cfg: ResampleConfig) -> LabeledDataset:
    _guard(ds)
    if cfg.method == "none":
        return ds
    return {"smote": smote, "smote_tomek": smote_tomek, "smote_enn": smote_enn}[cfg.method](ds, cfg)
