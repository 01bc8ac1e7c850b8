"""Random forest of CART trees and its Gini importances."""
from __future__ import annotations

import math

import numpy as np

from ..ingest import LabeledDataset
from .base import ModelError, ModelSpec, TrainedModel, row_sum
from .tree import TreeStack, build_cart, pack_trees, unpack_trees


class NotAForest(ModelError):
    pass


def features_per_split(setting, d: int) -> int:
    if setting == "sqrt":
        return max(1, int(math.sqrt(d)))
    if setting in ("all", None):
        return d
    return max(1, min(int(setting), d))


class ForestModel(TrainedModel):
    kind = "RF"

    def __init__(self, trees, **common):
        super().__init__(**common)
        self.trees = list(trees)
        self._stack = TreeStack(self.trees)

    def decision(self, Z):
        V = self._stack.values(Z)
        return row_sum(V) / V.shape[1]

    def proba_prepared(self, Z):
        P = self.decision(Z)
        return P / P.sum(axis=1, keepdims=True)

    def _params(self):
        return pack_trees(self.trees)

    @classmethod
    def _from_params(cls, params, **common):
        return cls(unpack_trees(params), **common)


def train_random_forest(train: LabeledDataset, spec: ModelSpec | None = None, *, standardizer=None) -> ForestModel:
    """Bagged CART trees with random feature subsets at every node.

    Each tree sees ``n`` rows drawn with replacement (or all rows once when
    ``bootstrap`` is off); prediction averages the trees' leaf class
    frequencies.
    """
    spec = spec or ModelSpec("RF")
    hp = spec.hyperparams
    if len(train) < 2:
        raise ModelError("random forest needs at least 2 rows")
    classes, y_index = np.unique(train.y, return_inverse=True)
    n, d = train.X.shape
    k = features_per_split(hp["features_per_split"], d)
    rng = np.random.default_rng(hp["seed"])
    seeds = rng.integers(0, 2**63 - 1, size=int(hp["n_trees"]))
    trees = []
    for s in seeds:
        tree_rng = np.random.default_rng(int(s))
        rows = tree_rng.integers(0, n, size=n) if hp["bootstrap"] else np.arange(n)
        trees.append(
            build_cart(
                train.X[rows],
                y_index[rows],
                len(classes),
                max_depth=hp["max_depth"],
                max_features=k,
                rng=tree_rng,
            )
        )
    meta = {"data_hash": train.content_hash(), "n_train": n}
    return ForestModel(
        trees, spec=spec, classes=classes, feature_names=train.feature_names, standardizer=standardizer, meta=meta
    )


def gini_importance(model: TrainedModel) -> list[tuple[str, float]]:
    """Impurity-decrease importance, summed over all splits and normalized.

    Each split contributes ``n * imp - n_left * imp_left - n_right * imp_right``
    to its feature. Returned in descending order of importance.
    """
    if not isinstance(model, ForestModel):
        raise NotAForest(f"Gini importance needs a random forest, got {model.kind}")
    total = np.zeros(model.n_features)
    for t in model.trees:
        inner = np.flatnonzero(~t.is_leaf)
        l, r = t.left[inner], t.right[inner]
        dec = (
            t.n_samples[inner] * t.impurity[inner]
            - t.n_samples[l] * t.impurity[l]
            - t.n_samples[r] * t.impurity[r]
        )
        np.add.at(total, t.feature[inner], dec)
    s = total.sum()
    imp = total / s if s > 0 else total
    order = sorted(range(len(imp)), key=lambda j: (-imp[j], j))
    return [(model.feature_names[j], float(imp[j])) for j in order]
