"""Histogram gradient-boosted trees with a multiclass softmax objective."""
from __future__ import annotations

import numpy as np

from ..ingest import LabeledDataset
from .base import ModelSpec, NonFiniteError, TrainedModel, row_sum, softmax
from .tree import TreeStack, apply_bins, bin_edges, build_hist_tree, pack_trees, unpack_trees

HESS_FLOOR = 1e-16


def log_loss(F: np.ndarray, y_index: np.ndarray) -> float:
    Fmax = F.max(axis=1, keepdims=True)
    logZ = Fmax[:, 0] + np.log(np.exp(F - Fmax).sum(axis=1))
    return float(np.mean(logZ - F[np.arange(len(F)), y_index]))


class GBDTModel(TrainedModel):
    """``margin[c] = base_score[c] + learning_rate * sum of class-c tree outputs``.

    ``tree_class[t]`` tells which class tree ``t`` belongs to; trees are stored
    round by round.
    """

    kind = "GBDT"

    def __init__(self, base_score, trees, tree_class, **common):
        super().__init__(**common)
        self.base_score = np.asarray(base_score, dtype=np.float64)
        self.trees = list(trees)
        self.tree_class = np.asarray(tree_class, dtype=np.int64)
        self.learning_rate = float(self.spec["learning_rate"])
        self._stack = TreeStack(self.trees)
        self._class_trees = [np.flatnonzero(self.tree_class == c) for c in range(len(self.classes))]

    def decision(self, Z):
        F = np.tile(self.base_score, (len(Z), 1))
        if not self.trees:
            return F
        V = self._stack.values(Z)[:, :, 0]
        for c, cols in enumerate(self._class_trees):
            if len(cols):
                F[:, c] += self.learning_rate * row_sum(V[:, cols])
        return F

    def _params(self):
        return {"base_score": self.base_score, "tree_class": self.tree_class, **pack_trees(self.trees)}

    @classmethod
    def _from_params(cls, params, **common):
        return cls(params["base_score"], unpack_trees(params), params["tree_class"], **common)


def train_gbdt(train: LabeledDataset, spec: ModelSpec | None = None, *, standardizer=None) -> GBDTModel:
    """Boost one regression tree per class per round on softmax gradients.

    The initial margin is the log of the class priors. Per round, every class
    tree is fitted to ``g = p - y`` and ``h = p (1 - p)`` computed from the
    margins at the start of the round; feature values are bucketed once into
    at most ``max_bins`` quantile bins. A single-class training set needs no
    trees at all.
    """
    spec = spec or ModelSpec("GBDT")
    hp = spec.hyperparams
    classes, y_index = np.unique(train.y, return_inverse=True)
    C = len(classes)
    n = len(train)
    priors = np.bincount(y_index, minlength=C) / n
    base = np.log(priors)
    F = np.tile(base, (n, 1))
    Y = np.eye(C)[y_index]
    lr = float(hp["learning_rate"])
    trees, tree_class = [], []
    losses = [log_loss(F, y_index)]
    if C > 1:
        cuts = bin_edges(train.X, int(hp["max_bins"]))
        bins = apply_bins(train.X, cuts)
        for r in range(int(hp["n_estimators"])):
            P = softmax(F)
            G = P - Y
            H = np.maximum(P * (1.0 - P), HESS_FLOOR)
            if not (np.all(np.isfinite(G)) and np.all(np.isfinite(H))):
                raise NonFiniteError(f"non-finite gradient statistics at round {r}")
            for c in range(C):
                tree, leaf_of = build_hist_tree(
                    bins,
                    cuts,
                    G[:, c],
                    H[:, c],
                    max_depth=int(hp["max_depth"]),
                    l2=float(hp["l2_leaf"]),
                    min_child_weight=float(hp["min_child_weight"]),
                )
                F[:, c] += lr * tree.value[leaf_of, 0]
                trees.append(tree)
                tree_class.append(c)
            losses.append(log_loss(F, y_index))
            if not np.isfinite(losses[-1]):
                raise NonFiniteError(f"non-finite training loss at round {r}")
    meta = {"data_hash": train.content_hash(), "n_train": n, "loss_history": losses}
    return GBDTModel(
        base,
        trees,
        tree_class,
        spec=spec,
        classes=classes,
        feature_names=train.feature_names,
        standardizer=standardizer,
        meta=meta,
    )
