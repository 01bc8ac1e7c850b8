"""k-nearest-neighbour classifier."""
from __future__ import annotations

import numpy as np

from ..ingest import LabeledDataset
from ..neighbors import kneighbors
from .base import ModelError, ModelSpec, TrainedModel


class KTooLarge(ModelError):
    pass


class KNNModel(TrainedModel):
    kind = "KNN"

    def __init__(self, X_train, y_index, **common):
        super().__init__(**common)
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.y_index = np.asarray(y_index, dtype=np.int64)
        self.k = int(self.spec["k"])

    def _votes(self, Z):
        idx, dist = kneighbors(Z, self.X_train, self.k)
        onehot = np.eye(len(self.classes))[self.y_index[idx]]  # (n, k, C)
        return onehot.sum(axis=1), (onehot * np.sqrt(dist)[:, :, None]).sum(axis=1)

    def decision(self, Z):
        counts, _ = self._votes(Z)
        return counts / self.k

    def proba_prepared(self, Z):
        return self.decision(Z)

    def predict(self, X):
        """Majority vote; tied classes are separated by smaller summed distance.

        Remaining ties go to the lowest class index.
        """
        counts, dist_sum = self._votes(self.prepare(X))
        top = counts == counts.max(axis=1, keepdims=True)
        dist_sum = np.where(top, dist_sum, np.inf)
        return counts / self.k, self.classes[np.argmin(dist_sum, axis=1)]

    def _params(self):
        return {"X_train": self.X_train, "y_index": self.y_index}

    @classmethod
    def _from_params(cls, params, **common):
        return cls(params["X_train"], params["y_index"], **common)


def train_knn(train: LabeledDataset, spec: ModelSpec | None = None, *, standardizer=None) -> KNNModel:
    spec = spec or ModelSpec("KNN")
    if spec["k"] > len(train):
        raise KTooLarge(f"k={spec['k']} exceeds {len(train)} training rows")
    classes, y_index = np.unique(train.y, return_inverse=True)
    return KNNModel(
        train.X.copy(),
        y_index,
        spec=spec,
        classes=classes,
        feature_names=train.feature_names,
        standardizer=standardizer,
        meta={"data_hash": train.content_hash(), "n_train": len(train)},
    )
