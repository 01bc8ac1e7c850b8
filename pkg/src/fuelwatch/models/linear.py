"""Multinomial logistic regression trained by full-batch gradient descent."""
from __future__ import annotations

import numpy as np

from ..ingest import LabeledDataset
from .base import ModelSpec, NonFiniteError, TrainedModel, row_sum, softmax

TOL = 1e-8
MAX_HALVINGS = 60


def loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float):
    """Mean softmax cross-entropy plus ``l2/2 * ||W||^2`` and its gradients.

    ``Y`` is the one-hot target matrix. The bias is not regularized.
    """
    n = len(X)
    F = X @ W + b
    Fmax = F.max(axis=1, keepdims=True)
    logZ = Fmax[:, 0] + np.log(np.exp(F - Fmax).sum(axis=1))
    loss = float(np.mean(logZ - (F * Y).sum(axis=1)) + 0.5 * l2 * np.sum(W * W))
    R = (softmax(F) - Y) / n
    return loss, X.T @ R + l2 * W, R.sum(axis=0)


class LogisticModel(TrainedModel):
    kind = "LR"

    def __init__(self, W, b, **common):
        super().__init__(**common)
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def decision(self, Z):
        # elementwise products summed in a fixed order: a row scores the same alone or in a batch
        return row_sum(Z[:, :, None] * self.W[None]) + self.b

    def _params(self):
        return {"W": self.W, "b": self.b}

    @classmethod
    def _from_params(cls, params, **common):
        return cls(params["W"], params["b"], **common)


def train_logistic(train: LabeledDataset, spec: ModelSpec | None = None, *, standardizer=None) -> LogisticModel:
    """Fit softmax regression on (already standardized) training rows.

    Each step moves against the full gradient; a step that would raise the
    loss is halved until it does not, so the loss never increases. Training
    stops when the loss changes by less than 1e-8 or after ``max_iters``.
    """
    spec = spec or ModelSpec("LR")
    hp = spec.hyperparams
    classes = np.unique(train.y)
    Y = (train.y[:, None] == classes[None, :]).astype(np.float64)
    X = train.X
    W = np.zeros((X.shape[1], len(classes)))
    b = np.zeros(len(classes))
    l2 = float(hp["l2"])
    step = float(hp["learning_rate"])
    loss, gW, gb = loss_and_grad(W, b, X, Y, l2)
    history = [loss]
    for it in range(int(hp["max_iters"])):
        for _ in range(MAX_HALVINGS):
            W_new, b_new = W - step * gW, b - step * gb
            new_loss, new_gW, new_gb = loss_and_grad(W_new, b_new, X, Y, l2)
            if not np.isfinite(new_loss):
                step /= 2.0
                continue
            if new_loss <= loss:
                break
            step /= 2.0
        else:
            break
        if not np.isfinite(new_loss):
            raise NonFiniteError(f"logistic loss became non-finite at iteration {it}")
        delta = loss - new_loss
        W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
        history.append(loss)
        if delta < TOL:
            break
    meta = {"data_hash": train.content_hash(), "n_train": len(train), "loss_history": history}
    return LogisticModel(
        W, b, spec=spec, classes=classes, feature_names=train.feature_names, standardizer=standardizer, meta=meta
    )
