"""Model specs, the shared prediction contract, and persistence."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ingest import Standardizer

FORMAT_NAME = "fuelwatch-model"
FORMAT_VERSION = 1

KINDS = ("LR", "KNN", "RF", "GBDT")

DEFAULTS = {
    "LR": {"l2": 1e-4, "learning_rate": 0.5, "max_iters": 1000},
    "KNN": {"k": 5},
    "RF": {
        "n_trees": 100,
        "max_depth": 10,
        "features_per_split": "sqrt",
        "bootstrap": True,
        "seed": 0,
    },
    "GBDT": {
        "n_estimators": 100,
        "learning_rate": 0.1,
        "max_depth": 6,
        "l2_leaf": 1.0,
        "max_bins": 256,
        "min_child_weight": 1e-3,
        "seed": 0,
    },
}

DEFAULT_GRIDS = {
    "LR": {"l2": [1e-4, 1e-3, 1e-2, 1e-1]},
    "KNN": {"k": [3, 5, 7, 9]},
    "RF": {"n_trees": [100, 200, 300, 500], "max_depth": [10, 20, 30]},
    "GBDT": {"learning_rate": [0.01, 0.03, 0.05, 0.1], "n_estimators": [50, 100, 150, 200]},
}


class ModelError(Exception):
    pass


class InvalidSpec(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class NonFiniteError(ModelError):
    pass


class ModelVersionMismatch(ModelError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.hyperparams) - set(DEFAULTS[self.kind])
        if unknown:
            raise InvalidSpec(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.hyperparams}
        object.__setattr__(self, "hyperparams", merged)
        for key in ("learning_rate",):
            if key in merged and not merged[key] > 0:
                raise InvalidSpec(f"{key} must be > 0")
        for key in ("l2", "l2_leaf"):
            if key in merged and merged[key] < 0:
                raise InvalidSpec(f"{key} must be >= 0")
        for key in ("k", "n_trees", "max_iters", "max_bins"):
            if key in merged and int(merged[key]) < 1:
                raise InvalidSpec(f"{key} must be >= 1")
        if self.kind == "GBDT" and not 2 <= merged["max_bins"] <= 256:
            raise InvalidSpec("max_bins must lie in [2, 256]")
        if self.kind == "GBDT" and merged["n_estimators"] < 0:
            raise InvalidSpec("n_estimators must be >= 0")

    def __getitem__(self, key):
        return self.hyperparams[key]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": dict(sorted(self.hyperparams.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], dict(d.get("hyperparams", {})))


def softmax(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def row_sum(A: np.ndarray) -> np.ndarray:
    """Sum over axis 1 strictly left to right.

    ``ndarray.sum`` picks pairwise or sequential order from the array shape,
    so a row could score differently alone than inside a batch.
    """
    if A.shape[1] == 0:
        return np.zeros((A.shape[0],) + A.shape[2:])
    return np.cumsum(A, axis=1)[:, -1]


def argmax_lowest(P: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first maximum."""
    return np.argmax(P, axis=1)


class TrainedModel:
    """Common surface of every fitted classifier.

    ``X`` passed to the public methods is in raw feature units; the attached
    standardizer (if any) is applied first. :meth:`decision` is the model's
    raw per-class output on already-prepared rows and is what explanations
    attribute: logits for LR, margins for GBDT, class frequencies for KNN and
    RF.
    """

    kind = ""

    def __init__(self, spec: ModelSpec, classes, feature_names, standardizer: Standardizer | None = None, meta=None):
        self.spec = spec
        self.classes = np.asarray(classes, dtype=np.int64)
        self.feature_names = tuple(feature_names)
        self.standardizer = standardizer
        self.meta = dict(meta or {})

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"model expects {self.n_features} features, got {X.shape[1]}")
        if self.standardizer is not None:
            X = self.standardizer.transform(X)
        return X

    def decision(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def proba_prepared(self, Z: np.ndarray) -> np.ndarray:
        return softmax(self.decision(Z))

    def predict_proba(self, X) -> np.ndarray:
        return self.proba_prepared(self.prepare(X))

    def predict_class(self, X) -> np.ndarray:
        return self.predict(X)[1]

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Probabilities and predicted labels from a single scoring pass."""
        P = self.predict_proba(X)
        return P, self.classes[argmax_lowest(P)]

    # persistence
    def _params(self) -> dict:
        raise NotImplementedError

    @classmethod
    def _from_params(cls, params: dict, **common) -> "TrainedModel":
        raise NotImplementedError

    def to_bytes(self) -> bytes:
        doc = {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "classes": self.classes.tolist(),
            "feature_names": list(self.feature_names),
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "params": {k: _encode(v) for k, v in self._params().items()},
            "training": self.meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def model_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _encode(value):
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value)
        return {
            "__ndarray__": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
            "dtype": arr.dtype.newbyteorder("<").str,
            "shape": list(arr.shape),
        }
    return value


def _decode(value):
    if isinstance(value, dict) and "__ndarray__" in value:
        raw = base64.b64decode(value["__ndarray__"])
        return np.frombuffer(raw, dtype=np.dtype(value["dtype"])).reshape(value["shape"]).copy()
    return value


def model_from_bytes(data: bytes) -> TrainedModel:
    from . import _registry

    doc = json.loads(data.decode("utf-8"))
    if doc.get("format") != FORMAT_NAME:
        raise ModelVersionMismatch("not a fuelwatch model file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelVersionMismatch(
            f"model format version {doc.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    cls = _registry()[doc["kind"]]
    std = doc["standardizer"]
    return cls._from_params(
        {k: _decode(v) for k, v in doc["params"].items()},
        spec=ModelSpec.from_dict(doc["spec"]),
        classes=doc["classes"],
        feature_names=doc["feature_names"],
        standardizer=None if std is None else Standardizer.from_dict(std),
        meta=doc.get("training", {}),
    )


def load_model(path: str | Path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
