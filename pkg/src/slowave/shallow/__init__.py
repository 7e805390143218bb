"""Shallow learners behind a single fit/predict_score surface.

Kinds: lr, svm_linear, svm_rbf, gb, adaboost, rf. Fitting always runs the
feature pipeline (variance filter -> standardize -> SMOTE) and freezes the
preprocessing state inside the returned model; scores are in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ModelError
from .linear import LinearSvmModel, LogisticRegressionModel, RbfSvmModel
from .pipeline import (
    SMOTE_NEIGHBORS,
    VARIANCE_THRESHOLD,
    apply_standardize,
    prepare_training,
    smote,
    standardize,
    variance_filter,
)
from .trees import AdaBoostModel, GradientBoostingModel, RandomForestModel

MODEL_KINDS = ("lr", "svm_linear", "svm_rbf", "gb", "adaboost", "rf")

_LEARNERS = {
    "lr": LogisticRegressionModel,
    "svm_linear": LinearSvmModel,
    "svm_rbf": RbfSvmModel,
    "gb": GradientBoostingModel,
    "adaboost": AdaBoostModel,
    "rf": RandomForestModel,
}

SERIAL_FORMAT = "slowave-model"
SERIAL_VERSION = 1


@dataclass
class ShallowModel:
    """A fitted learner plus its frozen preprocessing state."""

    kind: str
    feature_mask: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    learner: object
    meta: dict = field(default_factory=dict)

    def predict_score(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_mask.size:
            raise ModelError(
                f"model expects {self.feature_mask.size} features, got {X.shape[1]}"
            )
        Xs = apply_standardize(X[:, self.feature_mask], self.mu, self.sigma)
        scores = np.asarray(self.learner.predict_score(Xs), dtype=np.float64)
        return np.clip(scores, 0.0, 1.0)

    def to_json_dict(self) -> dict:
        return {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "kind": self.kind,
            "preprocessing": {
                "feature_mask": self.feature_mask.astype(int).tolist(),
                "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(),
            },
            "state": self.learner.to_state(),
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ShallowModel":
        if doc.get("format") != SERIAL_FORMAT:
            raise ModelError(f"unexpected model format {doc.get('format')!r}")
        if doc.get("version") != SERIAL_VERSION:
            raise ModelError(f"unsupported model version {doc.get('version')!r}")
        kind = doc["kind"]
        if kind not in _LEARNERS:
            raise ModelError(f"unknown model kind {kind!r}")
        pre = doc["preprocessing"]
        return cls(
            kind=kind,
            feature_mask=np.asarray(pre["feature_mask"], dtype=bool),
            mu=np.asarray(pre["mu"], dtype=np.float64),
            sigma=np.asarray(pre["sigma"], dtype=np.float64),
            learner=_LEARNERS[kind].from_state(doc["state"]),
            meta=doc.get("meta", {}),
        )


def fit(
    kind: str,
    X: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    smote_k: int = SMOTE_NEIGHBORS,
) -> ShallowModel:
    """Train one of the shallow learners on raw (unstandardized) features."""
    if kind not in _LEARNERS:
        raise ModelError(f"unknown model kind {kind!r}; pick one of {MODEL_KINDS}")
    rng = np.random.default_rng(seed)
    X_train, y_train, mask, mu, sigma = prepare_training(X, y, seed=rng, smote_k=smote_k)
    learner = _LEARNERS[kind]().fit(X_train, y_train, rng)
    return ShallowModel(kind=kind, feature_mask=mask, mu=mu, sigma=sigma, learner=learner)


def predict_score(model: ShallowModel, X: np.ndarray) -> np.ndarray:
    return model.predict_score(X)


__all__ = [
    "MODEL_KINDS",
    "SMOTE_NEIGHBORS",
    "VARIANCE_THRESHOLD",
    "ShallowModel",
    "fit",
    "predict_score",
    "prepare_training",
    "smote",
    "standardize",
    "variance_filter",
]
