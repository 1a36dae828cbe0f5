"""Shared learner contract: immutable models, deterministic predictions."""

from __future__ import annotations

import numpy as np

#: Fixed ordering used for deterministic tie-breaks during model selection.
LEARNER_ORDER: tuple[str, ...] = ("elastic_net", "elastic_net_poly", "gp", "gbt", "rf", "ffn")


class FitError(RuntimeError):
    """A learner could not produce a model from the given data."""


class TrainedModel:
    """Base for the five model families.

    Subclasses are frozen dataclasses: immutable after fit, safe to share
    across threads, and deterministic under ``predict``.  Each declares a
    ``tag`` and its expected ``n_features``.
    """

    tag: str
    n_features: int

    def predict(self, X: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"{self.tag}: expected rows with {self.n_features} features, got shape {X.shape}"
            )
        return X


def predict(model: TrainedModel, rows: np.ndarray) -> np.ndarray:
    """Uniform prediction entry point over any trained model."""
    return model.predict(rows)
