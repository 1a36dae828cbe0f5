"""Feedforward regression network trained by minibatch SGD with momentum.

Architecture: ``hidden_layers`` dense layers of ``hidden_nodes`` units with
ReLU and a shared dropout rate (inverted scaling, training only), ending in a
linear scalar output.  Targets are standardized internally; predictions are
mapped back, and inference never applies dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .base import FitError, TrainedModel

BATCH_SIZE = 64
MAX_EPOCHS = 500
PATIENCE = 20
MOMENTUM = 0.9
MAX_RESTARTS = 3


def relu(x: np.ndarray | float) -> np.ndarray | float:
    return np.maximum(x, 0.0)


def _init_params(widths: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Alternating [W0, b0, W1, b1, ...]; W ~ U(+-sqrt(6/(fan_in+fan_out)))."""
    params: list[np.ndarray] = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def net_loss_and_grad(
    params: Sequence[np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
    dropout_masks: Sequence[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared-error loss 0.5*mean((f(x)-y)^2) and its exact gradient.

    ``dropout_masks`` (one per hidden layer, already inverted-scaled) are only
    supplied during training; the gradient-check oracle calls this bare.
    """
    n = X.shape[0]
    n_layers = len(params) // 2
    a = X
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [X]
    for layer in range(n_layers - 1):
        z = a @ params[2 * layer] + params[2 * layer + 1]
        pre.append(z)
        a = np.maximum(z, 0.0)
        if dropout_masks is not None:
            a = a * dropout_masks[layer]
        acts.append(a)
    out = (a @ params[-2] + params[-1]).ravel()
    resid = out - y
    loss = 0.5 * float(np.mean(resid**2))

    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    delta = (resid / n)[:, None]
    grads[-2] = acts[-1].T @ delta
    grads[-1] = delta.sum(axis=0)
    back = delta @ params[-2].T
    for layer in range(n_layers - 2, -1, -1):
        if dropout_masks is not None:
            back = back * dropout_masks[layer]
        back = back * (pre[layer] > 0.0)
        grads[2 * layer] = acts[layer].T @ back
        grads[2 * layer + 1] = back.sum(axis=0)
        if layer:
            back = back @ params[2 * layer].T
    return loss, grads


def _forward(params: Sequence[np.ndarray], X: np.ndarray) -> np.ndarray:
    n_layers = len(params) // 2
    a = X
    for layer in range(n_layers - 1):
        a = np.maximum(a @ params[2 * layer] + params[2 * layer + 1], 0.0)
    return (a @ params[-2] + params[-1]).ravel()


@dataclass(frozen=True)
class NetModel(TrainedModel):
    params: tuple[np.ndarray, ...]
    widths: tuple[int, ...]
    y_mean: float
    y_std: float
    n_features: int
    best_epoch: int = 0
    learning_rate_used: float = 0.0
    tag: str = "ffn"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return self.y_mean + self.y_std * _forward(self.params, X)


def fit_ffn(
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    hp: Mapping[str, float],
    seed: int = 0,
) -> NetModel:
    """Train at the searched (hidden_layers, hidden_nodes, dropout, lr) point.

    Divergence (non-finite loss) halves the learning rate and restarts from
    the same initialization, at most MAX_RESTARTS times.
    """
    X = np.asarray(train_X, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.float64)
    Xv = np.asarray(val_X, dtype=np.float64)
    yv = np.asarray(val_y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise FitError("expected X (n, d) and y (n,) of matching length")

    hidden_layers = int(hp["hidden_layers"])
    hidden_nodes = int(hp["hidden_nodes"])
    dropout = float(hp.get("dropout", 0.0))
    lr0 = float(hp["learning_rate"])
    if not 0 <= hidden_layers <= 5:
        raise FitError("hidden_layers must be in 0..5")
    if not 0.0 <= dropout < 1.0:
        raise FitError("dropout must be in [0, 1)")

    n, d = X.shape
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std == 0.0:
        y_std = 1.0
    yt = (y - y_mean) / y_std
    yvt = (yv - y_mean) / y_std

    widths = tuple([d] + [hidden_nodes] * hidden_layers + [1])

    lr = lr0
    for _attempt in range(MAX_RESTARTS + 1):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0x7FFFFFFF, 0xFF17)))
        params = _init_params(widths, rng)
        velocity = [np.zeros_like(p) for p in params]
        best_params = [p.copy() for p in params]
        best_val = math.inf
        best_epoch = 0
        since_best = 0
        diverged = False

        for epoch in range(1, MAX_EPOCHS + 1):
            order = rng.permutation(n)
            for start in range(0, n, BATCH_SIZE):
                batch = order[start : start + BATCH_SIZE]
                masks = None
                if dropout > 0.0 and hidden_layers > 0:
                    masks = [
                        (rng.random((batch.size, hidden_nodes)) >= dropout) / (1.0 - dropout)
                        for _ in range(hidden_layers)
                    ]
                loss, grads = net_loss_and_grad(params, X[batch], yt[batch], masks)
                if not math.isfinite(loss):
                    diverged = True
                    break
                for p, v, g in zip(params, velocity, grads):
                    v *= MOMENTUM
                    v -= lr * g
                    p += v
            if diverged:
                break
            val_rmse = float(np.sqrt(np.mean((_forward(params, Xv) - yvt) ** 2)))
            if not math.isfinite(val_rmse):
                diverged = True
                break
            if val_rmse < best_val:
                best_val = val_rmse
                best_epoch = epoch
                best_params = [p.copy() for p in params]
                since_best = 0
            else:
                since_best += 1
                if since_best >= PATIENCE:
                    break

        if not diverged:
            return NetModel(
                params=tuple(best_params),
                widths=widths,
                y_mean=y_mean,
                y_std=y_std,
                n_features=d,
                best_epoch=best_epoch,
                learning_rate_used=lr,
            )
        lr *= 0.5
    raise FitError(f"training diverged even after {MAX_RESTARTS} learning-rate halvings")
