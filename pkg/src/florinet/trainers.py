"""Reference trainers and client-side training helpers.

The runtime is ML-framework agnostic: a trainer is any callable taking the
raw model payload bytes and a round id and returning a delta (optionally with
a metrics mapping).  Shipped here:

* constant/zero/ones trainers for dummy and scale-test tasks,
* a self-contained logistic-regression trainer over in-memory data,
* the proximal-penalty helper for heterogeneity-robust local objectives.
"""

from __future__ import annotations

import numpy as np

from . import codec
from .errors import FlorinetError


def fedprox_penalty(w, w_global, mu_prox: float) -> tuple[float, np.ndarray]:
    """Proximal term (mu/2)||w - w_global||^2 and its gradient mu*(w - w_global)."""
    w = codec.as_model_vector(w)
    w_global = codec.as_model_vector(w_global)
    if w.size != w_global.size:
        raise FlorinetError("length mismatch between local and global weights")
    diff = w - w_global
    value = 0.5 * mu_prox * float(diff @ diff)
    return value, mu_prox * diff


def decode_model(model_bytes: bytes) -> np.ndarray:
    model = codec.decode_payload(model_bytes)
    if not isinstance(model, np.ndarray):
        raise FlorinetError("expected a float model payload")
    return model


def make_constant_trainer(value: float = 1.0):
    """Trainer returning value * ones(model_length); the dummy-task workhorse."""

    def trainer(model_bytes: bytes, round_id: int):
        model = decode_model(model_bytes)
        delta = np.full(model.size, float(value))
        return delta, {"loss": 0.0, "weight": 1.0}

    return trainer


def make_zero_trainer():
    return make_constant_trainer(0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss_and_accuracy(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    z = X @ w[:-1] + w[-1]
    p = _sigmoid(z)
    eps = 1e-12
    loss = float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
    accuracy = float(np.mean((p >= 0.5) == (y >= 0.5)))
    return loss, accuracy


class LogisticTrainer:
    """Local SGD on a logistic model over one randomly sampled data shard.

    The model vector is ``[weights..., bias]``.  Each round the trainer picks
    one shard deterministically from ``(base_seed, client_index, round_id)``,
    trains on ``subsample`` of it, and returns the weight delta plus loss and
    local-accuracy metrics.
    """

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        shards: list[np.ndarray],
        client_index: int,
        base_seed: int = 0,
        lr: float = 0.5,
        epochs: int = 5,
        batch_size: int = 8,
        subsample: float = 0.2,
        mu_prox: float = 0.0,
    ):
        self.X = X
        self.y = y
        self.shards = shards
        self.client_index = client_index
        self.base_seed = base_seed
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.subsample = subsample
        self.mu_prox = mu_prox

    def __call__(self, model_bytes: bytes, round_id: int):
        w_global = decode_model(model_bytes)
        if w_global.size != self.X.shape[1] + 1:
            raise FlorinetError("model length does not match feature count + bias")
        rng = np.random.default_rng([self.base_seed, self.client_index, int(round_id)])
        shard = self.shards[int(rng.integers(len(self.shards)))]
        take = max(1, int(len(shard) * self.subsample))
        chosen = rng.choice(shard, size=take, replace=False)
        Xb, yb = self.X[chosen], self.y[chosen]

        w = w_global.copy()
        for _ in range(self.epochs):
            order = rng.permutation(take)
            for start in range(0, take, self.batch_size):
                idx = order[start : start + self.batch_size]
                Xm, ym = Xb[idx], yb[idx]
                p = _sigmoid(Xm @ w[:-1] + w[-1])
                err = p - ym
                grad = np.concatenate([Xm.T @ err / len(ym), [float(np.mean(err))]])
                if self.mu_prox > 0:
                    grad += fedprox_penalty(w, w_global, self.mu_prox)[1]
                w -= self.lr * grad

        loss, accuracy = logistic_loss_and_accuracy(w, Xb, yb)
        delta = w - w_global
        return delta, {
            "loss": loss,
            "weight": float(take),
            "eval": {"accuracy": accuracy},
        }
