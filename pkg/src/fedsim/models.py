"""Flat-parameter classifiers (multinomial logistic regression, one-hidden-layer MLP)
and local mini-batch SGD.

Parameters live in one float64 vector. ``ModelSpec.unpack`` returns views into
it, so gradients and updates share the same layout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .datasets import Examples


class ModelKind(str, Enum):
    MLR = "mlr"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.MLR
    input_dim: int = 60
    num_classes: int = 10
    hidden_dim: int = 0
    init_scale: float = 0.01
    init_seed: int = 0
    zero_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.kind is ModelKind.MLP and self.hidden_dim < 1:
            raise ValueError("MLP needs hidden_dim >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, C, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind is ModelKind.MLR:
            return [(C, d), (C,)]
        return [(h, d), (h,), (C, h), (C,)]

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes)

    def unpack(self, w: np.ndarray) -> list[np.ndarray]:
        if w.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {w.shape}")
        out, pos = [], 0
        for shape in self.shapes:
            size = math.prod(shape)
            out.append(w[pos:pos + size].reshape(shape))
            pos += size
        return out

    def init(self) -> np.ndarray:
        if self.zero_init:
            return np.zeros(self.num_params)
        rng = np.random.default_rng(self.init_seed)
        return self.init_scale * rng.standard_normal(self.num_params)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 20
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def local_steps(self, n: int) -> int:
        return math.ceil(n / self.batch_size) * self.epochs


def _forward(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    parts = spec.unpack(w)
    if spec.kind is ModelKind.MLR:
        W, b = parts
        return x @ W.T + b, None
    W1, b1, W2, b2 = parts
    pre = x @ W1.T + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ W2.T + b2, (pre, hidden)


def logits(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _forward(spec, w, np.atleast_2d(x))[0]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def predict_proba(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities; accepts a single feature vector or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    single = x.ndim == 1
    p = np.exp(_log_softmax(logits(spec, w, x)))
    return p[0] if single else p


def _softmax_residual(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(softmax(z) - onehot(y)) / n, computed in place on ``z``."""
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    z[np.arange(len(y)), y] -= 1.0
    z /= len(y)
    return z


def _mean_nll(z: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(z)
    return float(-logp[np.arange(len(y)), y].mean())


def _loss_grad(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray, with_loss: bool = True):
    z, cache = _forward(spec, w, x)
    loss = _mean_nll(z, y) if with_loss else None
    dz = _softmax_residual(z, y)
    if spec.kind is ModelKind.MLR:
        return loss, np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    pre, hidden = cache
    _, _, W2, _ = spec.unpack(w)
    dh = dz @ W2
    dh[pre <= 0.0] = 0.0
    grad = np.concatenate([
        (dh.T @ x).ravel(), dh.sum(axis=0),
        (dz.T @ hidden).ravel(), dz.sum(axis=0),
    ])
    return loss, grad


def loss_and_gradient(spec: ModelSpec, w: np.ndarray, batch: Examples) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its exact gradient w.r.t. ``w``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return _loss_grad(spec, w, batch.x, batch.y)


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield (perm, start, stop): consecutive slices of a fresh permutation per pass."""
    done = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done == steps:
                return
            yield perm, start, start + batch_size
            done += 1
        if done == steps:
            return


def sgd(
    spec: ModelSpec,
    w_start: np.ndarray,
    data: Examples,
    batch_size: int,
    lr: float,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run ``steps`` mini-batch SGD steps and return the accumulated update.

    Batches are consecutive slices of a fresh permutation per pass over
    ``data``; the last slice of a pass may be short. The update is summed
    step by step alongside the model, so a single step gives exactly
    ``-lr * grad``.
    """
    if spec.kind is ModelKind.MLR:
        return sgd_stacked(spec, w_start, [data], batch_size, lr, steps, [rng])[0]
    w = w_start.copy()
    delta = np.zeros_like(w_start)
    xs = ys = None
    last_perm = None
    for perm, start, stop in _batches(len(data), batch_size, steps, rng):
        if perm is not last_perm:
            xs, ys = data.x[perm], data.y[perm]
            last_perm = perm
        _, g = _loss_grad(spec, w, xs[start:stop], ys[start:stop], with_loss=False)
        g *= lr
        w -= g
        delta -= g
    return delta


def sgd_stacked(
    spec: ModelSpec,
    w_start: np.ndarray,
    datasets: Sequence[Examples],
    batch_size: int,
    lr: float,
    steps: int,
    rngs: Sequence[np.random.Generator],
) -> np.ndarray:
    """MLR SGD for several equal-sized datasets at once; row k is dataset k's update.

    Each dataset draws its permutations from its own generator, so row k
    equals what ``sgd`` gives for dataset k alone. Stacking only amortizes
    the per-step interpreter overhead.
    """
    if spec.kind is not ModelKind.MLR:
        raise ValueError("stacked SGD is implemented for MLR only")
    K = len(datasets)
    if K == 0 or len(rngs) != K:
        raise ValueError("need one generator per dataset")
    n = len(datasets[0])
    if any(len(d) != n for d in datasets):
        raise ValueError("stacked SGD needs equal-sized datasets")
    C, d = spec.num_classes, spec.input_dim
    W = np.repeat(w_start[: C * d].reshape(1, C, d), K, axis=0)
    b = np.repeat(w_start[C * d:].reshape(1, C), K, axis=0)
    dW, db = np.zeros_like(W), np.zeros_like(b)
    if steps <= 0:
        return np.concatenate([dW.reshape(K, -1), db], axis=1)
    X = np.stack([ds.x for ds in datasets])
    Y = np.stack([ds.y for ds in datasets])
    rows = np.arange(K)[:, None]
    done = 0
    while done < steps:
        perms = np.stack([r.permutation(n) for r in rngs])
        xs, ys = X[rows, perms], Y[rows, perms]
        for start in range(0, n, batch_size):
            if done == steps:
                break
            xb, yb = xs[:, start:start + batch_size], ys[:, start:start + batch_size]
            m = yb.shape[1]
            # stacked form of _softmax_residual
            z = np.matmul(xb, W.transpose(0, 2, 1))
            z += b[:, None, :]
            z -= z.max(axis=2, keepdims=True)
            np.exp(z, out=z)
            z /= z.sum(axis=2, keepdims=True)
            z[rows, np.arange(m)[None, :], yb] -= 1.0
            z /= m
            step_W = np.matmul(z.transpose(0, 2, 1), xb)
            step_W *= lr
            step_b = z.sum(axis=1)
            step_b *= lr
            W -= step_W
            b -= step_b
            dW -= step_W
            db -= step_b
            done += 1
    return np.concatenate([dW.reshape(K, -1), db], axis=1)


def local_train(
    spec: ModelSpec,
    w_global: np.ndarray,
    data: Examples,
    cfg: TrainConfig,
    rng: np.random.Generator,
    lr: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """E epochs of local SGD from ``w_global``; returns ``(delta, w_local)``.

    ``lr`` overrides ``cfg.learning_rate`` (the orchestrator passes the decayed
    round rate).
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rate = cfg.learning_rate if lr is None else lr
    delta = sgd(spec, w_global, data, cfg.batch_size, rate, cfg.local_steps(len(data)), rng)
    return delta, w_global + delta


def evaluate(spec: ModelSpec, w: np.ndarray, data: Examples) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy (ties go to the lowest class)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z, _ = _forward(spec, w, data.x)
    acc = np.mean(np.argmax(z, axis=1) == data.y)
    return _mean_nll(z, data.y), float(acc)


def serialize_params(w: np.ndarray) -> bytes:
    """Length-prefixed little-endian float64 encoding."""
    w = np.asarray(w, dtype="<f8")
    return struct.pack("<Q", w.shape[0]) + w.tobytes()


def deserialize_params(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`serialize_params`; returns the vector and the next offset."""
    if len(buf) - offset < 8:
        raise ValueError("truncated parameter vector header")
    (n,) = struct.unpack_from("<Q", buf, offset)
    start = offset + 8
    end = start + 8 * n
    if len(buf) < end:
        raise ValueError("truncated parameter vector")
    w = np.frombuffer(buf, dtype="<f8", count=n, offset=start).astype(np.float64)
    return w, end
