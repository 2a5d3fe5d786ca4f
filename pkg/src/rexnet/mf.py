"""Biased matrix factorization: model state, loss, SGD and evaluation.

Predictions are ``X[u] . Y[i] + b[u] + c[i]``.  The objective minimised is

    1/2 * sum_{(u,i) observed} (a_ui - b_u - c_i - X_u . Y_i)^2
        + lam/2 * ||X||_F^2 + lam/2 * ||Y||_F^2

with biases left unregularized.  Training takes a fixed number of
single-sample steps per epoch, sampled with replacement, so epoch cost does
not depend on how large the local store has grown.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from .dataset import MAX_RATING, MIN_RATING
from .errors import CodecError, NumericError


@dataclass
class MfModel:
    X: np.ndarray
    Y: np.ndarray
    b: np.ndarray
    c: np.ndarray
    # boolean masks; a row is "touched" once trained on or received via merge
    touched_users: np.ndarray = field(default=None)  # type: ignore[assignment]
    touched_items: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.touched_users is None:
            self.touched_users = np.zeros(self.X.shape[0], dtype=bool)
        if self.touched_items is None:
            self.touched_items = np.zeros(self.Y.shape[0], dtype=bool)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise ValueError("X and Y must be 2-D with the same number of columns")
        if self.b.shape != (self.X.shape[0],) or self.c.shape != (self.Y.shape[0],):
            raise ValueError("bias vectors must match embedding row counts")
        if self.touched_users.shape != self.b.shape or self.touched_items.shape != self.c.shape:
            raise ValueError("touched masks must match row counts")

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def n_users(self) -> int:
        return self.X.shape[0]

    @property
    def n_items(self) -> int:
        return self.Y.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_users, self.n_items, self.k

    def copy(self) -> "MfModel":
        return MfModel(self.X.copy(), self.Y.copy(), self.b.copy(), self.c.copy(),
                       self.touched_users.copy(), self.touched_items.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.X).all() and np.isfinite(self.Y).all()
                    and np.isfinite(self.b).all() and np.isfinite(self.c).all())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    regularization: float = 0.1
    steps_per_epoch: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        # zero is accepted as a degenerate no-op schedule
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.regularization >= 0:
            raise ValueError("regularization must be non-negative")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be at least 1")


def init_model(n_users: int, n_items: int, k: int, seed: int) -> MfModel:
    """Uniform embeddings in [-0.5/sqrt(k), 0.5/sqrt(k)], zero biases."""
    if n_users < 1 or n_items < 1 or k < 1:
        raise ValueError("n_users, n_items and k must all be >= 1")
    rng = np.random.default_rng(seed)
    scale = 0.5 / math.sqrt(k)
    X = rng.uniform(-scale, scale, size=(n_users, k))
    Y = rng.uniform(-scale, scale, size=(n_items, k))
    return MfModel(X, Y, np.zeros(n_users), np.zeros(n_items))


def _check_index(model: MfModel, user: int, item: int) -> None:
    if not (0 <= user < model.n_users):
        raise ValueError(f"user index {user} out of range [0, {model.n_users})")
    if not (0 <= item < model.n_items):
        raise ValueError(f"item index {item} out of range [0, {model.n_items})")


def predict(model: MfModel, user: int, item: int) -> float:
    _check_index(model, user, item)
    return float(model.X[user] @ model.Y[item] + model.b[user] + model.c[item])


def predict_clamped(model: MfModel, user: int, item: int) -> float:
    return min(max(predict(model, user, item), MIN_RATING), MAX_RATING)


def predict_many(model: MfModel, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    return (np.einsum("ij,ij->i", model.X[users], model.Y[items])
            + model.b[users] + model.c[items])


def _check_data(model: MfModel, data) -> None:
    if len(data.users) == 0:
        return
    if data.users.min() < 0 or data.users.max() >= model.n_users:
        raise ValueError("data user index out of model range")
    if data.items.min() < 0 or data.items.max() >= model.n_items:
        raise ValueError("data item index out of model range")


def loss(model: MfModel, data, lam: float) -> float:
    _check_data(model, data)
    residual = data.ratings - predict_many(model, data.users, data.items)
    return float(0.5 * residual @ residual
                 + 0.5 * lam * np.sum(model.X * model.X)
                 + 0.5 * lam * np.sum(model.Y * model.Y))


def rmse(model: MfModel, test) -> float:
    if len(test.users) == 0:
        raise ValueError("rmse needs a non-empty test set")
    _check_data(model, test)
    residual = test.ratings - predict_many(model, test.users, test.items)
    return float(np.sqrt(np.mean(residual * residual)))


def rmse_clamped(model: MfModel, test) -> float:
    if len(test.users) == 0:
        raise ValueError("rmse needs a non-empty test set")
    _check_data(model, test)
    pred = np.clip(predict_many(model, test.users, test.items), MIN_RATING, MAX_RATING)
    residual = test.ratings - pred
    return float(np.sqrt(np.mean(residual * residual)))


def sample_loss(x_u, y_i, b_u, c_i, rating, lam) -> float:
    """Per-sample share of the objective, the function each SGD step descends."""
    e = rating - b_u - c_i - float(np.dot(x_u, y_i))
    return 0.5 * e * e + 0.5 * lam * (float(np.dot(x_u, x_u)) + float(np.dot(y_i, y_i)))


def sample_gradient(x_u, y_i, b_u, c_i, rating, lam):
    """Gradient of :func:`sample_loss` w.r.t. (x_u, y_i, b_u, c_i)."""
    e = rating - b_u - c_i - float(np.dot(x_u, y_i))
    return -e * y_i + lam * x_u, -e * x_u + lam * y_i, -e, -e


@numba.njit(cache=True)
def _sgd_steps(X, Y, b, c, users, items, ratings, order, lr, lam, touched_u, touched_i):
    k = X.shape[1]
    for s in range(order.shape[0]):
        t = order[s]
        u = users[t]
        i = items[t]
        pred = b[u] + c[i]
        for l in range(k):
            pred += X[u, l] * Y[i, l]
        e = ratings[t] - pred
        acc = 0.0
        for l in range(k):
            xu = X[u, l]
            yi = Y[i, l]
            X[u, l] = xu + lr * (e * yi - lam * xu)
            Y[i, l] = yi + lr * (e * xu - lam * yi)
            acc += X[u, l] + Y[i, l]
        b[u] += lr * e
        c[i] += lr * e
        touched_u[u] = True
        touched_i[i] = True
        if not np.isfinite(acc + b[u] + c[i]):
            return s
    return -1


def sgd_epoch(model: MfModel, store, cfg: TrainConfig, epoch: int) -> MfModel:
    """Run ``cfg.steps_per_epoch`` single-sample SGD steps and return a new model.

    ``store`` is anything exposing parallel ``users``/``items``/``ratings``
    arrays (a ``RatingSet`` or a ``DataStore``).  Samples are drawn with
    replacement from a generator seeded by ``(cfg.rng_seed, epoch)``.
    """
    n = len(store.users)
    if n == 0:
        raise ValueError("cannot train on an empty store")
    _check_data(model, store)
    order = np.random.default_rng([cfg.rng_seed, epoch]).integers(0, n, size=cfg.steps_per_epoch)
    out = model.copy()
    bad = _sgd_steps(out.X, out.Y, out.b, out.c,
                     np.ascontiguousarray(store.users, dtype=np.int64),
                     np.ascontiguousarray(store.items, dtype=np.int64),
                     np.ascontiguousarray(store.ratings, dtype=np.float64),
                     order, float(cfg.learning_rate), float(cfg.regularization),
                     out.touched_users, out.touched_items)
    if bad >= 0:
        t = int(order[bad])
        raise NumericError(
            f"non-finite update at step {bad} on triple "
            f"(user={int(store.users[t])}, item={int(store.items[t])}, rating={float(store.ratings[t])})")
    return out


# -- wire codec ---------------------------------------------------------------

_HEAD = struct.Struct("<III")


def encode_model(model: MfModel) -> bytes:
    """Little-endian: k, n_users, n_items (u32), X, Y, b, c (f32), touched lists."""
    tu = np.flatnonzero(model.touched_users).astype("<u4")
    ti = np.flatnonzero(model.touched_items).astype("<u4")
    return b"".join([
        _HEAD.pack(model.k, model.n_users, model.n_items),
        model.X.astype("<f4").tobytes(),
        model.Y.astype("<f4").tobytes(),
        model.b.astype("<f4").tobytes(),
        model.c.astype("<f4").tobytes(),
        struct.pack("<I", len(tu)), tu.tobytes(),
        struct.pack("<I", len(ti)), ti.tobytes(),
    ])


def encoded_model_size(n_users: int, n_items: int, k: int, n_touched_users: int, n_touched_items: int) -> int:
    return 12 + 4 * (n_users + n_items) * (k + 1) + 8 + 4 * (n_touched_users + n_touched_items)


def decode_model(data: bytes | memoryview) -> MfModel:
    buf = memoryview(data)
    if len(buf) < _HEAD.size:
        raise CodecError("model frame shorter than header")
    k, n_users, n_items = _HEAD.unpack_from(buf, 0)
    if k < 1:
        raise CodecError("model with k = 0")
    pos = _HEAD.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal pos
        end = pos + 4 * count
        if end > len(buf):
            raise CodecError("model frame truncated")
        arr = np.frombuffer(buf[pos:end], dtype=dtype)
        pos = end
        return arr

    X = take(n_users * k, "<f4").astype(np.float64).reshape(n_users, k)
    Y = take(n_items * k, "<f4").astype(np.float64).reshape(n_items, k)
    b = take(n_users, "<f4").astype(np.float64)
    c = take(n_items, "<f4").astype(np.float64)
    masks = []
    for size in (n_users, n_items):
        count = int(take(1, "<u4")[0])
        idx = take(count, "<u4").astype(np.int64)
        if count and (idx.max() >= size or np.any(np.diff(idx) <= 0)):
            raise CodecError("touched indices out of range or not strictly sorted")
        mask = np.zeros(size, dtype=bool)
        mask[idx] = True
        masks.append(mask)
    if pos != len(buf):
        raise CodecError(f"{len(buf) - pos} trailing bytes after model")
    model = MfModel(X, Y, b, c, masks[0], masks[1])
    if not model.is_finite():
        raise CodecError("model contains non-finite values")
    return model
