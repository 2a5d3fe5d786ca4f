"""Local raw-data store: stateless sampling and duplicate-free appends."""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .dataset import RatingSet, RatingTriple
from .errors import CodecError, ProtocolError

TRIPLE_DTYPE = np.dtype([("user", "<u4"), ("item", "<u4"), ("rating", "<f4")])
TRIPLE_SIZE = TRIPLE_DTYPE.itemsize  # 12


class DataStore:
    """Growable rating store keyed by (user, item).

    Exposes the same ``users``/``items``/``ratings`` array views as
    ``RatingSet`` so it can be handed straight to ``sgd_epoch``.
    """

    def __init__(self, initial: RatingSet):
        self.n_users = initial.n_users
        self.n_items = initial.n_items
        self._size = 0
        cap = max(16, 2 * len(initial))
        self._users = np.empty(cap, dtype=np.int64)
        self._items = np.empty(cap, dtype=np.int64)
        self._ratings = np.empty(cap, dtype=np.float64)
        self._keys: set[int] = set()
        append_dedup(self, initial)
        self.origin_count = self._size

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key[0] * self.n_items + key[1] in self._keys

    @property
    def users(self) -> np.ndarray:
        return self._users[: self._size]

    @property
    def items(self) -> np.ndarray:
        return self._items[: self._size]

    @property
    def ratings(self) -> np.ndarray:
        return self._ratings[: self._size]

    def _grow(self, need: int) -> None:
        cap = len(self._users)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_users", "_items", "_ratings"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[: self._size] = old[: self._size]
            setattr(self, name, new)

    def _insert(self, u: int, i: int, r: float) -> bool:
        key = u * self.n_items + i
        if key in self._keys:
            return False
        self._keys.add(key)
        n = self._size
        self._grow(n + 1)
        self._users[n] = u
        self._items[n] = i
        self._ratings[n] = r
        self._size = n + 1
        return True


def append_dedup(store: DataStore, incoming: Iterable[RatingTriple]) -> tuple[DataStore, int]:
    """Insert triples whose key is new; existing keys keep their first value."""
    triples = list(incoming)
    for u, i, _ in triples:
        if not (0 <= u < store.n_users and 0 <= i < store.n_items):
            raise ProtocolError(f"triple ({u}, {i}) outside {store.n_users}x{store.n_items}")
    added = sum(store._insert(int(u), int(i), float(r)) for u, i, r in triples)
    return store, added


def sample_shareable(store: DataStore, count: int, seed: int | Sequence[int], epoch: int) -> list[RatingTriple]:
    """Uniform sample without replacement; no memory across calls."""
    n = len(store)
    take = min(max(count, 0), n)
    if take == 0:
        return []
    seq = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng([*seq, epoch])
    if take == n:
        idx = rng.permutation(n)
    else:
        idx = rng.choice(n, size=take, replace=False)
    users, items, ratings = store.users[idx], store.items[idx], store.ratings[idx]
    return [RatingTriple(u, i, r) for u, i, r in zip(users.tolist(), items.tolist(), ratings.tolist())]


def encode_triples(triples: Sequence[RatingTriple]) -> bytes:
    arr = np.empty(len(triples), dtype=TRIPLE_DTYPE)
    if triples:
        u, i, r = zip(*triples)
        arr["user"], arr["item"], arr["rating"] = u, i, r
    return struct.pack("<I", len(triples)) + arr.tobytes()


def decode_triples(data: bytes | memoryview) -> list[RatingTriple]:
    if len(data) < 4:
        raise CodecError("triple list shorter than its count prefix")
    (count,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + TRIPLE_SIZE * count:
        raise CodecError(f"triple list of {count} entries needs {4 + TRIPLE_SIZE * count} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=TRIPLE_DTYPE, count=count, offset=4)
    if count and not np.isfinite(arr["rating"]).all():
        raise CodecError("non-finite rating in triple list")
    return [RatingTriple(int(u), int(i), float(r))
            for u, i, r in zip(arr["user"].tolist(), arr["item"].tolist(), arr["rating"].tolist())]
