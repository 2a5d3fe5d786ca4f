"""MovieLens-format ingestion, train/test splitting and per-node partitioning.

Ratings are held column-wise (three parallel numpy arrays) because every
consumer downstream, SGD kernels included, wants vectors rather than
objects.  ``RatingTriple`` exists for the places where a single observation
travels on its own (wire payloads, sampling results).
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, NamedTuple, Sequence, Union

import numpy as np

from .errors import ParseError, RatingRangeError

log = logging.getLogger(__name__)

MIN_RATING = 0.5
MAX_RATING = 5.0
HEADER = ("userId", "movieId", "rating", "timestamp")

ONE_PER_USER = "one-per-user"
MULTI_USER = "multi-user"


class RatingTriple(NamedTuple):
    user_id: int
    item_id: int
    rating: float


@dataclass
class RatingSet:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    # dense index -> raw id, kept when ids were remapped at parse time
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)
    n_duplicates: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[RatingTriple]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingTriple(u, i, r)

    @property
    def triples(self) -> list[RatingTriple]:
        return list(self)

    def subset(self, index: np.ndarray) -> "RatingSet":
        """Rows selected by ``index``, same dimensions and remap tables."""
        return RatingSet(
            self.users[index],
            self.items[index],
            self.ratings[index],
            self.n_users,
            self.n_items,
            self.user_ids,
            self.item_ids,
        )

    def distinct_users(self) -> np.ndarray:
        return np.unique(self.users)

    @classmethod
    def from_triples(cls, triples: Sequence[RatingTriple], n_users: int, n_items: int) -> "RatingSet":
        if triples:
            u, i, r = zip(*triples)
        else:
            u, i, r = (), (), ()
        return cls(np.array(u, dtype=np.int64), np.array(i, dtype=np.int64),
                   np.array(r, dtype=np.float64), n_users, n_items)


Source = Union[BinaryIO, bytes, str, os.PathLike]


@contextlib.contextmanager
def _open_text(source: Source) -> Iterator[io.TextIOBase]:
    if isinstance(source, bytes):
        yield io.StringIO(source.decode("utf-8"))
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            yield fh
    else:
        wrapper = io.TextIOWrapper(source, encoding="utf-8", newline="")
        try:
            yield wrapper
        finally:
            # leave the caller's binary stream open
            wrapper.detach()


def parse_ratings(source: Source, id_remap: bool = True) -> RatingSet:
    """Parse a MovieLens ``ratings.csv`` stream.

    With ``id_remap`` the raw user and movie ids are re-indexed densely from 0
    in order of first appearance; the raw ids stay available on the result.
    Duplicate (user, item) lines keep the first occurrence and are counted in
    ``n_duplicates``.
    """
    with _open_text(source) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "missing header")
        if tuple(h.strip() for h in header) != HEADER:
            raise ParseError(1, f"unexpected header {header!r}")

        user_map: dict[int, int] = {}
        item_map: dict[int, int] = {}
        seen: set[tuple[int, int]] = set()
        users: list[int] = []
        items: list[int] = []
        ratings: list[float] = []
        duplicates = 0

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(lineno, f"expected 4 fields, got {len(row)}")
            try:
                raw_user = int(row[0])
                raw_item = int(row[1])
            except ValueError:
                raise ParseError(lineno, "non-integer id") from None
            try:
                rating = float(row[2])
            except ValueError:
                raise ParseError(lineno, f"non-numeric rating {row[2]!r}") from None
            if not (MIN_RATING <= rating <= MAX_RATING):
                raise RatingRangeError(lineno, f"rating {rating} outside [{MIN_RATING}, {MAX_RATING}]")

            if id_remap:
                u = user_map.setdefault(raw_user, len(user_map))
                i = item_map.setdefault(raw_item, len(item_map))
            else:
                if raw_user < 0 or raw_item < 0:
                    raise ParseError(lineno, "negative id")
                u, i = raw_user, raw_item
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)

    if duplicates:
        log.warning("dropped %d duplicate (user, item) lines", duplicates)

    n_users = (max(users) + 1) if users else 0
    n_items = (max(items) + 1) if items else 0
    user_ids = np.array(list(user_map), dtype=np.int64) if id_remap else None
    item_ids = np.array(list(item_map), dtype=np.int64) if id_remap else None
    return RatingSet(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                     np.array(ratings, dtype=np.float64), n_users, n_items,
                     user_ids, item_ids, duplicates)


def first_users(data: RatingSet, count: int) -> RatingSet:
    """Keep only the ``count`` lowest user indices and compact item indices.

    After a remapping parse the lowest indices are the first users to appear
    in the file.  Items nobody in the kept set rated are dropped so the model
    dimensions shrink with the data.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    keep = data.users < count
    users = data.users[keep]
    old_items = data.items[keep]
    # first-appearance order, matching parse_ratings' remap rule
    uniq, first_pos = np.unique(old_items, return_index=True)
    order = uniq[np.argsort(first_pos, kind="stable")]
    lookup = np.full(data.n_items, -1, dtype=np.int64)
    lookup[order] = np.arange(len(order))
    n_users = int(users.max()) + 1 if len(users) else 0
    return RatingSet(
        users, lookup[old_items], data.ratings[keep], n_users, len(order),
        data.user_ids[:n_users] if data.user_ids is not None else None,
        data.item_ids[order] if data.item_ids is not None else None,
    )


def split_train_test(data: RatingSet, train_fraction: float, seed: int) -> tuple[RatingSet, RatingSet]:
    """Global uniform split; both halves keep the input's original row order."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(data) == 0:
        raise ValueError("cannot split an empty rating set")
    n = len(data)
    # guard against 0.7 * 10 == 7.000000000000001 style drift
    n_train = int(math.floor(train_fraction * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return data.subset(train_idx), data.subset(test_idx)


def assign_users(data: RatingSet, n_nodes: int, mode: str) -> np.ndarray:
    """Map each user index to the node that owns it (-1 for absent users).

    ``one-per-user`` gives the i-th distinct user to node i; ``multi-user``
    deals users round-robin, user ``u`` going to node ``u mod n_nodes``.
    """
    present = data.distinct_users()
    if n_nodes <= 0 or n_nodes > len(present):
        raise ValueError(f"n_nodes must be in [1, {len(present)}], got {n_nodes}")
    owner = np.full(data.n_users, -1, dtype=np.int64)
    if mode == ONE_PER_USER:
        if n_nodes != len(present):
            raise ValueError("one-per-user needs exactly one node per distinct user")
        owner[present] = np.arange(len(present))
    elif mode == MULTI_USER:
        owner[present] = present % n_nodes
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return owner


def partition(data: RatingSet, n_nodes: int, mode: str,
              owner: np.ndarray | None = None) -> list[RatingSet]:
    """Split ``data`` into per-node rating sets.

    Pass ``owner`` (from :func:`assign_users` on the full dataset) to route a
    train and a test split with the same user-to-node mapping.
    """
    if owner is None:
        owner = assign_users(data, n_nodes, mode)
    elif n_nodes <= 0:
        raise ValueError("n_nodes must be positive")
    node_of = owner[data.users]
    if len(node_of) and node_of.min() < 0:
        raise ValueError("data contains users without an owner")
    return [data.subset(np.flatnonzero(node_of == i)) for i in range(n_nodes)]
