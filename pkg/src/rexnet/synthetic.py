"""Synthetic rating generators for tests and offline runs."""

from __future__ import annotations

import io

import numpy as np

from .dataset import MAX_RATING, MIN_RATING, RatingSet, parse_ratings


def low_rank_ratings(n_users: int = 50, n_items: int = 40, rank: int = 3, observed: float = 0.6,
                     noise_sd: float = 0.01, seed: int = 0) -> RatingSet:
    """Ratings ``clamp(X* Y*^T + b* + c* + noise)`` on a random subset of cells.

    Factor entries have variance ``1/rank`` so the low-rank term has variance
    ``1/rank`` whatever the rank.  Exactly ``round(observed * n_users *
    n_items)`` cells are kept, sorted by (user, item).  Values are continuous,
    not half-star rounded.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(rank)
    X = rng.normal(0.0, scale, size=(n_users, rank))
    Y = rng.normal(0.0, scale, size=(n_items, rank))
    b = 1.5 + rng.normal(0.0, 0.3, size=n_users)
    c = 1.5 + rng.normal(0.0, 0.3, size=n_items)
    full = X @ Y.T + b[:, None] + c[None, :]
    n_obs = int(round(observed * n_users * n_items))
    cells = np.sort(rng.choice(n_users * n_items, size=n_obs, replace=False))
    users, items = np.divmod(cells, n_items)
    values = full[users, items] + rng.normal(0.0, noise_sd, size=n_obs)
    return RatingSet(users, items, np.clip(values, MIN_RATING, MAX_RATING), n_users, n_items)


def movielens_like_csv(n_users: int = 100, n_items: int = 4000, seed: int = 0) -> bytes:
    """A ``ratings.csv`` shaped like MovieLens: half stars, >= 20 ratings per user.

    Item popularity follows a Zipf-like law and raw movie ids are sparse, so
    the parser's remapping and the ``first_users`` compaction are exercised
    the same way real files exercise them.
    """
    rng = np.random.default_rng([seed, 0x6D6C])
    rank = 5
    X = rng.normal(0.0, 0.45, size=(n_users, rank))
    Y = rng.normal(0.0, 0.45, size=(n_items, rank))
    b = rng.normal(0.0, 0.4, size=n_users)
    c = rng.normal(0.0, 0.4, size=n_items)
    popularity = 1.0 / np.arange(1, n_items + 1) ** 0.9
    popularity = rng.permutation(popularity)
    popularity /= popularity.sum()
    movie_ids = np.sort(rng.choice(np.arange(1, 40 * n_items), size=n_items, replace=False))
    counts = np.clip(np.exp(rng.normal(4.3, 0.9, size=n_users)).astype(int), 20, n_items // 2)

    out = io.StringIO()
    out.write("userId,movieId,rating,timestamp\n")
    for u in range(n_users):
        items = np.sort(rng.choice(n_items, size=counts[u], replace=False, p=popularity))
        raw = 3.5 + X[u] @ Y[items].T + b[u] + c[items] + rng.normal(0.0, 0.7, size=len(items))
        stars = np.clip(np.round(raw * 2) / 2, MIN_RATING, MAX_RATING)
        stamps = 964_982_703 + rng.integers(0, 10**8, size=len(items))
        for i, r, t in zip(items, stars, stamps):
            out.write(f"{u + 1},{movie_ids[i]},{r:.1f},{t}\n")
    return out.getvalue().encode()


def movielens_like(n_users: int = 100, n_items: int = 4000, seed: int = 0) -> RatingSet:
    return parse_ratings(movielens_like_csv(n_users, n_items, seed))
