"""Model aggregation for the two gossip schemes.

Both merges work row by row and only let *touched* rows vote: a node that
never trained on (or received) a user's embedding has nothing meaningful to
contribute for that user, so averaging its random initial row in would drag
the result toward noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError
from .mf import MfModel


@dataclass(frozen=True)
class NeighborModel:
    model: MfModel
    degree: int

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("neighbor degree must be >= 1")


def metropolis_weight(deg_i: int, deg_j: int) -> float:
    if deg_i < 1 or deg_j < 1:
        raise ValueError("degrees must be >= 1")
    return 1.0 / (1.0 + max(deg_i, deg_j))


def _check_shapes(local: MfModel, others: Sequence[MfModel]) -> None:
    for m in others:
        if m.shape != local.shape:
            raise ValueError(f"model shape {m.shape} does not match local {local.shape}")


def _column(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _weighted_rows(local_rows, local_mask, w_self, rows, masks, weights):
    """Mask-aware weighted average; rows with no contributor stay as local."""
    nd = local_rows.ndim
    num = w_self * np.where(_column(local_mask, nd), local_rows, 0.0)
    den = w_self * local_mask.astype(np.float64)
    for r, m, w in zip(rows, masks, weights):
        num = num + w * np.where(_column(m, nd), r, 0.0)
        den = den + w * m
    out = local_rows.copy()
    have = den > 0
    out[have] = num[have] / _column(den[have], nd)
    return out


def dpsgd_merge(local: MfModel, own_degree: int, neighbors: Sequence[NeighborModel]) -> MfModel:
    """Degree-weighted (Metropolis-Hastings) average of local and neighbor models.

    Neighbor ``n`` gets ``1 / (1 + max(own_degree, n.degree))``; the local model
    keeps the remainder.  For each row the weights of the parties that
    actually hold it are renormalized to sum to one.
    """
    if own_degree < 1:
        raise ValueError("own_degree must be >= 1")
    if len(neighbors) != own_degree:
        raise ValueError(f"expected {own_degree} neighbor models, got {len(neighbors)}")
    _check_shapes(local, [n.model for n in neighbors])
    weights = [metropolis_weight(own_degree, n.degree) for n in neighbors]
    w_self = 1.0 - sum(weights)
    if w_self < 0:
        raise NumericError(f"negative self-weight {w_self}")

    models = [n.model for n in neighbors]
    u_masks = [m.touched_users for m in models]
    i_masks = [m.touched_items for m in models]
    X = _weighted_rows(local.X, local.touched_users, w_self, [m.X for m in models], u_masks, weights)
    b = _weighted_rows(local.b, local.touched_users, w_self, [m.b for m in models], u_masks, weights)
    Y = _weighted_rows(local.Y, local.touched_items, w_self, [m.Y for m in models], i_masks, weights)
    c = _weighted_rows(local.c, local.touched_items, w_self, [m.c for m in models], i_masks, weights)
    tu = np.logical_or.reduce([local.touched_users, *u_masks])
    ti = np.logical_or.reduce([local.touched_items, *i_masks])
    return MfModel(X, Y, b, c, tu, ti)


def rmw_merge(local: MfModel, alien: MfModel) -> MfModel:
    """Pairwise average; rows held by only one side are taken from it verbatim."""
    _check_shapes(local, [alien])

    def pick(mine, theirs, mine_mask, their_mask):
        both = _column(mine_mask & their_mask, mine.ndim)
        only_theirs = _column(~mine_mask & their_mask, mine.ndim)
        return np.where(both, (mine + theirs) / 2.0, np.where(only_theirs, theirs, mine))

    X = pick(local.X, alien.X, local.touched_users, alien.touched_users)
    b = pick(local.b, alien.b, local.touched_users, alien.touched_users)
    Y = pick(local.Y, alien.Y, local.touched_items, alien.touched_items)
    c = pick(local.c, alien.c, local.touched_items, alien.touched_items)
    return MfModel(X, Y, b, c,
                   local.touched_users | alien.touched_users,
                   local.touched_items | alien.touched_items)
