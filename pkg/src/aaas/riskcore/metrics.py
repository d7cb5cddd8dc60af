"""Empirical risk metrics over a year loss table.

Both metrics are plain order statistics of the simulated annual losses. A tiny
tolerance is applied before rounding the rank so that decimal inputs such as
``alpha=0.7`` select the rank a person would compute by hand.
"""

from __future__ import annotations

import math

import numpy as np

from .model import EmptyTable, InvalidAlpha, InvalidReturnPeriod

_RANK_EPS = 1e-9


def _losses(ylt) -> np.ndarray:
    arr = np.asarray(ylt, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyTable("year loss table is empty")
    return arr


def pml(ylt, return_period: float) -> float:
    """Probable maximum loss: the k-th largest loss, k = max(1, floor(N / return_period))."""
    losses = _losses(ylt)
    if not (math.isfinite(return_period) and return_period > 1):
        raise InvalidReturnPeriod(f"return period must be finite and > 1, got {return_period!r}")
    k = max(1, math.floor(losses.size / return_period + _RANK_EPS))
    return float(np.sort(losses)[::-1][k - 1])


def tvar(ylt, alpha: float) -> float:
    """Tail value-at-risk: mean of the m = max(1, ceil((1 - alpha) N)) largest losses."""
    losses = _losses(ylt)
    if not (0.0 < alpha < 1.0):
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha!r}")
    m = max(1, math.ceil((1.0 - alpha) * losses.size - _RANK_EPS))
    tail = np.sort(losses)[::-1][:m]
    return math.fsum(tail) / m
