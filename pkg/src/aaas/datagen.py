"""Deterministic synthetic year event tables, event loss tables and portfolios.

Every random draw comes from splitmix64 so that any implementation can rebuild
byte-identical corpora from the same ``GenSpec``. Each artifact has its own
stream whose starting state is ``seed + tag * STREAM_STRIDE (mod 2**64)``:

=================  =============
stream             tag
=================  =============
trial event counts 1
event ids          2
timestamps         3
ELT ``j``          0x100 + j
layer terms        0x10000
=================  =============

Within a stream, output ``i`` (0-based) is ``mix(state + (i + 1) * GOLDEN)``,
exactly the sequential splitmix64 generator. A double in [0, 1) is
``(z >> 11) * 2**-53``; an integer in [lo, hi] is ``lo + z % (hi - lo + 1)``.
An ELT stream yields ``catalog_size`` coverage draws, then ``catalog_size``
loss draws, then retention and limit. The layer stream yields the four layer
terms in (occ_ret, occ_lim, agg_ret, agg_lim) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .riskcore import ELTerms, EventLossTable, Layer, LayerTerms, Portfolio, YearEventTable

GOLDEN = 0x9E3779B97F4A7C15
STREAM_STRIDE = 0xD1B54A32D192ED03
MASK64 = (1 << 64) - 1

TAG_COUNTS, TAG_IDS, TAG_TIMES, TAG_ELT, TAG_LAYER = 1, 2, 3, 0x100, 0x10000
YEAR_DAYS = 365.0


class InvalidSpec(ValueError):
    pass


def splitmix64(state: int, n: int, start: int = 0) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the splitmix64 stream seeded with ``state``."""
    z = (np.arange(start + 1, start + n + 1, dtype=np.uint64) * np.uint64(GOLDEN)) + np.uint64(state & MASK64)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def stream_state(seed: int, tag: int) -> int:
    return (seed + tag * STREAM_STRIDE) & MASK64


def to_unit(z: np.ndarray) -> np.ndarray:
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def to_range(z: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) * to_unit(z)


def to_int(z: np.ndarray, lo: int, hi: int) -> np.ndarray:
    return lo + (z % np.uint64(hi - lo + 1)).astype(np.int64)


@dataclass(frozen=True)
class GenSpec:
    seed: int = 1
    n_trials: int = 10_000
    event_spread: tuple[int, int] = (800, 1200)
    catalog_size: int = 20_000
    n_elts: int = 16
    elt_density: float = 0.5
    loss_range: tuple[float, float] = (1e3, 1e6)
    elt_retention_range: tuple[float, float] = (0.0, 5e4)
    elt_limit_range: tuple[float, float] = (5e5, 1e6)
    occ_retention_range: tuple[float, float] = (1e5, 5e5)
    occ_limit_range: tuple[float, float] = (5e6, 1e7)
    agg_retention_range: tuple[float, float] = (1e7, 5e7)
    agg_limit_range: tuple[float, float] = (1e9, 5e9)

    @classmethod
    def from_mean(cls, mean_events: int, spread: float = 0.2, **kw) -> "GenSpec":
        """Event counts uniform on ``mean * (1 -/+ spread)``, rounded to integers."""
        lo = int(round(mean_events * (1 - spread)))
        hi = int(round(mean_events * (1 + spread)))
        return cls(event_spread=(lo, hi), **kw)

    @property
    def mean_events_per_trial(self) -> float:
        return (self.event_spread[0] + self.event_spread[1]) / 2

    def validate(self) -> None:
        if not 0 <= self.seed <= MASK64:
            raise InvalidSpec("seed must fit in 64 unsigned bits")
        if self.n_trials < 1:
            raise InvalidSpec(f"n_trials must be >= 1, got {self.n_trials}")
        lo, hi = self.event_spread
        if not 0 <= lo <= hi:
            raise InvalidSpec(f"bad event_spread {self.event_spread}")
        if not 1 <= self.catalog_size < 2**32:
            raise InvalidSpec(f"catalog_size out of range: {self.catalog_size}")
        if self.n_elts < 1:
            raise InvalidSpec("at least one ELT is required")
        if not 0.0 < self.elt_density <= 1.0:
            raise InvalidSpec(f"elt_density must lie in (0, 1], got {self.elt_density}")
        for name in ("loss_range", "elt_retention_range", "elt_limit_range", "occ_retention_range",
                     "occ_limit_range", "agg_retention_range", "agg_limit_range"):
            a, b = getattr(self, name)
            if not (math.isfinite(a) and math.isfinite(b) and 0 <= a <= b):
                raise InvalidSpec(f"{name} must satisfy 0 <= min <= max, got {(a, b)}")


def gen_yet(spec: GenSpec) -> YearEventTable:
    spec.validate()
    lo, hi = spec.event_spread
    counts = to_int(splitmix64(stream_state(spec.seed, TAG_COUNTS), spec.n_trials), lo, hi)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    ids = to_int(splitmix64(stream_state(spec.seed, TAG_IDS), total), 0, spec.catalog_size - 1)
    times = to_unit(splitmix64(stream_state(spec.seed, TAG_TIMES), total)) * YEAR_DAYS
    trial = np.repeat(np.arange(spec.n_trials), counts)
    order = np.lexsort((times, trial))
    return YearEventTable(spec.catalog_size, offsets, ids[order], times[order])


def gen_elt(spec: GenSpec, j: int) -> EventLossTable:
    n = spec.catalog_size
    z = splitmix64(stream_state(spec.seed, TAG_ELT + j), 2 * n + 2)
    covered = to_unit(z[:n]) < spec.elt_density
    losses = np.where(covered, to_range(z[n:2 * n], *spec.loss_range), 0.0)
    terms = ELTerms(
        float(to_range(z[2 * n:2 * n + 1], *spec.elt_retention_range)[0]),
        float(to_range(z[2 * n + 1:], *spec.elt_limit_range)[0]),
    )
    return EventLossTable(losses, terms)


def gen_elts(spec: GenSpec) -> list[EventLossTable]:
    spec.validate()
    return [gen_elt(spec, j) for j in range(spec.n_elts)]


def gen_portfolio(spec: GenSpec) -> Portfolio:
    spec.validate()
    u = to_unit(splitmix64(stream_state(spec.seed, TAG_LAYER), 4))
    ranges = (spec.occ_retention_range, spec.occ_limit_range, spec.agg_retention_range, spec.agg_limit_range)
    terms = LayerTerms(*(a + (b - a) * float(x) for (a, b), x in zip(ranges, u)))
    return Portfolio.single(Layer(tuple(range(spec.n_elts)), terms))
