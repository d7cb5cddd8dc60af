"""Domain types for aggregate risk analysis.

The year event table is stored columnar (CSR style) because realistic tables
hold tens of millions of occurrences; ``Trial``/``EventOccurrence`` objects are
materialised only on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class RiskError(ValueError):
    """Base class for riskcore errors."""


class InvalidTables(RiskError):
    pass


class IndexOutOfCatalog(RiskError, IndexError):
    pass


class MalformedBlob(RiskError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class RangeOutOfBounds(RiskError):
    pass


class EmptyTable(RiskError):
    pass


class InvalidReturnPeriod(RiskError):
    pass


class InvalidAlpha(RiskError):
    pass


def _check_amount(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise InvalidTables(f"{name} must be finite and >= 0, got {value!r}")
    # +0.0 canonicalises a stray -0.0 so bitwise comparisons stay meaningful
    return value + 0.0


@dataclass(frozen=True)
class EventOccurrence:
    event_id: int
    timestamp: float


@dataclass(frozen=True)
class Trial:
    occurrences: tuple[EventOccurrence, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "occurrences", tuple(self.occurrences))
        ts = [o.timestamp for o in self.occurrences]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InvalidTables("trial timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.occurrences)


@dataclass(frozen=True, eq=False)
class YearEventTable:
    """Pre-simulated trials, each an ordered run of (event id, timestamp).

    ``offsets`` has ``n_trials + 1`` entries; trial ``i`` owns
    ``event_ids[offsets[i]:offsets[i+1]]``.
    """

    catalog_size: int
    offsets: np.ndarray
    event_ids: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        ids = np.ascontiguousarray(self.event_ids, dtype=np.uint32)
        ts = np.ascontiguousarray(self.timestamps, dtype=np.float64) + 0.0
        if not 1 <= self.catalog_size < 2**32:
            raise InvalidTables(f"catalog_size out of range: {self.catalog_size}")
        if offsets.ndim != 1 or len(offsets) < 1 or offsets[0] != 0:
            raise InvalidTables("offsets must be 1-D and start at 0")
        if np.any(np.diff(offsets) < 0) or offsets[-1] != len(ids) or len(ids) != len(ts):
            raise InvalidTables("offsets do not describe the event arrays")
        if len(ids) and int(ids.max()) >= self.catalog_size:
            raise InvalidTables("event id outside catalog")
        if not np.all(np.isfinite(ts)) or np.any(ts < 0):
            raise InvalidTables("timestamps must be finite and non-negative")
        if len(ts) > 1:
            step = np.diff(ts)
            starts = np.zeros(len(ts) + 1, dtype=bool)
            starts[offsets[1:-1]] = True
            if np.any((step < 0) & ~starts[1:-1]):
                raise InvalidTables("trial timestamps must be non-decreasing")
        for arr in (offsets, ids, ts):
            arr.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "event_ids", ids)
        object.__setattr__(self, "timestamps", ts)

    @classmethod
    def from_trials(cls, trials: Iterable[Trial | Sequence], catalog_size: int) -> "YearEventTable":
        offsets = [0]
        ids: list[int] = []
        ts: list[float] = []
        for trial in trials:
            occ = trial.occurrences if isinstance(trial, Trial) else trial
            for o in occ:
                if isinstance(o, EventOccurrence):
                    ids.append(o.event_id)
                    ts.append(o.timestamp)
                else:
                    ids.append(o[0])
                    ts.append(o[1])
            offsets.append(len(ids))
        if any(i < 0 for i in ids):
            raise InvalidTables("event ids must be non-negative")
        return cls(catalog_size, np.array(offsets), np.array(ids, dtype=np.int64), np.array(ts, dtype=np.float64))

    @property
    def n_trials(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __len__(self) -> int:
        return self.n_trials

    def trial(self, i: int) -> Trial:
        lo, hi = int(self.offsets[i]), int(self.offsets[i + 1])
        return Trial(tuple(
            EventOccurrence(int(e), float(t))
            for e, t in zip(self.event_ids[lo:hi], self.timestamps[lo:hi])
        ))

    @property
    def trials(self) -> list[Trial]:
        return [self.trial(i) for i in range(self.n_trials)]

    def take(self, order: Sequence[int]) -> "YearEventTable":
        """Table whose trial ``j`` is this table's trial ``order[j]``."""
        order = np.asarray(order, dtype=np.int64)
        counts = self.counts[order]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        if len(order):
            idx = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in order])
        else:
            idx = np.zeros(0, dtype=np.int64)
        return YearEventTable(self.catalog_size, offsets, self.event_ids[idx], self.timestamps[idx])

    def slice(self, begin: int, end: int) -> "YearEventTable":
        lo, hi = int(self.offsets[begin]), int(self.offsets[end])
        return YearEventTable(
            self.catalog_size, self.offsets[begin:end + 1] - lo, self.event_ids[lo:hi], self.timestamps[lo:hi]
        )

    def __eq__(self, other):
        if not isinstance(other, YearEventTable):
            return NotImplemented
        return (
            self.catalog_size == other.catalog_size
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.event_ids, other.event_ids)
            and self.timestamps.tobytes() == other.timestamps.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class ELTerms:
    retention: float = 0.0
    limit: float = 1e300

    def __post_init__(self):
        object.__setattr__(self, "retention", _check_amount("retention", self.retention))
        object.__setattr__(self, "limit", _check_amount("limit", self.limit))


@dataclass(frozen=True, eq=False)
class EventLossTable:
    """Dense direct-access table: ``losses[event_id]``, 0.0 where uncovered."""

    losses: np.ndarray
    terms: ELTerms = field(default_factory=ELTerms)

    def __post_init__(self):
        losses = np.array(self.losses, dtype=np.float64) + 0.0
        if losses.ndim != 1 or not 1 <= len(losses) < 2**32:
            raise InvalidTables("losses must be a non-empty 1-D array")
        if not np.all(np.isfinite(losses)) or np.any(losses < 0):
            raise InvalidTables("losses must be finite and >= 0")
        losses.setflags(write=False)
        object.__setattr__(self, "losses", losses)

    @property
    def catalog_size(self) -> int:
        return len(self.losses)

    def __eq__(self, other):
        if not isinstance(other, EventLossTable):
            return NotImplemented
        return self.terms == other.terms and self.losses.tobytes() == other.losses.tobytes()

    __hash__ = None


@dataclass(frozen=True)
class LayerTerms:
    occ_retention: float = 0.0
    occ_limit: float = 1e300
    agg_retention: float = 0.0
    agg_limit: float = 1e300

    def __post_init__(self):
        for name in ("occ_retention", "occ_limit", "agg_retention", "agg_limit"):
            object.__setattr__(self, name, _check_amount(name, getattr(self, name)))


@dataclass(frozen=True)
class Layer:
    elt_ids: tuple[int, ...]
    terms: LayerTerms = field(default_factory=LayerTerms)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.elt_ids)
        if not ids:
            raise InvalidTables("a layer must cover at least one ELT")
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise InvalidTables(f"layer ELT ids must be distinct and non-negative: {ids}")
        object.__setattr__(self, "elt_ids", ids)


@dataclass(frozen=True)
class Program:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InvalidTables("a program needs at least one layer")


@dataclass(frozen=True)
class Portfolio:
    programs: tuple[Program, ...]

    def __post_init__(self):
        object.__setattr__(self, "programs", tuple(self.programs))
        if not self.programs:
            raise InvalidTables("a portfolio needs at least one program")

    @classmethod
    def single(cls, layer: Layer) -> "Portfolio":
        return cls((Program((layer,)),))

    def layers(self):
        """Yield ``((program_index, layer_index), layer)`` in analysis order."""
        for p, program in enumerate(self.programs):
            for l, layer in enumerate(program.layers):
                yield (p, l), layer

    def to_dict(self) -> dict:
        return {"programs": [
            {"layers": [
                {
                    "elt_ids": list(layer.elt_ids),
                    "terms": {
                        "occ_ret": layer.terms.occ_retention,
                        "occ_lim": layer.terms.occ_limit,
                        "agg_ret": layer.terms.agg_retention,
                        "agg_lim": layer.terms.agg_limit,
                    },
                }
                for layer in program.layers
            ]}
            for program in self.programs
        ]}

    @classmethod
    def from_dict(cls, data: dict) -> "Portfolio":
        try:
            return cls(tuple(
                Program(tuple(
                    Layer(
                        tuple(layer["elt_ids"]),
                        LayerTerms(
                            layer["terms"]["occ_ret"], layer["terms"]["occ_lim"],
                            layer["terms"]["agg_ret"], layer["terms"]["agg_lim"],
                        ),
                    )
                    for layer in program["layers"]
                ))
                for program in data["programs"]
            ))
        except (KeyError, TypeError) as exc:
            raise InvalidTables(f"malformed portfolio document: {exc!r}") from exc


def check_layer(layer: Layer, elts: Sequence[EventLossTable], catalog_size: int) -> None:
    for i in layer.elt_ids:
        if i >= len(elts):
            raise InvalidTables(f"layer references ELT {i} but only {len(elts)} exist")
        if elts[i].catalog_size != catalog_size:
            raise InvalidTables(
                f"ELT {i} catalog_size {elts[i].catalog_size} != YET catalog_size {catalog_size}"
            )
