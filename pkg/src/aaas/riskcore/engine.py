"""Aggregate risk analysis: scalar reference semantics and the vectorised kernel.

The kernel mirrors the one-thread-per-trial GPU layout: trials are independent,
so a block of trials is advanced one event position at a time as a vector
operation, while each trial's running sum is still accumulated strictly in
event order. That keeps results bitwise identical to the scalar definitions
for every choice of lanes and chunk size.
"""

from __future__ import annotations

import contextlib
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import (
    EventLossTable,
    IndexOutOfCatalog,
    InvalidTables,
    Layer,
    Portfolio,
    Trial,
    YearEventTable,
    check_layer,
)

# trials advanced per scheduling step; bounds working-set size and lets
# concurrent kernels interleave on a shared executor
STEP_TRIALS = 8192

# (event, trial) cells per vector tile: 128K float64 cells is 1 MiB, small
# enough for each temporary to stay in cache between operations
TILE_CELLS = 1 << 17


def apply_terms(loss: float, retention: float, limit: float) -> float:
    """Excess-of-loss terms: the part of ``loss`` above ``retention``, capped at ``limit``."""
    return min(max(loss - retention, 0.0), limit)


def lookup_loss(elt: EventLossTable, event_id: int) -> float:
    if not 0 <= event_id < elt.catalog_size:
        raise IndexOutOfCatalog(f"event {event_id} outside catalog of size {elt.catalog_size}")
    return float(elt.losses[event_id])


def event_loss(event_id: int, layer: Layer, elts: Sequence[EventLossTable]) -> float:
    total = 0.0
    for i in layer.elt_ids:
        elt = elts[i]
        total += apply_terms(lookup_loss(elt, event_id), elt.terms.retention, elt.terms.limit)
    return total


def trial_loss(trial: Trial, layer: Layer, elts: Sequence[EventLossTable]) -> float:
    t = layer.terms
    running = 0.0
    for occ in trial.occurrences:
        running += apply_terms(event_loss(occ.event_id, layer, elts), t.occ_retention, t.occ_limit)
    return apply_terms(running, t.agg_retention, t.agg_limit)


@dataclass(frozen=True)
class LayerPlan:
    """Per-layer lookup tables in kernel form.

    ``dense`` has one row per covered ELT and ``catalog_size + 1`` columns; the
    extra zero column is the sentinel that padded event slots read.
    """

    catalog_size: int
    dense: np.ndarray
    retention: np.ndarray
    limit: np.ndarray
    occ_retention: float
    occ_limit: float
    agg_retention: float
    agg_limit: float

    @classmethod
    def build(cls, layer: Layer, elts: Sequence[EventLossTable], catalog_size: int) -> "LayerPlan":
        check_layer(layer, elts, catalog_size)
        covered = [elts[i] for i in layer.elt_ids]
        dense = np.zeros((len(covered), catalog_size + 1), dtype=np.float64)
        for row, elt in zip(dense, covered):
            row[:catalog_size] = elt.losses
        t = layer.terms
        return cls(
            catalog_size,
            dense,
            np.array([e.terms.retention for e in covered]),
            np.array([e.terms.limit for e in covered]),
            t.occ_retention, t.occ_limit, t.agg_retention, t.agg_limit,
        )


@dataclass(frozen=True)
class EventSource:
    """Where the kernel finds event ids.

    Event ``k`` of trial ``i`` sits at ``base[first[i] + stride * k]``. A host
    table uses ``stride=1`` over its id column; a device blob uses ``stride=3``
    over 32-bit words because each record is (u32 id, f64 timestamp).
    ``trusted`` skips the catalog bound check for already-validated tables.
    """

    base: np.ndarray
    first: np.ndarray
    counts: np.ndarray
    stride: int
    trusted: bool = False

    @classmethod
    def from_table(cls, yet: YearEventTable) -> "EventSource":
        return cls(yet.event_ids, yet.offsets[:-1], yet.counts, 1, trusted=True)

    @property
    def n_trials(self) -> int:
        return len(self.counts)


class ThreadLanes:
    """Default lane runner: one thread per lane, no cross-kernel gating."""

    def run(self, fns: Sequence[Callable[[], None]]) -> None:
        if len(fns) == 1:
            fns[0]()
            return
        with ThreadPoolExecutor(max_workers=len(fns), thread_name_prefix="lane") as pool:
            for fut in [pool.submit(fn) for fn in fns]:
                fut.result()

    def step(self):
        return contextlib.nullcontext()


def lane_blocks(begin: int, end: int, lanes: int) -> list[tuple[int, int]]:
    """Contiguous near-equal split of ``[begin, end)``; sizes differ by at most one."""
    n = end - begin
    lanes = max(1, min(lanes, n)) if n else 1
    q, r = divmod(n, lanes)
    blocks, lo = [], begin
    for i in range(lanes):
        hi = lo + q + (1 if i < r else 0)
        blocks.append((lo, hi))
        lo = hi
    return blocks


class _Scratch:
    """Grow-only buffers that one lane reuses for every tile it computes.

    Fresh multi-megabyte temporaries per block cost a page fault per 4 KiB
    whenever the allocator has handed the previous ones back to the OS, which
    glibc does eagerly for threads other than the main one.
    """

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, name: str, shape: tuple[int, int], dtype) -> np.ndarray:
        n = shape[0] * shape[1]
        buf = self._bufs.get(name)
        if buf is None or buf.size < n or buf.dtype != dtype:
            buf = self._bufs[name] = np.empty(n, dtype=dtype)
        return buf[:n].reshape(shape)


def _out_of_catalog(src: EventSource, raw: np.ndarray, pos: np.ndarray, sentinel: int) -> IndexOutOfCatalog:
    bad = raw >= sentinel
    where = int(pos[bad].min())
    err = IndexOutOfCatalog(f"event id {int(src.base[where])} outside catalog of size {sentinel}")
    err.position = where
    return err


def _trial_block(src: EventSource, plan: LayerPlan, lo: int, hi: int, chunk_size: int,
                 scratch: _Scratch | None = None) -> np.ndarray:
    scratch = scratch or _Scratch()
    first = np.asarray(src.first[lo:hi], dtype=np.int64)
    counts = np.asarray(src.counts[lo:hi], dtype=np.int64)
    running = np.zeros(hi - lo, dtype=np.float64)
    max_count = int(counts.max()) if len(counts) else 0
    sentinel = plan.catalog_size
    for c0 in range(0, max_count, chunk_size):
        c1 = min(c0 + chunk_size, max_count)
        live = np.flatnonzero(counts > c0)
        steps = src.stride * np.arange(c0, c1, dtype=np.int64)[:, None]
        cols = np.arange(c0, c1, dtype=np.int64)[:, None]
        # trials are processed in tiles small enough that the temporaries
        # below stay cache resident instead of streaming through memory; a
        # tile's trials are adjacent in the source, so gathering ids straight
        # from it stays local even for strided blob records
        tile = max(1, TILE_CELLS // (c1 - c0))
        for t0 in range(0, len(live), tile):
            rows = live[t0:t0 + tile]
            # (event position, trial) layout so each position is a contiguous vector
            shape = (c1 - c0, len(rows))
            padded = np.greater_equal(cols, counts[rows][None, :], out=scratch.get("padded", shape, bool))
            pos = np.add(first[rows][None, :], steps, out=scratch.get("pos", shape, np.int64))
            pos[padded] = first[rows[0]]
            raw = src.base.take(pos, out=scratch.get("raw", shape, src.base.dtype), mode="clip")
            if not src.trusted:
                raw[padded] = 0
                if int(raw.max()) >= sentinel:
                    raise _out_of_catalog(src, raw, pos, sentinel)
            ids = scratch.get("ids", shape, np.intp)
            ids[...] = raw
            ids[padded] = sentinel
            x = scratch.get("x", shape, np.float64)
            ev = scratch.get("ev", shape, np.float64)

            # every id is below the sentinel column by now, so "clip" never
            # clips; it only lets take write into ``out`` without a bounce copy
            for i, (row, ret, lim) in enumerate(zip(plan.dense, plan.retention, plan.limit)):
                dst = ev if i == 0 else x
                row.take(ids, out=dst, mode="clip")
                dst -= ret
                np.maximum(dst, 0.0, out=dst)
                np.minimum(dst, lim, out=dst)
                if i:
                    ev += x
            if not len(plan.dense):
                ev.fill(0.0)
            ev -= plan.occ_retention
            np.maximum(ev, 0.0, out=ev)
            np.minimum(ev, plan.occ_limit, out=ev)

            acc = running[rows]
            for k in range(c1 - c0):
                acc += ev[k]
            running[rows] = acc

    running -= plan.agg_retention
    np.maximum(running, 0.0, out=running)
    np.minimum(running, plan.agg_limit, out=running)
    return running


def compute_layer(
    src: EventSource,
    plan: LayerPlan,
    begin: int,
    end: int,
    out: np.ndarray,
    lanes: int = 1,
    chunk_size: int = 256,
    executor=None,
) -> None:
    """Write the trial losses of trials ``[begin, end)`` into ``out[0:end-begin]``."""
    if lanes < 1 or chunk_size < 1:
        raise ValueError("lanes and chunk_size must be >= 1")
    executor = executor or ThreadLanes()

    def lane(lo: int, hi: int) -> None:
        scratch = _Scratch()
        for s0 in range(lo, hi, STEP_TRIALS):
            s1 = min(s0 + STEP_TRIALS, hi)
            with executor.step():
                out[s0 - begin:s1 - begin] = _trial_block(src, plan, s0, s1, chunk_size, scratch)

    executor.run([
        (lambda lo=lo, hi=hi: lane(lo, hi)) for lo, hi in lane_blocks(begin, end, lanes)
    ])


def analyze(
    portfolio: Portfolio,
    yet: YearEventTable,
    elts: Sequence[EventLossTable],
    lanes: int = 1,
    chunk_size: int = 256,
) -> dict[tuple[int, int], np.ndarray]:
    """Year loss table for every (program, layer) pair of ``portfolio``."""
    if int(lanes) < 1:
        raise InvalidTables(f"lanes must be >= 1, got {lanes}")
    if int(chunk_size) < 1:
        raise InvalidTables(f"chunk_size must be >= 1, got {chunk_size}")
    plans = {key: LayerPlan.build(layer, elts, yet.catalog_size) for key, layer in portfolio.layers()}
    src = EventSource.from_table(yet)
    result = {}
    for key, plan in plans.items():
        out = np.empty(yet.n_trials, dtype=np.float64)
        compute_layer(src, plan, 0, yet.n_trials, out, int(lanes), int(chunk_size))
        result[key] = out
    return result


def ylt_digest(ylts: Mapping[tuple[int, int], np.ndarray] | np.ndarray) -> str:
    """64-bit BLAKE2b digest of the little-endian YLT bytes, in key order."""
    h = hashlib.blake2b(digest_size=8)
    if isinstance(ylts, np.ndarray):
        h.update(ylts.astype("<f8").tobytes())
    else:
        for key in sorted(ylts):
            h.update(np.asarray(ylts[key]).astype("<f8").tobytes())
    return h.hexdigest()
