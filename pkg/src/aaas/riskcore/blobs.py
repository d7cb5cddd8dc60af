"""Device-memory images of the analysis tables and the kernel that reads them.

All layouts are little-endian::

    yet_blob    u32 catalog_size, u64 n_trials, u64 offsets[n_trials],
                then per trial: u32 n_events, n_events x (u32 event_id, f64 timestamp)
    elt_blob    u32 n_elts, then per ELT: u32 catalog_size, f64 retention,
                f64 limit, catalog_size x f64 losses
    layer_blob  u32 n_elts_covered, f64 occ_ret, f64 occ_lim, f64 agg_ret, f64 agg_lim
    output      n_trials x f64

Trial offsets are absolute byte positions within the YET blob and must be laid
out back to back. Every field after the offset table is 4-byte aligned, which
lets the kernel read event ids straight out of the blob as 32-bit words.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import EventSource, LayerPlan, compute_layer
from .model import (
    ELTerms,
    EventLossTable,
    IndexOutOfCatalog,
    InvalidTables,
    Layer,
    LayerTerms,
    MalformedBlob,
    RangeOutOfBounds,
    YearEventTable,
    check_layer,
)

_YET_HEAD = struct.Struct("<IQ")
_ELT_HEAD = struct.Struct("<Idd")
_LAYER = struct.Struct("<Idddd")
_EVENT = np.dtype([("id", "<u4"), ("ts", "<f8")])
assert _EVENT.itemsize == 12


def encode_yet(yet: YearEventTable) -> bytes:
    n = yet.n_trials
    body_start = _YET_HEAD.size + 8 * n
    trial_idx = np.arange(n, dtype=np.int64)
    count_words = trial_idx + 3 * yet.offsets[:-1]
    offsets = body_start + 4 * count_words

    words = np.empty(n + 3 * len(yet.event_ids), dtype="<u4")
    is_count = np.zeros(len(words), dtype=bool)
    is_count[count_words] = True
    words[count_words] = yet.counts
    rec = np.empty(len(yet.event_ids), dtype=_EVENT)
    rec["id"] = yet.event_ids
    rec["ts"] = yet.timestamps
    words[~is_count] = rec.view("<u4")
    return _YET_HEAD.pack(yet.catalog_size, n) + offsets.astype("<u8").tobytes() + words.tobytes()


def encode_elts(elts: Sequence[EventLossTable]) -> bytes:
    parts = [struct.pack("<I", len(elts))]
    for elt in elts:
        parts.append(_ELT_HEAD.pack(elt.catalog_size, elt.terms.retention, elt.terms.limit))
        parts.append(elt.losses.astype("<f8").tobytes())
    return b"".join(parts)


def encode_layer(layer: Layer) -> bytes:
    t = layer.terms
    return _LAYER.pack(len(layer.elt_ids), t.occ_retention, t.occ_limit, t.agg_retention, t.agg_limit)


def encode_tables(
    yet: YearEventTable, elts: Sequence[EventLossTable], layer: Layer
) -> tuple[bytes, bytes, bytes]:
    """Blob images for one layer; the ELT blob holds the layer's ELTs in ``elt_ids`` order."""
    check_layer(layer, elts, yet.catalog_size)
    return encode_yet(yet), encode_elts([elts[i] for i in layer.elt_ids]), encode_layer(layer)


@dataclass(frozen=True)
class YetView:
    """Structurally validated YET blob, events left in place."""

    catalog_size: int
    n_trials: int
    body_start: int
    words: np.ndarray
    counts: np.ndarray
    first_word: np.ndarray

    def source(self) -> EventSource:
        return EventSource(self.words, self.first_word, self.counts, 3)


def view_yet(blob) -> YetView:
    buf = memoryview(blob).cast("B")
    size = len(buf)
    if size < _YET_HEAD.size:
        raise MalformedBlob("YET blob shorter than its header", size)
    catalog_size, n = _YET_HEAD.unpack_from(buf, 0)
    if catalog_size == 0:
        raise MalformedBlob("YET catalog_size is zero", 0)
    body_start = _YET_HEAD.size + 8 * n
    if body_start > size:
        raise MalformedBlob(f"offset table for {n} trials runs past end of blob", size)
    offsets = np.frombuffer(buf, dtype="<u8", count=n, offset=_YET_HEAD.size).astype(np.int64)
    outside = (offsets > size - 4) | (offsets < body_start)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise MalformedBlob(f"trial {i} offset {offsets[i]} outside blob body", _YET_HEAD.size + 8 * i)
    raw = np.frombuffer(buf, dtype=np.uint8)
    counts = raw[offsets[:, None] + np.arange(4)].copy().view("<u4").ravel().astype(np.int64)
    ends = offsets + 4 + 12 * counts
    expected = np.concatenate([[body_start], ends[:-1]]) if n else np.zeros(0, np.int64)
    bad = np.flatnonzero(offsets != expected)
    if bad.size:
        i = int(bad[0])
        raise MalformedBlob(
            f"trial {i} starts at {offsets[i]}, expected {expected[i]}", _YET_HEAD.size + 8 * i
        )
    end = int(ends[-1]) if n else body_start
    if end != size:
        raise MalformedBlob(f"YET blob is {size} bytes, layout needs {end}", min(end, size))
    words = np.frombuffer(buf, dtype="<u4", offset=body_start)
    first_word = (offsets - body_start) // 4 + 1
    return YetView(catalog_size, n, body_start, words, counts, first_word)


def decode_yet(blob) -> YearEventTable:
    view = view_yet(blob)
    is_count = np.zeros(len(view.words), dtype=bool)
    is_count[view.first_word - 1] = True
    rec = np.ascontiguousarray(view.words[~is_count]).view(_EVENT)
    offsets = np.concatenate([[0], np.cumsum(view.counts)])
    bad = np.flatnonzero(rec["id"] >= view.catalog_size)
    if bad.size:
        e = int(bad[0])
        trial = int(np.searchsorted(offsets, e, side="right") - 1)
        pos = view.body_start + 4 * (trial + 1) + 12 * e
        raise MalformedBlob(f"event id {int(rec['id'][e])} outside catalog of size {view.catalog_size}", pos)
    try:
        return YearEventTable(view.catalog_size, offsets, rec["id"], rec["ts"])
    except InvalidTables as exc:
        raise MalformedBlob(str(exc), view.body_start) from exc


def decode_elts(blob) -> list[EventLossTable]:
    buf = memoryview(blob).cast("B")
    size = len(buf)
    if size < 4:
        raise MalformedBlob("ELT blob shorter than its header", size)
    (n,) = struct.unpack_from("<I", buf, 0)
    pos, elts = 4, []
    for j in range(n):
        if pos + _ELT_HEAD.size > size:
            raise MalformedBlob(f"ELT {j} header truncated", pos)
        catalog_size, retention, limit = _ELT_HEAD.unpack_from(buf, pos)
        start = pos
        pos += _ELT_HEAD.size
        if catalog_size == 0 or pos + 8 * catalog_size > size:
            raise MalformedBlob(f"ELT {j} losses truncated or empty", start)
        losses = np.frombuffer(buf, dtype="<f8", count=catalog_size, offset=pos)
        try:
            elts.append(EventLossTable(losses, ELTerms(retention, limit)))
        except InvalidTables as exc:
            raise MalformedBlob(f"ELT {j}: {exc}", start) from exc
        pos += 8 * catalog_size
    if pos != size:
        raise MalformedBlob(f"{size - pos} trailing bytes after ELT {n - 1}", pos)
    return elts


def decode_layer(blob) -> Layer:
    buf = memoryview(blob).cast("B")
    if len(buf) != _LAYER.size:
        raise MalformedBlob(f"layer blob must be {_LAYER.size} bytes, got {len(buf)}", min(len(buf), _LAYER.size))
    n, *terms = _LAYER.unpack_from(buf, 0)
    if n == 0:
        raise MalformedBlob("layer covers no ELTs", 0)
    try:
        return Layer(tuple(range(n)), LayerTerms(*terms))
    except InvalidTables as exc:
        raise MalformedBlob(str(exc), 4) from exc


def _check_pair(catalog_size: int, elts: Sequence[EventLossTable], layer: Layer) -> None:
    if len(layer.elt_ids) != len(elts):
        raise MalformedBlob(f"layer covers {len(layer.elt_ids)} ELTs but ELT blob holds {len(elts)}", 0)
    pos = 4
    for elt in elts:
        if elt.catalog_size != catalog_size:
            raise MalformedBlob(
                f"ELT catalog_size {elt.catalog_size} != YET catalog_size {catalog_size}", pos
            )
        pos += _ELT_HEAD.size + 8 * elt.catalog_size


def decode_tables(yet_blob, elt_blob, layer_blob) -> tuple[YearEventTable, list[EventLossTable], Layer]:
    yet = decode_yet(yet_blob)
    elts = decode_elts(elt_blob)
    layer = decode_layer(layer_blob)
    _check_pair(yet.catalog_size, elts, layer)
    return yet, elts, layer


def risk_kernel(
    yet_blob,
    elt_blob,
    layer_blob,
    output,
    lanes: int = 1,
    chunk_size: int = 256,
    trial_range: tuple[int, int] | None = None,
    executor=None,
) -> None:
    """Compute trial losses for ``trial_range`` straight from device blobs.

    ``output`` must be a writable buffer of at least ``8 * (end - begin)``
    bytes; trial ``begin + j`` lands in float64 slot ``j``. Timestamps are not
    inspected since they cannot affect the losses.
    """
    view = view_yet(yet_blob)
    elts = decode_elts(elt_blob)
    layer = decode_layer(layer_blob)
    _check_pair(view.catalog_size, elts, layer)
    begin, end = (0, view.n_trials) if trial_range is None else map(int, trial_range)
    if not 0 <= begin <= end <= view.n_trials:
        raise RangeOutOfBounds(f"trial range [{begin}, {end}) outside [0, {view.n_trials})")
    out_mv = memoryview(output).cast("B")
    if out_mv.readonly:
        raise RangeOutOfBounds("output buffer is read-only")
    if len(out_mv) < 8 * (end - begin):
        raise RangeOutOfBounds(f"output holds {len(out_mv)} bytes, need {8 * (end - begin)}")
    out = np.frombuffer(out_mv, dtype="<f8", count=end - begin)
    plan = LayerPlan.build(layer, elts, view.catalog_size)
    try:
        compute_layer(view.source(), plan, begin, end, out, lanes, chunk_size, executor)
    except IndexOutOfCatalog as exc:
        raise MalformedBlob(str(exc), view.body_start + 4 * getattr(exc, "position", 0)) from exc
