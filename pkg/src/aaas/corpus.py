"""On-disk corpus: ``yet.bin``, ``elt-NN.bin``, ``portfolio.json`` and YLT CSV files."""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .riskcore import (
    EventLossTable,
    MalformedBlob,
    Portfolio,
    RiskError,
    YearEventTable,
    decode_elts,
    decode_yet,
    encode_elts,
    encode_yet,
)

YET_MAGIC = b"YET1"
ELT_MAGIC = b"ELT1"
_ELT_NAME = re.compile(r"^elt-(\d+)\.bin$")


class CorpusError(RuntimeError):
    pass


def elt_filename(j: int) -> str:
    return f"elt-{j:02d}.bin"


def write_corpus(path, yet: YearEventTable, elts: Sequence[EventLossTable], portfolio: Portfolio) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob("elt-*.bin"):
        stale.unlink()
    written = [path / "yet.bin"]
    written[0].write_bytes(YET_MAGIC + encode_yet(yet))
    for j, elt in enumerate(elts):
        p = path / elt_filename(j)
        p.write_bytes(ELT_MAGIC + encode_elts([elt]))
        written.append(p)
    p = path / "portfolio.json"
    p.write_text(json.dumps(portfolio.to_dict(), indent=1) + "\n")
    written.append(p)
    return written


def _read_magic(p: Path, magic: bytes) -> bytes:
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read {p}: {exc.strerror}") from exc
    if data[:4] != magic:
        raise CorpusError(f"{p}: expected magic {magic!r}, found {data[:4]!r}")
    return data[4:]


def load_corpus(path) -> tuple[Portfolio, YearEventTable, list[EventLossTable]]:
    path = Path(path)
    if not path.is_dir():
        raise CorpusError(f"corpus directory {path} does not exist")
    try:
        portfolio = Portfolio.from_dict(json.loads((path / "portfolio.json").read_text()))
    except OSError as exc:
        raise CorpusError(f"cannot read {path / 'portfolio.json'}: {exc.strerror}") from exc
    except (json.JSONDecodeError, RiskError) as exc:
        raise CorpusError(f"{path / 'portfolio.json'}: {exc}") from exc

    try:
        yet = decode_yet(_read_magic(path / "yet.bin", YET_MAGIC))
    except MalformedBlob as exc:
        raise CorpusError(f"{path / 'yet.bin'}: {exc}") from exc

    needed = max(i for _, layer in portfolio.layers() for i in layer.elt_ids) + 1
    found = {int(m.group(1)) for p in path.iterdir() if (m := _ELT_NAME.match(p.name))}
    elts = []
    for j in range(max(needed, max(found, default=-1) + 1)):
        p = path / elt_filename(j)
        if not p.exists():
            raise CorpusError(f"missing ELT file {p}")
        try:
            (elt,) = decode_elts(_read_magic(p, ELT_MAGIC))
        except (MalformedBlob, ValueError) as exc:
            raise CorpusError(f"{p}: {exc}") from exc
        if elt.catalog_size != yet.catalog_size:
            raise CorpusError(f"{p}: catalog_size {elt.catalog_size} != YET catalog_size {yet.catalog_size}")
        elts.append(elt)
    return portfolio, yet, elts


def ylt_filename(key: tuple[int, int], n_layers: int) -> str:
    return "ylt.csv" if n_layers == 1 else f"ylt-p{key[0]}-l{key[1]}.csv"


def write_ylt(path, losses: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "loss"])
        for i, x in enumerate(np.asarray(losses, dtype=np.float64).tolist()):
            w.writerow([i, repr(x)])


def read_ylt(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows or rows[0] != ["trial_id", "loss"]:
        raise CorpusError(f"{path}: expected header 'trial_id,loss'")
    try:
        return np.array([float(r[1]) for r in rows[1:]], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise CorpusError(f"{path}: bad row: {exc}") from exc
