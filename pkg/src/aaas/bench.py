"""Benchmark harness: corpus generation, local and remote runs, sweeps, metrics.

Every timed run records raw per-repeat samples; means and sample standard
deviations are derived from them and the raw rows are always written out.
A run's YLT digest must be identical across repeats, and ``run-remote`` and
``sweep`` also compare against a local reference digest; the exit status is
non-zero whenever a digest disagrees or a cell fails.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import signal
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import datagen
from .client import ClientError, DeviceEndpoint, PhaseTimes, discover_devices, parse_endpoint, remote_analysis
from .corpus import CorpusError, load_corpus, read_ylt, write_corpus, write_ylt, ylt_filename
from .riskcore import EmptyTable, RiskError, analyze, pml, tvar, ylt_digest

log = logging.getLogger("aaas.bench")

RAW_COLUMNS = ["mode", "devices", "lanes", "chunk", "repeat",
               "transfer_in_s", "kernel_s", "transfer_out_s", "total_s", "digest"]
SUMMARY_COLUMNS = ["mode", "devices", "lanes", "chunk", "repeats",
                   "kernel_mean_s", "kernel_stddev_s", "total_mean_s", "total_stddev_s", "digest", "error"]
FAILED = "FAILED"


@dataclass
class RunReport:
    mode: str
    devices: int
    lanes: int
    chunk_size: int
    samples: list[PhaseTimes] = field(default_factory=list)
    digests: list[str] = field(default_factory=list)
    error: str = ""

    @property
    def repeats(self) -> int:
        return len(self.samples)

    @property
    def digest(self) -> str | None:
        """The run's digest, or None if repeats disagree or the run failed."""
        if self.error or not self.digests or len(set(self.digests)) != 1:
            return None
        return self.digests[0]

    def values(self, phase: str) -> list[float]:
        return [getattr(s, phase) for s in self.samples]

    def mean(self, phase: str = "total") -> float:
        vals = self.values(phase)
        return statistics.fmean(vals) if vals else math.nan

    def stddev(self, phase: str = "total") -> float:
        vals = self.values(phase)
        return statistics.stdev(vals) if len(vals) > 1 else math.nan

    def raw_rows(self) -> list[dict]:
        if self.error and not self.samples:
            return [dict(mode=self.mode, devices=self.devices, lanes=self.lanes, chunk=self.chunk_size,
                         repeat="", transfer_in_s="", kernel_s="", transfer_out_s="", total_s="", digest=FAILED)]
        return [
            dict(mode=self.mode, devices=self.devices, lanes=self.lanes, chunk=self.chunk_size, repeat=i,
                 transfer_in_s=f"{s.transfer_in:.6f}", kernel_s=f"{s.kernel:.6f}",
                 transfer_out_s=f"{s.transfer_out:.6f}", total_s=f"{s.total:.6f}", digest=d)
            for i, (s, d) in enumerate(zip(self.samples, self.digests))
        ]

    def summary_row(self) -> dict:
        def fmt(x):
            return "" if math.isnan(x) else f"{x:.6f}"

        return dict(mode=self.mode, devices=self.devices, lanes=self.lanes, chunk=self.chunk_size,
                    repeats=self.repeats, kernel_mean_s=fmt(self.mean("kernel")),
                    kernel_stddev_s=fmt(self.stddev("kernel")), total_mean_s=fmt(self.mean()),
                    total_stddev_s=fmt(self.stddev()), digest=self.digest or FAILED, error=self.error)


def run_local(corpus, lanes: int, chunk_size: int, repeats: int = 5):
    """Time ``analyze``; all of it counts as kernel time."""
    portfolio, yet, elts = corpus
    report = RunReport("local", 0, lanes, chunk_size)
    ylts = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        ylts = analyze(portfolio, yet, elts, lanes, chunk_size)
        report.samples.append(PhaseTimes(kernel=time.perf_counter() - t0))
        report.digests.append(ylt_digest(ylts))
    return report, ylts


def run_remote(corpus, devices: Sequence[DeviceEndpoint], lanes: int, chunk_size: int, repeats: int = 5):
    portfolio, yet, elts = corpus
    report = RunReport("remote", len(devices), lanes, chunk_size)
    ylts = None
    for _ in range(repeats):
        run = remote_analysis(portfolio, yet, elts, devices, lanes, chunk_size)
        report.samples.append(run.phases)
        report.digests.append(ylt_digest(run.ylts))
        ylts = run.ylts
    return report, ylts


# --- loopback server processes --------------------------------------------------------------

class LocalServers:
    """Spawn ``n`` daemon processes on loopback ephemeral ports."""

    def __init__(self, n: int, max_lanes: int | None = None, mem_cap: str = "4G", log_level: str = "WARNING"):
        self.n = n
        self.max_lanes = max_lanes
        self.mem_cap = mem_cap
        self.log_level = log_level
        self.procs: list[subprocess.Popen] = []
        self.endpoints: list[DeviceEndpoint] = []

    def __enter__(self) -> list[DeviceEndpoint]:
        try:
            for i in range(self.n):
                cmd = [sys.executable, "-m", "aaas.server", "--bind", "127.0.0.1:0",
                       "--mem-cap", str(self.mem_cap), "--log-level", self.log_level, "--device-id", str(i)]
                if self.max_lanes:
                    cmd += ["--max-lanes", str(self.max_lanes)]
                proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
                self.procs.append(proc)
                line = proc.stdout.readline()
                if not line:
                    raise RuntimeError(f"server {i} exited before reporting its address")
                self.endpoints.append(parse_endpoint(line.split()[-1], i))
        except BaseException:
            self.__exit__()
            raise
        return self.endpoints

    def __exit__(self, *exc):
        for proc in self.procs:
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for proc in self.procs:
            try:
                proc.wait(timeout=30)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            proc.stdout.close()
        self.procs.clear()


# --- CLI ---------------------------------------------------------------------------------

def int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def float_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def write_csv(path: str | None, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def save_ylts(out_dir: Path, ylts) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, losses in ylts.items():
        p = out_dir / ylt_filename(key, len(ylts))
        write_ylt(p, losses)
        paths.append(p)
    return paths


def _file_digest(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()[:16]


def cmd_generate(args) -> int:
    spec = datagen.GenSpec.from_mean(
        args.events, args.spread, seed=args.seed, n_trials=args.trials, catalog_size=args.catalog,
        n_elts=args.elts, elt_density=args.density,
    )
    try:
        spec.validate()
    except datagen.InvalidSpec as exc:
        print(f"aaas-bench generate: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    yet, elts, portfolio = datagen.gen_yet(spec), datagen.gen_elts(spec), datagen.gen_portfolio(spec)
    paths = write_corpus(args.out, yet, elts, portfolio)
    print(f"# {yet.n_trials} trials, {len(yet.event_ids)} events, {len(elts)} ELTs, "
          f"catalog {yet.catalog_size}, {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    for p in paths:
        print(f"{_file_digest(p)}  {p}")
    return 0


def _check(report: RunReport, reference: str | None) -> bool:
    ok = report.digest is not None and (reference is None or report.digest == reference)
    if not ok:
        log.error("digest mismatch: %s (reference %s)", report.digests or report.error, reference)
    return ok


def _print_summary(reports: list[RunReport]) -> None:
    for r in reports:
        row = r.summary_row()
        print(f"# {row['mode']} devices={row['devices']} lanes={row['lanes']} chunk={row['chunk']} "
              f"repeats={row['repeats']} kernel={row['kernel_mean_s']}±{row['kernel_stddev_s']}s "
              f"total={row['total_mean_s']}±{row['total_stddev_s']}s digest={row['digest']}", file=sys.stderr)


def cmd_run_local(args) -> int:
    corpus = load_corpus(args.data)
    report, ylts = run_local(corpus, args.lanes, args.chunk, args.repeats)
    save_ylts(Path(args.out or args.data), ylts)
    write_csv(args.report, RAW_COLUMNS, report.raw_rows())
    _print_summary([report])
    return 0 if _check(report, None) else 1


def _devices(args) -> list[DeviceEndpoint]:
    devices = [parse_endpoint(s, i) for i, s in enumerate(args.servers.split(","))] if args.servers \
        else discover_devices()
    if not devices:
        raise ClientError("no servers given: pass --servers, --spawn or set AAAS_SERVERS")
    return devices


def cmd_run_remote(args) -> int:
    corpus = load_corpus(args.data)
    reference = None if args.no_check else ylt_digest(analyze(*corpus))
    if args.spawn:
        with LocalServers(args.spawn, args.server_lanes) as devices:
            report, ylts = run_remote(corpus, devices, args.lanes, args.chunk, args.repeats)
    else:
        report, ylts = run_remote(corpus, _devices(args), args.lanes, args.chunk, args.repeats)
    save_ylts(Path(args.out or args.data), ylts)
    write_csv(args.report, RAW_COLUMNS, report.raw_rows())
    _print_summary([report])
    return 0 if _check(report, reference) else 1


def sweep(corpus, lanes_list, devices_list, chunk_size, repeats, endpoints) -> tuple[list[RunReport], str]:
    """One report per (devices, lanes) cell; devices 0 means a local run."""
    reference = ylt_digest(analyze(*corpus))
    reports = []
    for n_dev in devices_list:
        for lanes in lanes_list:
            log.info("cell devices=%d lanes=%d", n_dev, lanes)
            try:
                if n_dev == 0:
                    report, _ = run_local(corpus, lanes, chunk_size, repeats)
                else:
                    if n_dev > len(endpoints):
                        raise ClientError(f"{n_dev} devices requested, {len(endpoints)} available")
                    report, _ = run_remote(corpus, endpoints[:n_dev], lanes, chunk_size, repeats)
            except (ClientError, RiskError, OSError) as exc:
                report = RunReport("local" if n_dev == 0 else "remote", n_dev, lanes, chunk_size, error=str(exc))
            reports.append(report)
    return reports, reference


def cmd_sweep(args) -> int:
    corpus = load_corpus(args.data)
    n_needed = max(args.devices_list)

    def go(endpoints):
        return sweep(corpus, args.lanes_list, args.devices_list, args.chunk, args.repeats, endpoints)

    if n_needed == 0:
        reports, reference = go([])
    elif args.spawn:
        with LocalServers(max(args.spawn, n_needed), args.server_lanes) as endpoints:
            reports, reference = go(endpoints)
    else:
        reports, reference = go(_devices(args))
    write_csv(args.out, RAW_COLUMNS, [row for r in reports for row in r.raw_rows()])
    if args.summary:
        write_csv(args.summary, SUMMARY_COLUMNS, [r.summary_row() for r in reports])
    _print_summary(reports)
    ok = [_check(r, reference) for r in reports]
    return 0 if all(ok) else 1


def cmd_metrics(args) -> int:
    losses = read_ylt(args.ylt)
    rows = []
    try:
        for r in args.return_periods:
            rows.append(dict(metric="pml", parameter=f"{r:g}", value=repr(pml(losses, r))))
        for a in args.tvar_alphas:
            rows.append(dict(metric="tvar", parameter=f"{a:g}", value=repr(tvar(losses, a))))
    except EmptyTable as exc:
        print(f"aaas-bench metrics: {exc}", file=sys.stderr)
        return 1
    write_csv(args.out, ["metric", "parameter", "value"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aaas-bench", description="Aggregate risk analysis benchmark harness.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--trials", type=int, default=10_000)
    g.add_argument("--events", type=int, default=1000, help="mean events per trial")
    g.add_argument("--spread", type=float, default=0.2, help="relative half-width of the per-trial event count")
    g.add_argument("--elts", type=int, default=16)
    g.add_argument("--catalog", type=int, default=20_000)
    g.add_argument("--density", type=float, default=0.5, help="fraction of catalog events each ELT covers")
    g.add_argument("--seed", type=int, default=1)
    g.set_defaults(fn=cmd_generate)

    def timed(p):
        p.add_argument("data", help="corpus directory")
        p.add_argument("--lanes", type=positive, default=1)
        p.add_argument("--chunk", type=positive, default=256)
        p.add_argument("--repeats", type=positive, default=5)

    def remote(p):
        p.add_argument("--servers", help="HOST:PORT[,HOST:PORT...] (default: $AAAS_SERVERS)")
        p.add_argument("--spawn", type=int, default=0, metavar="N", help="start N loopback servers for this run")
        p.add_argument("--server-lanes", type=positive, default=None, help="--max-lanes for spawned servers")

    r = sub.add_parser("run-local", help="time the in-process analysis")
    timed(r)
    r.add_argument("--out", help="directory for ylt.csv (default: the corpus directory)")
    r.add_argument("--report", help="raw timing CSV (default: stdout)")
    r.set_defaults(fn=cmd_run_local)

    r = sub.add_parser("run-remote", help="time the analysis on remote servers")
    timed(r)
    remote(r)
    r.add_argument("--out", help="directory for ylt.csv (default: the corpus directory)")
    r.add_argument("--report", help="raw timing CSV (default: stdout)")
    r.add_argument("--no-check", action="store_true", help="skip the local reference digest")
    r.set_defaults(fn=cmd_run_remote)

    s = sub.add_parser("sweep", help="grid over lane and device counts")
    s.add_argument("data", help="corpus directory")
    s.add_argument("--lanes-list", type=int_list, default=[16, 32, 64, 128])
    s.add_argument("--devices-list", type=int_list, default=[1], help="0 means a local run")
    s.add_argument("--chunk", type=positive, default=256)
    s.add_argument("--repeats", type=positive, default=5)
    remote(s)
    s.add_argument("--out", help="raw per-repeat CSV (default: stdout)")
    s.add_argument("--summary", help="per-cell summary CSV")
    s.set_defaults(fn=cmd_sweep)

    m = sub.add_parser("metrics", help="PML and TVaR of a YLT")
    m.add_argument("ylt")
    m.add_argument("--return-periods", type=float_list, default=[10, 50, 100, 250])
    m.add_argument("--tvar-alphas", type=float_list, default=[0.9, 0.99])
    m.add_argument("--out", help="output CSV (default: stdout)")
    m.set_defaults(fn=cmd_metrics)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    for name in ("lanes_list", "devices_list"):
        if any(v < 0 for v in getattr(args, name, [])):
            ap.error(f"--{name.replace('_', '-')} values must be >= 0")
    if any(v < 1 for v in getattr(args, "lanes_list", [1])):
        ap.error("--lanes-list values must be >= 1")
    try:
        return args.fn(args)
    except (CorpusError, ClientError, RiskError) as exc:
        print(f"aaas-bench {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
