"""Kernel time against device count, with every server capped at the same lanes.

Starts ``--servers`` loopback daemons with ``--max-lanes`` equal to
``--server-lanes`` and runs the same corpus on the first 1, 2, 4, ... of them.
Speedups are relative to one device. On a host with fewer hardware threads
than ``servers * server_lanes`` the servers compete for cores, so the curve
flattens early; the script prints the thread count so results can be read in
that light.

    python scripts/device_scaling.py --trials 100000 --out scaling.csv
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys

from aaas.bench import LocalServers, int_list, run_local, run_remote
from aaas.datagen import GenSpec, gen_elts, gen_portfolio, gen_yet
from aaas.riskcore import ylt_digest


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--events", type=float, default=100.0, help="mean events per trial")
    ap.add_argument("--elts", type=int, default=16)
    ap.add_argument("--devices", type=int_list, default=[1, 2, 4])
    ap.add_argument("--server-lanes", type=int, default=2)
    ap.add_argument("--chunk", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", help="CSV with one row per device count")
    args = ap.parse_args(argv)

    spec = GenSpec.from_mean(args.events, 0.2, n_trials=args.trials, n_elts=args.elts, seed=args.seed)
    corpus = gen_portfolio(spec), gen_yet(spec), gen_elts(spec)
    _, reference = run_local(corpus, 1, args.chunk, repeats=1)
    reference = ylt_digest(reference)
    print(f"hardware threads: {os.cpu_count()}, corpus digest {reference}", file=sys.stderr)

    rows = []
    with LocalServers(max(args.devices), max_lanes=args.server_lanes) as servers:
        for d in args.devices:
            report, _ = run_remote(corpus, servers[:d], args.server_lanes, args.chunk, args.repeats)
            if report.digest != reference:
                print(f"devices={d}: digest {report.digest} differs from local {reference}", file=sys.stderr)
                return 1
            kernel = statistics.median(s.kernel for s in report.samples)
            total = statistics.median(s.total for s in report.samples)
            rows.append({"devices": d, "kernel_median_s": kernel, "total_median_s": total})

    base = rows[0]["kernel_median_s"]
    for row in rows:
        row["speedup"] = base / row["kernel_median_s"]
        print(f"devices={row['devices']}: kernel {row['kernel_median_s']:.3f}s "
              f"total {row['total_median_s']:.3f}s speedup {row['speedup']:.2f}x")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
