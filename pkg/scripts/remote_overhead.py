"""Remote kernel-phase time against local kernel time on one corpus.

Local and remote runs alternate, and the first pair is discarded as warm-up.
Remote runs rotate over ``--servers`` loopback daemons. Samples on both sides
are grouped by round-robin slot; each group keeps its minimum, since
contention only ever adds time. The medians of the group minima are then
compared. This is the statistic the acceptance suite gates at 10%.

    python scripts/remote_overhead.py --rounds 3 --out overhead.csv
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys

from aaas.bench import LocalServers, run_local, run_remote
from aaas.datagen import GenSpec, gen_elts, gen_portfolio, gen_yet


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--events", type=float, default=100.0, help="mean events per trial")
    ap.add_argument("--elts", type=int, default=16)
    ap.add_argument("--servers", type=int, default=4)
    ap.add_argument("--rounds", type=int, default=3, help="samples per server")
    ap.add_argument("--lanes", type=int, default=1)
    ap.add_argument("--chunk", type=int, default=256)
    ap.add_argument("--out", help="CSV with every timed sample")
    args = ap.parse_args(argv)

    spec = GenSpec.from_mean(args.events, 0.2, n_trials=args.trials, n_elts=args.elts)
    corpus = gen_portfolio(spec), gen_yet(spec), gen_elts(spec)
    local = [[] for _ in range(args.servers)]
    remote = [[] for _ in range(args.servers)]
    samples = []
    with LocalServers(args.servers) as servers:
        for i in range(1 + args.rounds * args.servers):
            g = i % args.servers
            lr, _ = run_local(corpus, args.lanes, args.chunk, repeats=1)
            rr, _ = run_remote(corpus, [servers[g]], args.lanes, args.chunk, repeats=1)
            if not i:
                continue
            local[g].append(lr.samples[0].kernel)
            remote[g].append(rr.samples[0].kernel)
            samples.append({"pair": i, "server": g, "local_kernel_s": lr.samples[0].kernel,
                            "remote_kernel_s": rr.samples[0].kernel,
                            "remote_total_s": rr.samples[0].total})

    lmin = statistics.median(map(min, local))
    rmin = statistics.median(map(min, remote))
    print(f"local  kernel: median of group minima {lmin:.4f}s")
    print(f"remote kernel: median of group minima {rmin:.4f}s")
    print(f"ratio {rmin / lmin:.4f} (gate: within 0.90..1.10)")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(samples[0]))
            w.writeheader()
            w.writerows(samples)
    return 0


if __name__ == "__main__":
    sys.exit(main())
