"""Latent-sampling wall clock against unmasking steps K and trial count.

Weights do not change the cost, so freshly initialized miniature models are used.
"""

import argparse
import json
from pathlib import Path

from eag.experiments import MiniatureConfig, measure_latency, untrained_models


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/latency.json")
    ap.add_argument("--bins", type=int, default=64)
    ap.add_argument("--steps", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--counts", type=int, nargs="+", default=[502, 1004, 2008])
    ap.add_argument("--repeats", type=int, default=2)
    args = ap.parse_args()

    cfg = MiniatureConfig(n_bins=args.bins)
    et, ae = untrained_models(cfg.n_neurons, cfg.n_bins, cfg)
    lat = measure_latency(et, ae, cfg.n_bins, tuple(args.steps), tuple(args.counts), repeats=args.repeats)
    rows = [{"steps": K, "count": n, "seconds": s} for (K, n), s in sorted(lat.items())]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=1))
    for r in rows:
        print(f"K={r['steps']:4d}  trials={r['count']:5d}  {r['seconds']:8.2f}s")


if __name__ == "__main__":
    main()
