"""Train AE + EAG on the 32-neuron Lorenz miniature and write the metric comparison.

    python scripts/run_miniature.py --out results/miniature.json [--et-epochs 300]
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from eag.experiments import MiniatureConfig, run_miniature


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/miniature.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ae-epochs", type=int)
    ap.add_argument("--et-epochs", type=int)
    ap.add_argument("--steps", type=int, default=32)
    ap.add_argument("--temperature", type=float, default=1.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = MiniatureConfig(seed=args.seed, steps=args.steps, temperature=args.temperature)
    if args.ae_epochs:
        cfg.ae_train = dataclasses.replace(cfg.ae_train, epochs=args.ae_epochs)
    if args.et_epochs:
        warm = min(cfg.et_train.warmup_epochs, args.et_epochs)
        cfg.et_train = dataclasses.replace(cfg.et_train, epochs=args.et_epochs, warmup_epochs=warm)

    res = run_miniature(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res, indent=1))

    keys = ("dkl_psch", "rmse_pairwise_corr", "rmse_mean_isi", "rmse_std_isi")
    print(f"{'metric':22s}{'generated':>12s}{'recon':>12s}{'doubled':>12s}")
    for k in keys:
        print(f"{k:22s}{res['generated'][k]:12.4g}{res['reconstruction'][k]:12.4g}{res['rate_doubled'][k]:12.4g}")


if __name__ == "__main__":
    main()
