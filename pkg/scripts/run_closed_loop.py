"""Velocity-conditioned miniature: ridge decoder R^2 on generated vs held-out real rates."""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from eag.experiments import closed_loop_config, run_closed_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/closed_loop.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gamma", type=float)
    ap.add_argument("--et-epochs", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = closed_loop_config()
    cfg.seed = args.seed
    if args.gamma is not None:
        cfg.guidance = dataclasses.replace(cfg.guidance, gamma=args.gamma)
    if args.et_epochs:
        warm = min(cfg.et_train.warmup_epochs, args.et_epochs)
        cfg.et_train = dataclasses.replace(cfg.et_train, epochs=args.et_epochs, warmup_epochs=warm)

    res = run_closed_loop(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res, indent=1))
    print(f"R2 real {res['r2_real']:.3f}  generated {res['r2_generated']:.3f}  ratio {res['ratio']:.3f}")


if __name__ == "__main__":
    main()
