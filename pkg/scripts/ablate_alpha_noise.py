"""Sweep the energy-loss exponent and the noise dimension on a shortened miniature.

The AE is trained once and shared; each ET variant gets its own run.
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from eag import pipeline
from eag.experiments import MiniatureConfig, build_dataset
from eag.metrics import evaluate
from eag.numerics import seeded_rng

log = logging.getLogger("ablate")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/ablation.json")
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0])
    ap.add_argument("--noise-dims", type=int, nargs="+", default=[8, 64])
    ap.add_argument("--et-epochs", type=int, default=60)
    ap.add_argument("--n-train", type=int, default=1000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = MiniatureConfig(n_train=args.n_train, n_generated=1000)
    cfg.et_train = dataclasses.replace(cfg.et_train, epochs=args.et_epochs, warmup_epochs=min(10, args.et_epochs))
    ds = build_dataset(cfg)
    real = ds.by_split(1)
    dtype = pipeline.torch_dtype(cfg.dtype)
    ae, _, _ = pipeline.train_ae_stage(ds, cfg.ae, cfg.ae_train, cfg.seed, dtype)
    z = pipeline.dataset_latents(ae, ds)

    rows = []
    for noise_dim in args.noise_dims:
        for alpha in args.alphas:
            et_cfg = dataclasses.replace(cfg.et, alpha=alpha, noise_dim=noise_dim)
            et, _, hist = pipeline.train_eag_stage(ds, ae, et_cfg, cfg.et_train, cfg.seed, dtype=dtype, latents=z)
            rng = seeded_rng(cfg.seed).substream(pipeline.SAMPLE_STREAM)
            gen, _ = pipeline.generate(et, ae, cfg.n_generated, cfg.n_bins, cfg.steps, cfg.temperature, rng)
            rep = evaluate(real, gen).to_dict()
            rows.append({"alpha": alpha, "noise_dim": noise_dim, "final_loss": hist[-1]["train_loss"], **rep})
            log.info("alpha %.1f noise_dim %d -> %s", alpha, noise_dim, rep)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
