"""Desk-scale Lorenz experiments shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import pipeline
from .autoencoder import AEConfig
from .energy_transformer import ETConfig, GuidanceConfig
from .lorenz import TrialDataset, make_lorenz_dataset
from .metrics import closed_loop_validate, evaluate, ridge_fit, select_ridge_penalty
from .numerics import seeded_rng
from .trainer import TrainConfig

log = logging.getLogger(__name__)


def _mini_ae():
    return AEConfig(encoder_blocks=2, decoder_blocks=2, embed_dim=64, num_latents=4, dropout_prob=0.25)


def _mini_ae_train():
    return TrainConfig(learning_rate=1e-3, epochs=200, warmup_epochs=0, batch_size=64, patience=30)


def _mini_et():
    return ETConfig(
        embed_dim=128,
        encoder_depth=2,
        decoder_depth=2,
        num_heads=4,
        ff_ratio=2.0,
        mlp_depth=3,
        mlp_width=128,
        noise_dim=64,
    )


def _mini_et_train():
    return TrainConfig(learning_rate=1e-3, epochs=300, warmup_epochs=10, batch_size=64)


@dataclass
class MiniatureConfig:
    """2000 training trials of 32 neurons x 64 bins, d = 4 latents."""

    n_neurons: int = 32
    n_bins: int = 64
    n_train: int = 2000
    val_fraction: float = 0.1
    seed: int = 0
    behavior: Optional[str] = None
    ae: AEConfig = field(default_factory=_mini_ae)
    ae_train: TrainConfig = field(default_factory=_mini_ae_train)
    et: ETConfig = field(default_factory=_mini_et)
    et_train: TrainConfig = field(default_factory=_mini_et_train)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    n_generated: int = 2000
    steps: int = 32
    # the head is underdispersed at this size; cooling the noise further makes it worse
    temperature: float = 1.0
    dtype: str = "float32"

    @property
    def n_trials(self) -> int:
        # enough trials that the train split holds exactly n_train
        return int(round(self.n_train / (1.0 - self.val_fraction)))


def build_dataset(cfg: MiniatureConfig) -> TrialDataset:
    ds = make_lorenz_dataset(
        n_trials=cfg.n_trials,
        n_neurons=cfg.n_neurons,
        T=cfg.n_bins,
        seed=cfg.seed,
        val_fraction=cfg.val_fraction,
        behavior=cfg.behavior,
    )
    return ds


def _progress(tag):
    t0 = time.perf_counter()

    def cb(entry):
        if entry["epoch"] % 10 == 0:
            log.info("%s epoch %d loss %.5f val %.5f (%.0fs)", tag, entry["epoch"], entry["train_loss"], entry["val"], time.perf_counter() - t0)

    return cb


def train_models(cfg: MiniatureConfig, ds: TrialDataset, conditional: bool = False):
    dtype = pipeline.torch_dtype(cfg.dtype)
    t0 = time.perf_counter()
    ae, ae_ckpt, ae_log = pipeline.train_ae_stage(ds, cfg.ae, cfg.ae_train, cfg.seed, dtype, _progress("ae"))
    t1 = time.perf_counter()
    et, et_ckpt, et_log = pipeline.train_eag_stage(
        ds, ae, cfg.et, cfg.et_train, cfg.seed, cfg.guidance, conditional, dtype, on_epoch=_progress("eag")
    )
    t2 = time.perf_counter()
    timing = {"ae_seconds": t1 - t0, "eag_seconds": t2 - t1, "ae_epochs": len(ae_log), "eag_epochs": len(et_log)}
    return ae, et, (ae_ckpt, et_ckpt), timing


def run_miniature(cfg: Optional[MiniatureConfig] = None) -> dict:
    """Train AE + EAG on the miniature Lorenz set and score generated spikes
    against the validation trials, next to AE reconstructions and a
    rate-doubled control."""
    cfg = cfg or MiniatureConfig()
    ds = build_dataset(cfg)
    ae, et, _, timing = train_models(cfg, ds)
    real = ds.by_split(1)
    root = seeded_rng(cfg.seed).substream(pipeline.SAMPLE_STREAM)

    t0 = time.perf_counter()
    gen, latency = pipeline.generate(
        et, ae, cfg.n_generated, cfg.n_bins, cfg.steps, cfg.temperature, root.substream(0), bin_width=ds.bin_width
    )
    timing["sample_seconds"] = time.perf_counter() - t0
    timing["latent_sampling_seconds"] = latency
    recon = pipeline.reconstruct(ae, real, root.substream(1))
    control = pipeline.rate_doubled(real, root.substream(2))

    return {
        "config": asdict(cfg),
        "n_real": real.n_trials,
        "generated": evaluate(real, gen).to_dict(),
        "reconstruction": evaluate(real, recon).to_dict(),
        "rate_doubled": evaluate(real, control).to_dict(),
        "timing": timing,
    }


def closed_loop_config() -> MiniatureConfig:
    """Velocity-conditioned variant of the miniature, trimmed to fit beside it."""
    return MiniatureConfig(
        n_train=1000,
        behavior="velocity",
        et_train=TrainConfig(learning_rate=5e-4, epochs=150, warmup_epochs=10, batch_size=128),
        guidance=GuidanceConfig(gamma=1.0),
        steps=16,
        temperature=0.7,
    )


def run_closed_loop(cfg: Optional[MiniatureConfig] = None, ridge_grid=(0.1, 1.0, 10.0, 100.0)) -> dict:
    """Ridge decoder fit on real training-split rates; mean per-trial R^2 on
    held-out real rates versus on rates generated under the held-out
    trials' velocities."""
    cfg = cfg or closed_loop_config()
    ds = build_dataset(cfg)
    ae, et, _, timing = train_models(cfg, ds, conditional=True)
    train, held = ds.by_split(0), ds.by_split(1)

    # penalty picked on a slice of the training trials so the held-out set stays untouched
    n_tune = max(1, train.n_trials // 10)
    lam, sweep = select_ridge_penalty(
        train.rates[n_tune:], train.behavior[n_tune:], train.rates[:n_tune], train.behavior[:n_tune], ridge_grid
    )
    dec = ridge_fit(train.rates, train.behavior, lam)
    cond = pipeline.condition_of(held)
    rng = seeded_rng(cfg.seed).substream(pipeline.SAMPLE_STREAM)
    gen, _ = pipeline.generate(
        et, ae, held.n_trials, cfg.n_bins, cfg.steps, cfg.temperature, rng, cond, cfg.guidance, bin_width=ds.bin_width
    )
    r2_real = closed_loop_validate(dec, held.rates, held.behavior)
    r2_gen = closed_loop_validate(dec, gen.rates, held.behavior)
    return {
        "lambda": lam,
        "sweep": sweep,
        "r2_real": float(np.mean(r2_real)),
        "r2_generated": float(np.mean(r2_gen)),
        "ratio": float(np.mean(r2_gen) / np.mean(r2_real)),
        "timing": timing,
    }


def measure_latency(
    et,
    ae,
    T: int,
    steps: tuple,
    counts: tuple,
    temperature: float = 0.7,
    seed: int = 0,
    repeats: int = 1,
    batch_size: int = 256,
) -> dict:
    """Latent sampling seconds for each (steps, count) pair; best of ``repeats``.

    Trials go through in chunks of ``batch_size`` as in :func:`pipeline.generate`;
    one huge batch costs more per trial once activations fall out of cache.
    """
    out = {(K, n): np.inf for K in steps for n in counts}
    # repeats are the outer loop so slow drift on the machine hits every cell alike
    for r in range(repeats):
        for K in steps:
            for n in counts:
                _, sec = pipeline.generate(
                    et, ae, n, T, K, temperature, seeded_rng(seed).substream(r), batch_size=batch_size
                )
                out[(K, n)] = min(out[(K, n)], sec)
    return out


def untrained_models(n_neurons: int, T: int, cfg: Optional[MiniatureConfig] = None):
    """Freshly initialized AE and ET; latency does not depend on the weights."""
    from .autoencoder import build_ae
    from .energy_transformer import build_et

    cfg = cfg or MiniatureConfig()
    dtype = pipeline.torch_dtype(cfg.dtype)
    rng = seeded_rng(cfg.seed)
    ae = build_ae(n_neurons, cfg.ae, rng.substream(0), dtype).eval()
    et = build_et(cfg.ae.num_latents, T, cfg.et, rng.substream(1), dtype=dtype).eval()
    return et, ae

