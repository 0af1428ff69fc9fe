"""Glue between the stages: simulate -> train AE -> train EAG -> sample -> decode."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict
from typing import Callable, Optional

import numpy as np
import torch

from .autoencoder import AEConfig, AEModel, decode_dataset, encode_dataset, train_autoencoder
from .config import RunConfig
from .energy_transformer import (
    BehaviorCondition,
    EnergyTransformer,
    ETConfig,
    GuidanceConfig,
    build_et,
    sample_conditional,
    sample_unconditional,
    training_step,
)
from .lorenz import LorenzParams, TrialDataset, make_lorenz_dataset, sample_poisson_spikes
from .numerics import RandomStream, seeded_rng
from .trainer import ModelCheckpoint, TrainConfig, fit, make_checkpoint

log = logging.getLogger(__name__)

# substream ids under the run seed
AE_STREAM, EAG_STREAM, SAMPLE_STREAM = 11, 12, 13


class IncompatibleCheckpointError(ValueError):
    pass


def simulate(cfg: RunConfig) -> TrialDataset:
    s = cfg.lorenz
    params = LorenzParams(s.sigma, s.rho, s.beta, s.dt, s.burn_in, s.perturb_std)
    return make_lorenz_dataset(
        n_trials=s.n_trials,
        n_neurons=s.n_neurons,
        T=s.n_bins,
        seed=cfg.seed(),
        params=params,
        gain=s.gain,
        base_rate=s.base_rate,
        bin_width=s.bin_width,
        val_fraction=s.val_fraction,
        behavior=None if s.behavior in ("", "none") else s.behavior,
        velocity_noise=s.velocity_noise,
    )


def torch_dtype(name: str):
    return {"float64": torch.float64, "float32": torch.float32}[name]


# ---------------------------------------------------------------------------
# stage 1


def train_ae_stage(
    ds: TrialDataset,
    ae_cfg: AEConfig,
    train_cfg: TrainConfig,
    seed: int,
    dtype=torch.float64,
    on_epoch: Optional[Callable] = None,
    resume: Optional[ModelCheckpoint] = None,
) -> tuple[AEModel, ModelCheckpoint, list]:
    rng = seeded_rng(seed).substream(AE_STREAM).substream(train_cfg.seed)
    model, result = train_autoencoder(ds, ae_cfg, train_cfg, rng, dtype=dtype, on_epoch=on_epoch, resume=resume)
    ckpt = make_checkpoint(
        "ae",
        {"autoencoder": asdict(ae_cfg), "train": asdict(train_cfg), "n_neurons": ds.n_neurons, "dtype": str(dtype)[6:]},
        model,
        optimizer=result.optimizer,
        epoch=result.last_epoch + 1,
        val_metric=result.best_val,
        extra={"best_epoch": result.best_epoch},
    )
    return model, ckpt, result.log


def ae_from_checkpoint(ckpt: ModelCheckpoint) -> AEModel:
    cfg = AEConfig(**ckpt.config["autoencoder"])
    dtype = torch_dtype(ckpt.config.get("dtype", "float64"))
    model = AEModel(ckpt.config["n_neurons"], cfg).to(dtype)
    model.load_state_dict(ckpt.model_state(dtype))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# stage 2


def dataset_latents(ae: AEModel, ds: TrialDataset) -> np.ndarray:
    """(trials, T, d) latents of every trial."""
    return encode_dataset(ae, ds.spikes).transpose(0, 2, 1)


def condition_of(ds: TrialDataset, idx=None) -> Optional[BehaviorCondition]:
    if ds.behavior is None:
        return None
    beh = ds.behavior if idx is None else ds.behavior[idx]
    if ds.behavior_kind == "angle":
        return BehaviorCondition("angle", angle=beh)
    return BehaviorCondition("velocity", velocity=beh)


def train_eag_stage(
    ds: TrialDataset,
    ae: AEModel,
    et_cfg: ETConfig,
    train_cfg: TrainConfig,
    seed: int,
    guidance: Optional[GuidanceConfig] = None,
    conditional: bool = False,
    dtype=torch.float64,
    resume: Optional[ModelCheckpoint] = None,
    on_epoch: Optional[Callable] = None,
    latents: Optional[np.ndarray] = None,
) -> tuple[EnergyTransformer, ModelCheckpoint, list]:
    """Train the energy transformer on AE latents of the train split.

    ``latents`` may carry precomputed (trials, T, d) latents for ``ds``.
    """
    rng = seeded_rng(seed).substream(EAG_STREAM).substream(train_cfg.seed)
    train = ds.by_split(0)
    if train.n_trials == 0:
        raise ValueError("no training trials")
    if latents is None:
        z = dataset_latents(ae, train)
    else:
        z = latents[ds.split == 0]
    kind = ds.behavior_kind if conditional else None
    if conditional and ds.behavior is None:
        raise ValueError("conditional training needs behavior labels")

    model = build_et(z.shape[2], ds.n_bins, et_cfg, rng.substream(0), condition_kind=kind, dtype=dtype)
    with torch.no_grad():
        model.latent_mean.copy_(torch.from_numpy(z.mean(axis=(0, 1))))
        model.latent_std.copy_(torch.from_numpy(z.std(axis=(0, 1)) + 1e-6))
    start_epoch, opt_state = 0, None
    if resume is not None:
        model.load_state_dict(resume.model_state(dtype))
        start_epoch, opt_state = resume.epoch, resume.optimizer_state()

    z_t = model.normalize(torch.from_numpy(z).to(dtype))
    idx_t = torch.arange(len(z_t))
    guidance = guidance or GuidanceConfig()

    def loss_fn(m, batch, r):
        zb, ib = batch
        cond = condition_of(train, ib.numpy()) if conditional else None
        return training_step(m, zb, r, cond, guidance)

    result = fit(
        model,
        (z_t, idx_t),
        loss_fn,
        train_cfg,
        rng.substream(1),
        start_epoch=start_epoch,
        optimizer_state=opt_state,
        on_epoch=on_epoch,
        keep="last",
    )
    model.load_state_dict(result.best_state)
    model.eval()
    ckpt = make_checkpoint(
        "eag",
        {
            "energy_transformer": asdict(et_cfg),
            "train": asdict(train_cfg),
            "guidance": asdict(guidance),
            "latent_dim": int(z.shape[2]),
            "max_len": ds.n_bins,
            "condition_kind": kind,
            "dtype": str(dtype)[6:],
        },
        model,
        optimizer=result.optimizer,
        epoch=result.last_epoch + 1,
        val_metric=result.best_val,
    )
    return model, ckpt, result.log


def et_from_checkpoint(ckpt: ModelCheckpoint) -> EnergyTransformer:
    c = ckpt.config
    dtype = torch_dtype(c.get("dtype", "float64"))
    model = EnergyTransformer(c["latent_dim"], c["max_len"], ETConfig(**c["energy_transformer"]), c["condition_kind"])
    model = model.to(dtype)
    model.load_state_dict(ckpt.model_state(dtype))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# generation


def generate(
    et: EnergyTransformer,
    ae: AEModel,
    count: int,
    T: int,
    steps: int,
    temperature: float,
    rng: RandomStream,
    condition: Optional[BehaviorCondition] = None,
    guidance: Optional[GuidanceConfig] = None,
    batch_size: int = 256,
    bin_width: float = 0.005,
) -> tuple[TrialDataset, float]:
    """Sample latents, decode to rates, draw spikes. Returns (dataset, seconds spent sampling latents)."""
    if et.latent_dim != ae.config.num_latents:
        raise IncompatibleCheckpointError(
            f"energy transformer latent dim {et.latent_dim} != autoencoder latent dim {ae.config.num_latents}"
        )
    if condition is not None and et.condition_kind is None:
        raise IncompatibleCheckpointError("conditional sampling needs a condition-trained checkpoint")
    latents, elapsed = [], 0.0
    for b, start in enumerate(range(0, count, batch_size)):
        n = min(batch_size, count - start)
        r = rng.substream(b)
        t0 = time.perf_counter()
        if condition is None:
            z = sample_unconditional(et, n, T, steps, temperature, r)
        else:
            sub = condition.subset(np.arange(start, start + n))
            z = sample_conditional(et, sub, guidance or GuidanceConfig(), T, steps, temperature, r)
        elapsed += time.perf_counter() - t0
        latents.append(z.to(torch.float64).numpy())
    z = np.concatenate(latents).transpose(0, 2, 1)
    rates = decode_dataset(ae, z)
    spikes = sample_poisson_spikes(rates, rng.substream(10**6))
    beh = None if condition is None else condition.payload
    ds = TrialDataset(
        spikes=spikes,
        bin_width=bin_width,
        rates=rates,
        behavior=beh,
        behavior_kind=None if condition is None else condition.kind,
        meta={"source": "eag", "steps": steps, "temperature": temperature},
    )
    return ds, elapsed


def reconstruct(ae: AEModel, ds: TrialDataset, rng: RandomStream) -> TrialDataset:
    """Autoencoder reconstruction of ``ds`` with fresh Poisson spikes."""
    rates = decode_dataset(ae, encode_dataset(ae, ds.spikes))
    return TrialDataset(spikes=sample_poisson_spikes(rates, rng), bin_width=ds.bin_width, rates=rates)


def rate_doubled(ds: TrialDataset, rng: RandomStream) -> TrialDataset:
    """Control dataset: every ground-truth rate doubled, spikes redrawn."""
    rates = 2.0 * ds.rates
    return TrialDataset(spikes=sample_poisson_spikes(rates, rng), bin_width=ds.bin_width, rates=rates)
