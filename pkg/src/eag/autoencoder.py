"""Stage 1: spike trains <-> low-dimensional latent sequences.

Encoder and decoder are input MLP -> stack of temporal-mixing blocks -> output
MLP. Each block filters every channel with a learned bidirectional depthwise
kernel, then mixes channels with a GELU MLP. The decoder ends in ``exp`` so
rates are strictly positive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lorenz import TrialDataset
from .numerics import RandomStream
from .trainer import FitResult, TrainConfig, fit


@dataclass
class AEConfig:
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    embed_dim: int = 256
    num_latents: int = 8
    dropout_prob: float = 0.25
    kernel_size: int = 17
    smoothness_weight: float = 1e-3

    def __post_init__(self):
        for name in ("encoder_blocks", "decoder_blocks", "embed_dim", "num_latents", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.dropout_prob < 1:
            # p = 0 would leave coordinated dropout with no bins to score
            raise ValueError("dropout_prob must be in (0, 1)")


class BidirectionalDepthwiseConv(nn.Module):
    """Per-channel LTI filter run forward in time plus a second one run backward."""

    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        self.k = kernel_size
        self.fwd = nn.Conv1d(channels, channels, kernel_size, groups=channels, bias=True)
        self.bwd = nn.Conv1d(channels, channels, kernel_size, groups=channels, bias=False)

    def forward(self, x):  # x: (B, C, T)
        causal = self.fwd(F.pad(x, (self.k - 1, 0)))
        anti = self.bwd(F.pad(x.flip(-1), (self.k - 1, 0))).flip(-1)
        return causal + anti


class TemporalBlock(nn.Module):
    def __init__(self, dim: int, kernel_size: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.conv = BidirectionalDepthwiseConv(dim, kernel_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):  # x: (B, T, C)
        h = self.norm1(x).transpose(1, 2)
        x = x + F.gelu(self.conv(h)).transpose(1, 2)
        return x + self.mlp(self.norm2(x))


def _stack(in_dim, out_dim, dim, blocks, kernel):
    return nn.ModuleDict(
        {
            "inp": nn.Sequential(nn.Linear(in_dim, dim), nn.GELU(), nn.Linear(dim, dim)),
            "blocks": nn.ModuleList([TemporalBlock(dim, kernel) for _ in range(blocks)]),
            "norm": nn.LayerNorm(dim),
            "out": nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_dim)),
        }
    )


def _run(stack, x):
    h = stack["inp"](x)
    for blk in stack["blocks"]:
        h = blk(h)
    return stack["out"](stack["norm"](h))


class AEModel(nn.Module):
    def __init__(self, n_neurons: int, config: AEConfig):
        super().__init__()
        if config.num_latents >= n_neurons:
            raise ValueError("num_latents must be smaller than the neuron count")
        self.n_neurons = n_neurons
        self.config = config
        c = config
        self.encoder = _stack(n_neurons, c.num_latents, c.embed_dim, c.encoder_blocks, c.kernel_size)
        self.decoder = _stack(c.num_latents, n_neurons, c.embed_dim, c.decoder_blocks, c.kernel_size)

    def encode(self, spikes: torch.Tensor) -> torch.Tensor:
        """(B, n, T) counts -> (B, d, T) latents."""
        if spikes.shape[-2] != self.n_neurons:
            raise ValueError(f"expected {self.n_neurons} neurons, got {spikes.shape[-2]}")
        x = spikes.to(self._dtype).transpose(-1, -2)
        return _run(self.encoder, x).transpose(-1, -2)

    def log_rates(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-2] != self.config.num_latents:
            raise ValueError(f"expected {self.config.num_latents} latent channels, got {latents.shape[-2]}")
        z = latents.to(self._dtype).transpose(-1, -2)
        return _run(self.decoder, z).transpose(-1, -2)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, d, T) latents -> (B, n, T) strictly positive rates."""
        return torch.exp(self.log_rates(latents))

    @property
    def _dtype(self):
        return next(self.parameters()).dtype

    def init_rate_bias(self, mean_rate: np.ndarray) -> None:
        with torch.no_grad():
            self.decoder["out"][-1].bias.copy_(torch.as_tensor(np.log(np.maximum(mean_rate, 1e-3))))


def build_ae(n_neurons: int, config: AEConfig, rng: RandomStream, dtype=torch.float64) -> AEModel:
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(0, 2**63 - 1)))
        model = AEModel(n_neurons, config)
    return model.to(dtype)


def poisson_nll(rates, spikes, mask=None) -> torch.Tensor:
    """Mean of ``rate - count*log(rate) + log(count!)`` over bins where ``mask`` is set."""
    rates = torch.as_tensor(rates)
    if not rates.is_floating_point():
        rates = rates.to(torch.float64)
    sel = torch.ones_like(rates, dtype=torch.bool) if mask is None else torch.as_tensor(mask).bool().expand_as(rates)
    if (rates[sel] <= 0).any():
        raise ValueError("rates must be positive wherever the mask is set")
    log_r = torch.log(torch.where(sel, rates, torch.ones_like(rates)))
    return _nll(rates, log_r, spikes, mask)


def poisson_nll_from_log(log_rates: torch.Tensor, spikes, mask=None) -> torch.Tensor:
    return _nll(torch.exp(log_rates), log_rates, spikes, mask)


def _nll(rates, log_r, spikes, mask):
    counts = torch.as_tensor(spikes).to(log_r.dtype)
    per_bin = rates - counts * log_r + torch.lgamma(counts + 1)
    if mask is None:
        return per_bin.mean()
    m = torch.as_tensor(mask).to(per_bin.dtype).expand_as(per_bin)
    return (per_bin * m).sum() / m.sum().clamp_min(1.0)


def coordinated_dropout_mask(shape, drop_prob: float, rng: RandomStream) -> np.ndarray:
    """Binary mask, 1 on dropped bins. The last two axes are (n, T) and the
    drop decision is shared across the neuron axis."""
    if not 0 <= drop_prob < 1:
        raise ValueError("drop_prob must be in [0, 1)")
    *lead, n, T = shape
    draws = rng.uniform(size=(*lead, 1, T)) < drop_prob
    return np.broadcast_to(draws, shape).astype(np.uint8)


def ae_loss(model: AEModel, spikes: torch.Tensor, rng: RandomStream) -> torch.Tensor:
    """Coordinated-dropout Poisson NLL plus the latent smoothness penalty."""
    c = model.config
    mask = torch.from_numpy(coordinated_dropout_mask(tuple(spikes.shape), c.dropout_prob, rng).copy())
    keep = 1.0 - mask.to(model._dtype)
    # inverted-dropout scaling keeps the input scale of train and eval aligned
    z = model.encode(spikes.to(model._dtype) * keep / (1.0 - c.dropout_prob))
    log_r = model.log_rates(z)
    nll = poisson_nll_from_log(log_r, spikes, mask)
    smooth = (z[..., 1:] - z[..., :-1]).pow(2).mean()
    return nll + c.smoothness_weight * smooth


@torch.no_grad()
def full_nll(model: AEModel, spikes: torch.Tensor, batch_size: int = 512) -> float:
    total = 0.0
    for i in range(0, len(spikes), batch_size):
        s = spikes[i : i + batch_size]
        total += float(poisson_nll_from_log(model.log_rates(model.encode(s)), s)) * len(s)
    return total / len(spikes)


def constant_rate_nll(train_spikes: np.ndarray, eval_spikes: np.ndarray) -> float:
    """Poisson NLL of predicting every bin by its neuron's empirical mean rate."""
    mean = np.maximum(train_spikes.mean(axis=(0, 2)), 1e-8)[None, :, None]
    rates = np.broadcast_to(mean, eval_spikes.shape)
    return float(poisson_nll(torch.from_numpy(np.ascontiguousarray(rates)), torch.from_numpy(eval_spikes)))


def train_autoencoder(
    dataset: TrialDataset,
    config: AEConfig,
    schedule: TrainConfig,
    rng: RandomStream,
    dtype=torch.float64,
    on_epoch=None,
    resume=None,
) -> tuple[AEModel, FitResult]:
    """Fit on the train split, keep the best validation-NLL parameters.

    If the dataset has no validation trials the training set doubles as one.
    ``resume`` is a ModelCheckpoint whose weights, optimizer moments and epoch
    counter are picked up.
    """
    if dataset.n_trials == 0:
        raise ValueError("dataset is empty")
    train = dataset.by_split(0)
    val = dataset.by_split(1)
    if val.n_trials == 0:
        val = train
    model = build_ae(dataset.n_neurons, config, rng.substream(0), dtype)
    model.init_rate_bias(train.spikes.mean(axis=(0, 2)))
    start_epoch, opt_state = 0, None
    if resume is not None:
        model.load_state_dict(resume.model_state(dtype))
        start_epoch, opt_state = resume.epoch, resume.optimizer_state()
    train_t = torch.from_numpy(train.spikes.astype(np.float64)).to(dtype)
    val_t = torch.from_numpy(val.spikes.astype(np.float64)).to(dtype)

    result = fit(
        model,
        (train_t,),
        lambda m, batch, r: ae_loss(m, batch[0], r),
        schedule,
        rng.substream(1),
        val_fn=lambda m: full_nll(m, val_t),
        start_epoch=start_epoch,
        optimizer_state=opt_state,
        on_epoch=on_epoch,
    )
    model.load_state_dict(result.best_state)
    model.eval()
    return model, result


@torch.no_grad()
def encode_dataset(model: AEModel, spikes: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(spikes), batch_size):
        s = torch.from_numpy(np.asarray(spikes[i : i + batch_size], dtype=np.float64))
        out.append(model.encode(s).to(torch.float64).numpy())
    return np.concatenate(out)


@torch.no_grad()
def decode_dataset(model: AEModel, latents: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(latents), batch_size):
        z = torch.from_numpy(np.asarray(latents[i : i + batch_size], dtype=np.float64))
        out.append(model.decode(z).to(torch.float64).numpy())
    return np.concatenate(out)


def ae_config_dict(config: AEConfig) -> dict:
    return asdict(config)
