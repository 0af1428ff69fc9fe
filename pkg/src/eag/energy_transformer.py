"""Stage 2: masked autoregressive transformer over latent sequences.

The backbone is an MAE-style encoder/decoder: the encoder sees only visible
latent positions (plus a learned start token and any condition tokens), the
decoder re-inserts a learned mask token at the hidden positions. Per-position
decoder features drive a small MLP generator that turns uniform noise into a
latent sample through noise-modulated layer norms. Training minimizes the
two-sample energy score estimate; sampling unmasks positions on a cosine
schedule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import RandomStream


@dataclass
class ETConfig:
    embed_dim: int = 256
    encoder_depth: int = 4
    decoder_depth: int = 4
    num_heads: int = 4
    ff_ratio: float = 4.0
    mlp_depth: int = 6
    mlp_width: int = 768
    noise_dim: int = 64
    alpha: float = 1.0
    mask_ratio_min: float = 0.7
    mask_ratio_max: float = 1.0
    train_temperature: float = 1.0
    infer_temperature: float = 0.7
    noise_per_position: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 2:
            raise ValueError("alpha must be in (0, 2]")
        if not 0 <= self.mask_ratio_min <= self.mask_ratio_max <= 1:
            raise ValueError("need 0 <= mask_ratio_min <= mask_ratio_max <= 1")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")


@dataclass
class GuidanceConfig:
    gamma: float = 4.0
    null_dropout_prob: float = 0.1

    def __post_init__(self):
        if not 0 <= self.null_dropout_prob < 1:
            raise ValueError("null_dropout_prob must be in [0, 1)")


@dataclass
class BehaviorCondition:
    """Batched behavior labels: ``angle`` is (B,) radians, ``velocity`` is (B, 2, T)."""

    kind: str
    angle: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "angle":
            ok = self.angle is not None and self.velocity is None
        elif self.kind == "velocity":
            ok = self.velocity is not None and self.angle is None
        else:
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if not ok:
            raise ValueError("exactly the payload matching `kind` must be set")

    @property
    def payload(self) -> np.ndarray:
        return self.angle if self.kind == "angle" else self.velocity

    def __len__(self):
        return len(self.payload)

    def subset(self, idx) -> "BehaviorCondition":
        if self.kind == "angle":
            return BehaviorCondition("angle", angle=np.asarray(self.angle)[idx])
        return BehaviorCondition("velocity", velocity=np.asarray(self.velocity)[idx])


# ---------------------------------------------------------------------------
# energy score


def energy_loss(z1, z2, z_data, alpha: float = 1.0) -> torch.Tensor:
    """Two-sample energy score estimate, averaged over all leading axes.

    ``||z1 - z||^a + ||z2 - z||^a - ||z1 - z2||^a`` with Euclidean norms over
    the last axis.
    """
    if not 0 < alpha <= 2:
        raise ValueError("alpha must be in (0, 2]")
    z1, z2, z_data = (torch.as_tensor(t) for t in (z1, z2, z_data))
    if z1.dim() == 0:
        z1, z2, z_data = z1[None], z2[None], z_data[None]

    def dist(a, b):
        return torch.linalg.vector_norm(a - b, dim=-1).pow(alpha)

    return (dist(z1, z_data) + dist(z2, z_data) - dist(z1, z2)).mean()


# ---------------------------------------------------------------------------
# building blocks


class Attention(nn.Module):
    # no key bias: softmax over keys is invariant to it, so it would be a dead parameter
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, keep=None):
        B, L, D = x.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(x, self.qkv.weight, bias)
        q, k, v = qkv.reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // self.heads)
        if keep is not None:
            scores = scores.masked_fill(~keep[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    """Pre-norm transformer block with bidirectional attention."""

    def __init__(self, dim: int, heads: int, ff_ratio: float):
        super().__init__()
        hidden = int(dim * ff_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, keep=None):
        x = x + self.attn(self.norm1(x), keep)
        return x + self.mlp(self.norm2(x))


class AdaLNBlock(nn.Module):
    """Residual block whose layer norm is shifted/scaled and whose output is
    gated by linear maps of the noise embedding."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.modulation = nn.Linear(width, 3 * width)
        self.ffn = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.zero_gate = False  # test hook

    def forward(self, h, noise_emb):
        shift, scale, gate = self.modulation(noise_emb).chunk(3, dim=-1)
        if self.zero_gate:
            gate = torch.zeros_like(gate)
        h_eps = (1 + scale) * self.norm(h) + shift
        return h + gate * self.ffn(h_eps)


class MLPGenerator(nn.Module):
    """Maps (context feature, noise) -> one latent sample."""

    def __init__(self, in_dim: int, out_dim: int, width: int, depth: int, noise_dim: int):
        super().__init__()
        self.noise_dim = noise_dim
        self.inp = nn.Linear(in_dim, width)
        self.noise_embed = nn.Sequential(nn.Linear(noise_dim, width), nn.SiLU())
        self.blocks = nn.ModuleList([AdaLNBlock(width) for _ in range(depth)])
        self.final_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, out_dim)

    def forward(self, h, eps):
        e = self.noise_embed(eps)
        x = self.inp(h)
        for blk in self.blocks:
            x = blk(x, e)
        return self.out(self.final_norm(x))


# ---------------------------------------------------------------------------
# model


class EnergyTransformer(nn.Module):
    def __init__(self, latent_dim: int, max_len: int, config: ETConfig, condition_kind: Optional[str] = None):
        super().__init__()
        if condition_kind not in (None, "angle", "velocity"):
            raise ValueError(f"unknown condition kind {condition_kind!r}")
        self.latent_dim = latent_dim
        self.max_len = max_len
        self.config = config
        self.condition_kind = condition_kind
        E = config.embed_dim

        self.latent_proj = nn.Linear(latent_dim, E)
        self.enc_pos = nn.Parameter(0.02 * torch.randn(1, max_len, E))
        self.start_token = nn.Parameter(0.02 * torch.randn(1, 1, E))
        if condition_kind == "angle":
            self.cond_embed = nn.Linear(2, E)
            self.cond_pos = nn.Parameter(0.02 * torch.randn(1, 1, E))
        elif condition_kind == "velocity":
            self.cond_embed = nn.Sequential(nn.Linear(2, E), nn.GELU(), nn.Linear(E, E))
            self.cond_pos = nn.Parameter(0.02 * torch.randn(1, max_len, E))
        if condition_kind is not None:
            self.null_token = nn.Parameter(0.02 * torch.randn(1, 1, E))
        self.encoder = nn.ModuleList([Block(E, config.num_heads, config.ff_ratio) for _ in range(config.encoder_depth)])
        self.enc_norm = nn.LayerNorm(E)

        self.dec_embed = nn.Linear(E, E)
        self.mask_token = nn.Parameter(0.02 * torch.randn(1, 1, E))
        self.dec_pos = nn.Parameter(0.02 * torch.randn(1, max_len, E))
        self.decoder = nn.ModuleList([Block(E, config.num_heads, config.ff_ratio) for _ in range(config.decoder_depth)])
        self.dec_norm = nn.LayerNorm(E)

        self.head = MLPGenerator(E, latent_dim, config.mlp_width, config.mlp_depth, config.noise_dim)
        # latent standardization, filled from training data
        self.register_buffer("latent_mean", torch.zeros(latent_dim))
        self.register_buffer("latent_std", torch.ones(latent_dim))

    @property
    def dtype(self):
        return self.latent_proj.weight.dtype

    # -- inputs ---------------------------------------------------------------

    def embed_latents(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, d) -> (B, T, E): linear projection plus learned positions."""
        T = z.shape[1]
        return self.latent_proj(z.to(self.dtype)) + self.enc_pos[:, :T]

    def condition_features(self, condition: BehaviorCondition) -> torch.Tensor:
        """Raw per-token inputs: (B, 1, 2) of (cos, sin) or (B, T, 2) velocities."""
        if condition.kind != self.condition_kind:
            raise ValueError(f"model expects {self.condition_kind!r} conditions, got {condition.kind!r}")
        if condition.kind == "angle":
            a = torch.as_tensor(np.asarray(condition.angle, dtype=np.float64)).to(self.dtype)
            return torch.stack([torch.cos(a), torch.sin(a)], dim=-1)[:, None, :]
        v = torch.as_tensor(np.asarray(condition.velocity, dtype=np.float64)).to(self.dtype)
        return v.transpose(1, 2)

    def embed_condition(self, condition: Optional[BehaviorCondition], use_null=None, batch: int = 1, T: int = 1):
        """Condition tokens (B, C, E); rows flagged in ``use_null`` get the null token.

        ``condition=None`` with ``use_null=True`` returns the all-null tokens.
        """
        if self.condition_kind is None:
            return None
        C = 1 if self.condition_kind == "angle" else T
        pos = self.cond_pos[:, :C]
        null = self.null_token.expand(batch, C, -1) + pos
        if condition is None:
            return null
        tokens = self.cond_embed(self.condition_features(condition)) + pos
        if use_null is None:
            return tokens
        flag = torch.as_tensor(use_null, dtype=torch.bool).reshape(-1, 1, 1)
        return torch.where(flag, null, tokens)

    # -- backbone -------------------------------------------------------------

    def encode_visible(self, tokens: torch.Tensor, visible: torch.Tensor, cond_tokens=None):
        """Run the encoder on [start, condition tokens, visible latent tokens].

        Masked positions are physically dropped: each row gathers its visible
        tokens (in time order) into a padded block of width max-visible, and
        padding is excluded from attention. Returns the encoded sequence, its
        validity mask, and the gather index used.
        """
        B, T, E = tokens.shape
        visible = visible.bool()
        counts = visible.sum(dim=1)
        width = int(counts.max()) if B else 0
        # stable sort: visible positions first, in time order
        order = torch.argsort((~visible).to(torch.int8), dim=1, stable=True)
        idx = order[:, :width]
        gathered = torch.gather(tokens, 1, idx[..., None].expand(-1, -1, E))
        keep_vis = torch.arange(width)[None, :] < counts[:, None]

        prefix = [self.start_token.expand(B, -1, -1)]
        if cond_tokens is not None:
            prefix.append(cond_tokens)
        prefix = torch.cat(prefix, dim=1)
        x = torch.cat([prefix, gathered], dim=1)
        keep = torch.cat([torch.ones(B, prefix.shape[1], dtype=torch.bool), keep_vis], dim=1)
        for blk in self.encoder:
            x = blk(x, keep)
        return self.enc_norm(x), keep, idx, prefix.shape[1]

    def decode_with_masks(self, encoded, keep, idx, n_prefix: int, visible: torch.Tensor) -> torch.Tensor:
        """Scatter encoded visible tokens back to their positions, fill the rest
        with the mask token, and run the decoder. Returns (B, T, E) features."""
        B, T = visible.shape
        x = self.dec_embed(encoded)
        prefix, vis = x[:, :n_prefix], x[:, n_prefix:]
        E = x.shape[-1]
        vis = vis * keep[:, n_prefix:, None].to(vis.dtype)
        scattered = torch.zeros(B, T, E, dtype=x.dtype).scatter(1, idx[..., None].expand(-1, -1, E), vis)
        full = torch.where(visible.bool()[..., None], scattered, self.mask_token.expand(B, T, -1))
        full = full + self.dec_pos[:, :T]
        y = torch.cat([prefix, full], dim=1)
        for blk in self.decoder:
            y = blk(y)
        return self.dec_norm(y)[:, n_prefix:]

    def features(self, z, visible, condition=None, use_null=None) -> torch.Tensor:
        """Decoder features h for every position given normalized latents ``z``
        (B, T, d) and a visibility mask (B, T)."""
        B, T, _ = z.shape
        tokens = self.embed_latents(z)
        cond = self.embed_condition(condition, use_null, batch=B, T=T)
        enc, keep, idx, n_prefix = self.encode_visible(tokens, visible, cond)
        return self.decode_with_masks(enc, keep, idx, n_prefix, visible)

    def mlp_generate(self, h, eps) -> torch.Tensor:
        return self.head(h, eps.to(self.dtype))

    def normalize(self, z):
        return (z - self.latent_mean) / self.latent_std

    def denormalize(self, z):
        return z * self.latent_std + self.latent_mean


def build_et(latent_dim: int, max_len: int, config: ETConfig, rng: RandomStream, condition_kind=None, dtype=torch.float64):
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(0, 2**63 - 1)))
        model = EnergyTransformer(latent_dim, max_len, config, condition_kind)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# training


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def sample_train_masks(B: int, T: int, config: ETConfig, rng: RandomStream) -> np.ndarray:
    """(B, T) bool, True = masked (to be predicted). At least one position is masked."""
    ratios = rng.uniform(config.mask_ratio_min, config.mask_ratio_max, size=B)
    masked = np.zeros((B, T), dtype=bool)
    for b in range(B):
        m = min(max(round_half_away(ratios[b] * T), 1), T)
        masked[b, rng.permutation(T)[:m]] = True
    return masked


def _noise(shape, rng: RandomStream, temperature: float, dtype) -> torch.Tensor:
    return rng.torch_uniform(shape, -0.5, 0.5, dtype=dtype) * temperature


def training_step(
    model: EnergyTransformer,
    z: torch.Tensor,
    rng: RandomStream,
    condition: Optional[BehaviorCondition] = None,
    guidance: Optional[GuidanceConfig] = None,
    masked: Optional[np.ndarray] = None,
    targets: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Energy loss for one batch of normalized latents ``z`` (B, T, d).

    ``masked`` overrides the random mask draw; ``targets`` overrides the
    ground-truth latents the loss compares against (defaults to ``z``).
    """
    c = model.config
    B, T, d = z.shape
    if B == 0:
        raise ValueError("empty batch")
    if masked is None:
        masked = sample_train_masks(B, T, c, rng)
    masked_t = torch.as_tensor(masked, dtype=torch.bool)
    use_null = None
    if condition is not None:
        p = (guidance or GuidanceConfig()).null_dropout_prob
        use_null = rng.uniform(size=B) < p
    h = model.features(z, ~masked_t, condition, use_null)

    h_sel = h[masked_t]
    target = (z if targets is None else targets).to(model.dtype)[masked_t]
    M = h_sel.shape[0]
    if c.noise_per_position:
        eps1 = _noise((M, c.noise_dim), rng, c.train_temperature, model.dtype)
        eps2 = _noise((M, c.noise_dim), rng, c.train_temperature, model.dtype)
    else:
        rows = masked_t.nonzero()[:, 0]
        eps1 = _noise((B, c.noise_dim), rng, c.train_temperature, model.dtype)[rows]
        eps2 = _noise((B, c.noise_dim), rng, c.train_temperature, model.dtype)[rows]
    z1 = model.mlp_generate(h_sel, eps1)
    z2 = model.mlp_generate(h_sel, eps2)
    loss = energy_loss(z1, z2, target, c.alpha)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite energy loss")
    return loss


# ---------------------------------------------------------------------------
# sampling


def cosine_mask_counts(T: int, K: int) -> np.ndarray:
    """Masked-position counts for steps 0..K: ``round(T cos(pi/2 k/K))``,
    clamped to be nonincreasing with endpoints T and 0."""
    if not 1 <= K:
        raise ValueError("K must be >= 1")
    if K > T:
        raise ValueError(f"K={K} exceeds sequence length T={T}")
    x = T * np.cos(np.pi / 2 * np.arange(K + 1) / K)
    # round half away from zero; x is nonnegative up to float error at k = K
    m = np.floor(np.abs(x) + 0.5) * np.sign(x)
    m[0] = T
    m = np.minimum.accumulate(np.maximum(m, 0))
    m[-1] = 0
    return m.astype(np.int64)


def _guided_features(model, z, visible, condition, gamma):
    if condition is None:
        return model.features(z, visible)
    h_c = model.features(z, visible, condition)
    h_u = model.features(z, visible, condition=None, use_null=True)
    return cfg_combine(h_c, h_u, gamma)


def cfg_combine(h_c: torch.Tensor, h_u: torch.Tensor, gamma: float) -> torch.Tensor:
    return gamma * h_c + (1.0 - gamma) * h_u


@torch.no_grad()
def _sample(model, n, T, K, temperature, rng, condition=None, gamma=1.0, orders=None):
    c = model.config
    counts = cosine_mask_counts(T, K)
    z = torch.zeros(n, T, model.latent_dim, dtype=model.dtype)
    committed = torch.zeros(n, T, dtype=torch.bool)
    if orders is None:
        orders = np.stack([rng.permutation(T) for _ in range(n)]) if n else np.zeros((0, T), dtype=np.int64)
    orders = torch.as_tensor(orders, dtype=torch.long)
    rows = torch.arange(n)[:, None]
    for k in range(1, K + 1):
        lo, hi = T - counts[k - 1], T - counts[k]
        if hi == lo:
            continue
        h = _guided_features(model, z, committed, condition, gamma)
        pos = orders[:, lo:hi]
        eps = _noise((n, hi - lo, c.noise_dim), rng, temperature, model.dtype)
        z[rows, pos] = model.mlp_generate(h[rows, pos], eps)
        committed[rows, pos] = True
    return model.denormalize(z)


def sample_unconditional(model, n: int, T: int, K: int, temperature: float, rng: RandomStream, orders=None):
    """Generate (n, T, d) latents by cosine-schedule progressive unmasking."""
    model.eval()
    return _sample(model, n, T, K, temperature, rng, orders=orders)


def sample_conditional(
    model,
    condition: BehaviorCondition,
    guidance: GuidanceConfig,
    T: int,
    K: int,
    temperature: float,
    rng: RandomStream,
    orders=None,
):
    """As :func:`sample_unconditional`, but every step mixes condition and
    null-condition decoder features as ``gamma*h_c + (1-gamma)*h_u``."""
    if model.condition_kind is None:
        raise ValueError("model was not trained with conditions")
    model.eval()
    return _sample(model, len(condition), T, K, temperature, rng, condition, guidance.gamma, orders)


def et_config_dict(config: ETConfig) -> dict:
    return asdict(config)
