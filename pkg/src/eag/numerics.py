"""Seeded random streams and a finite-difference gradient checker.

Dense tensors and reverse-mode differentiation come from torch; this module
only adds the reproducibility and verification pieces the training code needs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable

import numpy as np
import torch

MASK64 = (1 << 64) - 1


class RandomStream:
    """Counter-based (Philox) random stream keyed by ``(seed, stream_id)``.

    Distinct stream ids give non-overlapping Philox keys, so substreams can be
    handed to workers without coordination.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        # Philox key is 128 bits: (seed, stream_id) fills it directly.
        self._bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self.gen = np.random.Generator(self._bitgen)

    def substream(self, stream_id: int) -> "RandomStream":
        # mix the parent id in so substreams of substreams stay distinct
        child = (self.stream_id * 0x9E3779B97F4A7C15 + int(stream_id) + 1) & MASK64
        return RandomStream(self.seed, child)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def poisson(self, lam, size=None) -> np.ndarray:
        return self.gen.poisson(lam, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def torch_uniform(self, shape, low=-0.5, high=0.5, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.gen.uniform(low, high, shape)).to(dtype)

    def torch_normal(self, shape, std=1.0, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.gen.normal(0.0, std, shape)).to(dtype)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "bitgen": self._bitgen.state}

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state["bitgen"]

    @classmethod
    def from_state(cls, state: dict) -> "RandomStream":
        rs = cls(state["seed"], state["stream_id"])
        rs.set_state(state)
        return rs


def seeded_rng(seed: int, stream_id: int = 0) -> RandomStream:
    return RandomStream(seed, stream_id)


@contextlib.contextmanager
def deterministic_reductions():
    """Run torch ops on one intra-op thread so float reductions associate the
    same way whatever thread count the caller asked for."""
    threads = torch.get_num_threads()
    was_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(was_det)
        torch.set_num_threads(threads)


def grad_check(
    loss: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss`` maps a flat float64 parameter vector to a scalar tensor. The
    relative error of each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = params.detach().clone().to(torch.float64).reshape(-1).requires_grad_(True)
    value = loss(p)
    if not torch.isfinite(value):
        raise FloatingPointError("loss is non-finite at the base point")
    (analytic,) = torch.autograd.grad(value, p, allow_unused=True)
    analytic = torch.zeros_like(p) if analytic is None else analytic.detach()

    worst = 0.0
    base = p.detach()
    with torch.no_grad():
        for i in range(base.numel()):
            probe = base.clone()
            probe[i] += eps
            up = float(loss(probe))
            probe[i] -= 2 * eps
            down = float(loss(probe))
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss when perturbing parameter index {i}")
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def flatten_params(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class _Closure(torch.nn.Module):
    def __init__(self, module, closure):
        super().__init__()
        self.module = module
        self.closure = closure

    def forward(self):
        return self.closure(self.module)


def module_loss_fn(module: torch.nn.Module, closure: Callable[[torch.nn.Module], torch.Tensor]):
    """Turn ``closure(module) -> scalar`` into a function of one flat parameter vector."""
    named = list(module.named_parameters())
    sizes = [p.numel() for _, p in named]
    wrapper = _Closure(module, closure)

    def fn(flat: torch.Tensor) -> torch.Tensor:
        chunks = torch.split(flat, sizes)
        params = {f"module.{n}": c.reshape(p.shape) for (n, p), c in zip(named, chunks)}
        return torch.func.functional_call(wrapper, params, ())

    return fn
