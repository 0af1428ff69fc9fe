"""Synthetic Lorenz-attractor spiking benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import RandomStream, seeded_rng


@dataclass
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    burn_in: int = 1000
    perturb_std: float = 0.5

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass
class TrialDataset:
    """Trials sharing neuron count, length and bin width.

    ``spikes`` is (trials, n, T) integer counts, ``rates`` the matching Poisson
    intensities in expected spikes per bin. ``behavior`` is either (trials, 2, T)
    velocities or (trials,) angles in radians, tagged by ``behavior_kind``.
    ``split`` holds 0 = train, 1 = val, 2 = test per trial.
    """

    spikes: np.ndarray
    bin_width: float = 0.005
    rates: Optional[np.ndarray] = None
    behavior: Optional[np.ndarray] = None
    behavior_kind: Optional[str] = None
    split: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes)
        if self.spikes.ndim != 3:
            raise ValueError(f"spikes must be (trials, n, T), got {self.spikes.shape}")
        if (self.spikes < 0).any():
            raise ValueError("spike counts must be nonnegative")
        if self.rates is not None and self.rates.shape != self.spikes.shape:
            raise ValueError("rates shape does not match spikes")
        if self.split is None:
            self.split = np.zeros(len(self.spikes), dtype=np.uint8)
        if self.behavior is not None and self.behavior_kind not in ("velocity", "angle"):
            raise ValueError("behavior_kind must be 'velocity' or 'angle'")

    @property
    def n_trials(self) -> int:
        return self.spikes.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.spikes.shape[1]

    @property
    def n_bins(self) -> int:
        return self.spikes.shape[2]

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return TrialDataset(
            spikes=self.spikes[idx],
            bin_width=self.bin_width,
            rates=None if self.rates is None else self.rates[idx],
            behavior=None if self.behavior is None else self.behavior[idx],
            behavior_kind=self.behavior_kind,
            split=self.split[idx],
            meta=dict(self.meta),
        )

    def by_split(self, label: int) -> "TrialDataset":
        return self.subset(np.flatnonzero(self.split == label))


def _lorenz_rhs(x: np.ndarray, p: LorenzParams) -> np.ndarray:
    dx = p.sigma * (x[..., 1] - x[..., 0])
    dy = x[..., 0] * (p.rho - x[..., 2]) - x[..., 1]
    dz = x[..., 0] * x[..., 1] - p.beta * x[..., 2]
    return np.stack([dx, dy, dz], axis=-1)


def integrate_lorenz(
    x0,
    params: LorenzParams,
    steps: int,
    rng: Optional[RandomStream] = None,
) -> np.ndarray:
    """RK4 integration, returning the ``steps`` states after burn-in.

    ``x0`` is a 3-vector or a (B, 3) batch; output is (3, steps) or (B, 3, steps).
    When ``rng`` is given, ``x0`` is perturbed by Gaussian noise of std
    ``params.perturb_std`` before burn-in.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if rng is not None and params.perturb_std > 0:
        x = x + rng.normal(0.0, params.perturb_std, size=x.shape)

    h = params.dt
    out = np.empty((x.shape[0], 3, steps))
    for i in range(params.burn_in + steps):
        # overflow is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = _lorenz_rhs(x, params)
            k2 = _lorenz_rhs(x + 0.5 * h * k1, params)
            k3 = _lorenz_rhs(x + 0.5 * h * k2, params)
            k4 = _lorenz_rhs(x + h * k3, params)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"Lorenz integration diverged at step {i}")
        if i >= params.burn_in:
            out[:, :, i - params.burn_in] = x
    return out[0] if single else out


def project_to_rates(
    trajectory: np.ndarray,
    n_neurons: int,
    gain: float,
    base_rate: float,
    rng: RandomStream,
    readout_norm: float = 0.5,
) -> np.ndarray:
    """Map (trials, 3, T) or (3, T) trajectories to log-linear firing rates.

    Coordinates are standardized over the whole input, read out through one
    random (n, 3) matrix with rows of norm ``readout_norm``, and passed through
    ``exp(gain * readout + log(base_rate))``.
    """
    if n_neurons < 1:
        raise ValueError("n_neurons must be >= 1")
    traj = np.asarray(trajectory, dtype=np.float64)
    single = traj.ndim == 2
    if single:
        traj = traj[None]
    mean = traj.mean(axis=(0, 2), keepdims=True)
    std = traj.std(axis=(0, 2), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    standardized = (traj - mean) / std

    w = rng.normal(size=(n_neurons, 3))
    w *= readout_norm / np.linalg.norm(w, axis=1, keepdims=True)
    readout = np.einsum("nc,bct->bnt", w, standardized)
    rates = np.exp(gain * readout + np.log(base_rate))
    return rates[0] if single else rates


def sample_poisson_spikes(rates: np.ndarray, rng: RandomStream) -> np.ndarray:
    rates = np.asarray(rates, dtype=np.float64)
    if (rates < 0).any() or not np.isfinite(rates).all():
        raise ValueError("rates must be finite and nonnegative")
    return rng.poisson(rates).astype(np.int64)


def standardize(traj: np.ndarray) -> np.ndarray:
    mean = traj.mean(axis=(0, 2), keepdims=True)
    std = traj.std(axis=(0, 2), keepdims=True)
    return (traj - mean) / np.where(std > 0, std, 1.0)


def make_lorenz_dataset(
    n_trials: int = 7000,
    n_neurons: int = 128,
    T: int = 256,
    seed: int = 0,
    params: Optional[LorenzParams] = None,
    gain: float = 1.0,
    base_rate: float = 0.3,
    bin_width: float = 0.005,
    val_fraction: float = 0.1,
    behavior: Optional[str] = "velocity",
    velocity_noise: float = 0.1,
) -> TrialDataset:
    """Build a full Lorenz spiking dataset.

    Each trial starts from the attractor seed state ``(1, 1, 1)`` plus a
    per-trial perturbation drawn from its own substream, so trial generation
    can be split across workers without changing the result. ``behavior``
    selects the attached label: ``"velocity"`` is a fixed random linear readout
    of the standardized state plus Gaussian noise, ``"angle"`` is the polar
    angle of the standardized (x, y) state in the first bin.
    """
    if min(n_trials, n_neurons, T) < 1:
        raise ValueError("n_trials, n_neurons and T must all be >= 1")
    params = params or LorenzParams()
    root = seeded_rng(seed)

    x0 = np.ones((n_trials, 3))
    x0 += np.stack([root.substream(1000 + i).normal(0.0, params.perturb_std, 3) for i in range(n_trials)])
    no_perturb = LorenzParams(params.sigma, params.rho, params.beta, params.dt, params.burn_in, 0.0)
    traj = integrate_lorenz(x0, no_perturb, T)

    rates = project_to_rates(traj, n_neurons, gain, base_rate, root.substream(1))
    spikes = sample_poisson_spikes(rates, root.substream(2))

    beh = None
    if behavior == "velocity":
        brng = root.substream(3)
        readout = brng.normal(size=(2, 3)) / np.sqrt(3.0)
        beh = np.einsum("vc,bct->bvt", readout, standardize(traj))
        beh = beh + brng.normal(0.0, velocity_noise, size=beh.shape)
    elif behavior == "angle":
        z = standardize(traj)
        beh = np.arctan2(z[:, 1, 0], z[:, 0, 0])
    elif behavior is not None:
        raise ValueError(f"unknown behavior kind {behavior!r}")

    split = np.zeros(n_trials, dtype=np.uint8)
    n_val = int(round(val_fraction * n_trials))
    if n_val:
        split[root.substream(4).permutation(n_trials)[:n_val]] = 1

    return TrialDataset(
        spikes=spikes,
        bin_width=bin_width,
        rates=rates,
        behavior=beh,
        behavior_kind=behavior,
        split=split,
        meta={"source": "lorenz", "seed": seed, "gain": gain, "base_rate": base_rate},
    )
