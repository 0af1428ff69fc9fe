"""Spike-train statistics for comparing real and generated datasets, plus
ridge decoding for closed-loop checks of conditional samples."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class MetricsReport:
    dkl_psch: float
    rmse_pairwise_corr: float
    rmse_mean_isi: float
    rmse_std_isi: float
    n_real_trials: int
    n_gen_trials: int

    def to_dict(self) -> dict:
        return asdict(self)


def _as_trials(spikes) -> np.ndarray:
    arr = np.asarray(spikes)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("expected a nonempty (trials, n, T) array")
    return arr


def population_spike_count_histogram(spikes) -> np.ndarray:
    """Normalized histogram of per-bin population totals; index = total count."""
    totals = _as_trials(spikes).sum(axis=1).astype(np.int64).ravel()
    hist = np.bincount(totals).astype(np.float64)
    return hist / hist.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-6) -> float:
    """KL(p || q) over the union support after eps-smoothing both sides."""
    size = max(len(p), len(q))
    p = np.pad(np.asarray(p, dtype=np.float64), (0, size - len(p))) + eps
    q = np.pad(np.asarray(q, dtype=np.float64), (0, size - len(q))) + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def pairwise_correlations(spikes) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlations between neurons, bins concatenated over trials.

    Returns ``(corr, flagged)`` where ``flagged`` marks zero-variance neurons;
    those get correlation 0 with every other neuron.
    """
    arr = _as_trials(spikes).astype(np.float64)
    x = arr.transpose(1, 0, 2).reshape(arr.shape[1], -1)
    if x.shape[1] < 2:
        raise ValueError("need at least 2 time samples")
    x = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=1))
    flagged = norm == 0
    safe = np.where(flagged, 1.0, norm)
    corr = (x @ x.T) / np.outer(safe, safe)
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    corr[flagged, :] = 0.0
    corr[:, flagged] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr, flagged


def isi_stats(spikes, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron mean and std of inter-spike intervals in seconds.

    Spikes sit at bin centers; a bin with count c contributes c events, so c - 1
    zero intervals. Intervals never cross trial boundaries. Neurons with no
    interval at all get NaN for both statistics.
    """
    arr = _as_trials(spikes).astype(np.int64)
    n_trials, n, T = arr.shape
    centers = (np.arange(T) + 0.5) * bin_width
    mean = np.full(n, np.nan)
    std = np.full(n, np.nan)
    for j in range(n):
        isis = []
        for k in range(n_trials):
            counts = arr[k, j]
            if counts.sum() < 2:
                continue
            times = np.repeat(centers, counts)
            isis.append(np.diff(times))
        if isis:
            pooled = np.concatenate(isis)
            mean[j] = pooled.mean()
            std[j] = pooled.std()
    return mean, std


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _rmse_valid(a: np.ndarray, b: np.ndarray) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    return rmse(a[ok], b[ok])


def evaluate(real, generated, bin_width: Optional[float] = None, details: bool = False):
    """Compare two spike datasets on the four population/single-neuron statistics.

    ``real`` and ``generated`` are TrialDatasets or (trials, n, T) arrays. With
    ``details=True`` also returns the raw histograms and per-neuron statistics.
    """
    rs, rbw = _unpack(real)
    gs, gbw = _unpack(generated)
    bw = bin_width or rbw or gbw or 1.0
    if rbw and gbw and not np.isclose(rbw, gbw):
        raise ValueError("bin widths differ")
    if rs.shape[1] != gs.shape[1]:
        raise ValueError("neuron counts differ")

    hist_r = population_spike_count_histogram(rs)
    hist_g = population_spike_count_histogram(gs)
    corr_r, _ = pairwise_correlations(rs)
    corr_g, _ = pairwise_correlations(gs)
    iu = np.triu_indices(rs.shape[1], k=1)
    mean_r, std_r = isi_stats(rs, bw)
    mean_g, std_g = isi_stats(gs, bw)

    report = MetricsReport(
        dkl_psch=kl_divergence(hist_r, hist_g),
        rmse_pairwise_corr=rmse(corr_r[iu], corr_g[iu]),
        rmse_mean_isi=_rmse_valid(mean_r, mean_g),
        rmse_std_isi=_rmse_valid(std_r, std_g),
        n_real_trials=int(rs.shape[0]),
        n_gen_trials=int(gs.shape[0]),
    )
    if not details:
        return report
    extras = {
        "psch_real": hist_r,
        "psch_gen": hist_g,
        "mean_isi_real": mean_r,
        "mean_isi_gen": mean_g,
        "std_isi_real": std_r,
        "std_isi_gen": std_g,
        "corr_real": corr_r[iu],
        "corr_gen": corr_g[iu],
    }
    return report, extras


def _unpack(data):
    if hasattr(data, "spikes"):
        return _as_trials(data.spikes), data.bin_width
    return _as_trials(data), None


# ---------------------------------------------------------------------------
# closed-loop ridge decoding


@dataclass
class RidgeDecoder:
    weights: np.ndarray  # (n + 1, k), last row is the bias
    penalty: float

    def predict(self, rates: np.ndarray) -> np.ndarray:
        """(trials, n, T) rates -> (trials, k, T) decoded behavior."""
        rates = np.asarray(rates, dtype=np.float64)
        out = np.einsum("knt,nv->kvt", rates, self.weights[:-1])
        return out + self.weights[-1][None, :, None]


def _design(rates: np.ndarray) -> np.ndarray:
    r = np.asarray(rates, dtype=np.float64)
    rows = r.transpose(0, 2, 1).reshape(-1, r.shape[1])
    return np.hstack([rows, np.ones((rows.shape[0], 1))])


def ridge_fit(rates, velocity, lam: float = 10.0, intercept: bool = True) -> RidgeDecoder:
    """Closed-form ridge from per-bin rate vectors to velocity; bias unpenalized.

    With ``intercept=False`` the bias row is fixed at zero.
    """
    if lam < 0:
        raise ValueError("penalty must be >= 0")
    rates = np.asarray(rates, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if rates.shape[0] != velocity.shape[0] or rates.shape[2] != velocity.shape[2]:
        raise ValueError("rates and velocity must share trial count and T")
    X = _design(rates)
    if not intercept:
        X = X[:, :-1]
    Y = velocity.transpose(0, 2, 1).reshape(-1, velocity.shape[1])
    reg = lam * np.eye(X.shape[1])
    if intercept:
        reg[-1, -1] = 0.0
    A = X.T @ X + reg
    if lam == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations: rank-deficient rates with lambda=0")
    W = np.linalg.solve(A, X.T @ Y)
    if not intercept:
        W = np.vstack([W, np.zeros((1, W.shape[1]))])
    return RidgeDecoder(weights=W, penalty=float(lam))


def r2_score(pred: np.ndarray, target: np.ndarray) -> float:
    """R^2 over all bins and both components, per-component mean as baseline."""
    ss_res = np.sum((target - pred) ** 2)
    ss_tot = np.sum((target - target.mean(axis=-1, keepdims=True)) ** 2)
    if ss_tot == 0:
        raise ValueError("zero-variance target")
    return float(1.0 - ss_res / ss_tot)


def closed_loop_validate(decoder: RidgeDecoder, rates, velocity) -> np.ndarray:
    """Per-trial R^2 of decoded velocity against the conditioning velocity."""
    pred = decoder.predict(rates)
    velocity = np.asarray(velocity, dtype=np.float64)
    return np.array([r2_score(p, v) for p, v in zip(pred, velocity)])


def pooled_r2(decoder: RidgeDecoder, rates, velocity) -> float:
    pred = decoder.predict(rates)
    pred = pred.transpose(1, 0, 2).reshape(pred.shape[1], -1)
    v = np.asarray(velocity, dtype=np.float64)
    v = v.transpose(1, 0, 2).reshape(v.shape[1], -1)
    return r2_score(pred, v)


def select_ridge_penalty(
    rates, velocity, val_rates, val_velocity, grid: Sequence[float] = (0.1, 1.0, 10.0, 100.0)
) -> tuple[float, dict]:
    """Pick the penalty with the best pooled validation R^2; returns (best, sweep)."""
    sweep = {}
    for lam in grid:
        sweep[float(lam)] = pooled_r2(ridge_fit(rates, velocity, lam), val_rates, val_velocity)
    best = max(sweep, key=sweep.get)
    return best, sweep
