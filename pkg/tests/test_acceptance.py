"""Acceptance checks, one test per criterion. Each prints a PASS/FAIL line.

Run alone with ``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -v``.
Criteria 6 and 8 train models and take most of the wall-clock time.
"""

import math
import time

import numpy as np
import pytest
import torch

from eag import experiments, pipeline
from eag.autoencoder import AEConfig
from eag.energy_transformer import (
    BehaviorCondition,
    ETConfig,
    GuidanceConfig,
    build_et,
    cfg_combine,
    cosine_mask_counts,
    energy_loss,
    sample_conditional,
    training_step,
)
from eag.lorenz import make_lorenz_dataset
from eag.metrics import evaluate, kl_divergence, pairwise_correlations
from eag.numerics import deterministic_reductions, flatten_params, grad_check, module_loss_fn, seeded_rng
from eag.trainer import TrainConfig, load_checkpoint, save_checkpoint


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def _per_sample_scores(z1, z2, y, alpha):
    return torch.vmap(lambda a, b, c: energy_loss(a, b, c, alpha))(z1, z2, y).numpy()


def _paired_gap(alt, ref):
    """Mean and standard error of per-sample (alt - ref)."""
    d = alt - ref
    return d.mean(), d.std(ddof=1) / math.sqrt(len(d))


# 1


def test_01_energy_score_propriety(report):
    t0 = time.perf_counter()
    n, rng = 10**5, seeded_rng(101)
    y = rng.torch_normal((n, 2))
    u1, u2 = rng.torch_normal((n, 2)), rng.torch_normal((n, 2))
    match = _per_sample_scores(u1, u2, y, 1.0)
    shift = torch.tensor([0.3, 0.0], dtype=torch.float64)
    shifted = _per_sample_scores(u1 + shift, u2 + shift, y, 1.0)
    inflated = _per_sample_scores(1.5 * u1, 1.5 * u2, y, 1.0)
    g1, se1 = _paired_gap(shifted, match)
    g2, se2 = _paired_gap(inflated, match)
    secs = time.perf_counter() - t0
    ok = g1 > 3 * se1 and g2 > 3 * se2 and secs < 10
    report(1, ok, f"shift gap {g1:.4f} ({g1 / se1:.1f} SE), inflation gap {g2:.4f} ({g2 / se2:.1f} SE), {secs:.1f}s")
    assert ok


# 2


def test_02_alpha_two_not_strict(report):
    t0 = time.perf_counter()
    n, rng = 10**5, seeded_rng(102)
    y = rng.torch_normal((n, 2))
    u1, u2 = rng.torch_normal((n, 2)), rng.torch_normal((n, 2))
    gaps = {}
    for alpha in (2.0, 1.0):
        ref = _per_sample_scores(u1, u2, y, alpha)
        alt = _per_sample_scores(1.5 * u1, 1.5 * u2, y, alpha)
        gaps[alpha] = _paired_gap(alt, ref)
    secs = time.perf_counter() - t0
    (g2, s2), (g1, s1) = gaps[2.0], gaps[1.0]
    ok = abs(g2) <= 2 * s2 and abs(g1) > 3 * s1 and secs < 10
    report(2, ok, f"alpha=2 gap {g2 / s2:+.2f} SE, alpha=1 gap {g1 / s1:+.1f} SE, {secs:.1f}s")
    assert ok


# 3


def test_03_gradient_fidelity(report):
    t0 = time.perf_counter()
    cfg = ETConfig(embed_dim=8, encoder_depth=1, decoder_depth=1, num_heads=2, ff_ratio=2.0, mlp_depth=2, mlp_width=8, noise_dim=4)
    m = build_et(2, 2, cfg, seeded_rng(1))
    rng = seeded_rng(2)

    zs = rng.torch_normal((3, 4, 2))
    fn_loss = lambda flat: energy_loss(flat[:8].view(4, 2), flat[8:].view(4, 2), zs[2])
    e_loss = grad_check(fn_loss, zs[:2].reshape(-1))

    h, eps = rng.torch_normal((3, 8)), rng.torch_uniform((3, 4))
    target = rng.torch_normal((3, 2))
    head_fn = module_loss_fn(m.head, lambda head: energy_loss(head(h, eps), head(h, -eps), target))
    e_head = grad_check(head_fn, flatten_params(m.head), eps=1e-5)

    z = rng.torch_normal((3, 2, 2))
    step_fn = module_loss_fn(m, lambda mod: training_step(mod, z, seeded_rng(7)))
    e_step = grad_check(step_fn, flatten_params(m), eps=1e-5)

    secs = time.perf_counter() - t0
    worst = max(e_loss, e_head, e_step)
    ok = worst < 1e-4 and secs < 30
    report(3, ok, f"max rel err loss {e_loss:.1e}, head {e_head:.1e}, training step {e_step:.1e}, {secs:.1f}s")
    assert ok


# 4


def test_04_schedule_invariants(report):
    t0 = time.perf_counter()
    bad = 0
    for T in range(1, 513):
        runs = [cosine_mask_counts(T, K) for K in range(1, T + 1)]
        flat = np.concatenate(runs)
        ends = np.cumsum([len(c) for c in runs])
        starts = ends - np.array([len(c) for c in runs])
        bad += int((ends - starts != np.arange(2, T + 2)).sum())
        bad += int((flat[starts] != T).sum() + (flat[ends - 1] != 0).sum())
        # newly unmasked = -diff; nonnegative everywhere, and with the endpoints fixed they sum to T
        step = np.diff(flat)
        step[ends[:-1] - 1] = 0
        bad += int((step > 0).sum())
    secs = time.perf_counter() - t0
    ok = not bad and secs < 5
    report(4, ok, f"{512 * 513 // 2} (T, K) pairs, {bad} violations, {secs:.1f}s")
    assert ok


# 5


def _single_path_sample(model, cond, use_cond, T, K, temperature, rng, orders):
    """Sampling loop that only ever queries one feature path."""
    counts = cosine_mask_counts(T, K)
    n = len(cond)
    z = torch.zeros(n, T, model.latent_dim, dtype=model.dtype)
    committed = torch.zeros(n, T, dtype=torch.bool)
    orders = torch.as_tensor(orders)
    rows = torch.arange(n)[:, None]
    with torch.no_grad():
        for k in range(1, K + 1):
            lo, hi = T - counts[k - 1], T - counts[k]
            if hi == lo:
                continue
            if use_cond:
                h = model.features(z, committed, cond)
            else:
                h = model.features(z, committed, None, use_null=True)
            pos = orders[:, lo:hi]
            eps = rng.torch_uniform((n, hi - lo, model.config.noise_dim), dtype=model.dtype) * temperature
            z[rows, pos] = model.mlp_generate(h[rows, pos], eps)
            committed[rows, pos] = True
    return model.denormalize(z)


def test_05_cfg_identities(report):
    t0 = time.perf_counter()
    cfg = ETConfig(embed_dim=16, encoder_depth=1, decoder_depth=1, num_heads=2, ff_ratio=2.0, mlp_depth=2, mlp_width=16, noise_dim=8)
    T, K, n = 12, 5, 3
    m = build_et(3, T, cfg, seeded_rng(5), condition_kind="velocity").eval()
    cond = BehaviorCondition("velocity", velocity=seeded_rng(6).normal(size=(n, 2, T)))
    orders = np.stack([seeded_rng(7).substream(i).permutation(T) for i in range(n)])

    def guided(gamma):
        return sample_conditional(m, cond, GuidanceConfig(gamma=gamma), T, K, 0.7, seeded_rng(8), orders=orders)

    eq1 = torch.equal(guided(1.0), _single_path_sample(m, cond, True, T, K, 0.7, seeded_rng(8), orders))
    eq0 = torch.equal(guided(0.0), _single_path_sample(m, cond, False, T, K, 0.7, seeded_rng(8), orders))

    z = torch.from_numpy(seeded_rng(9).normal(size=(n, T, 3)))
    vis = torch.from_numpy(seeded_rng(10).uniform(size=(n, T)) < 0.5)
    with torch.no_grad():
        h_c, h_u = m.features(z, vis, cond), m.features(z, vis, None, use_null=True)
    affine = max(
        float((cfg_combine(h_c, h_u, g) - (h_u + g * (h_c - h_u))).abs().max()) for g in (-1.0, 0.25, 0.5, 2.0, 3.7)
    )
    secs = time.perf_counter() - t0
    ok = eq1 and eq0 and affine <= 1e-12 and secs < 5
    report(5, ok, f"gamma=1 bitwise {eq1}, gamma=0 bitwise {eq0}, affine max err {affine:.1e}, {secs:.1f}s")
    assert ok


# 6


def test_06_lorenz_miniature(report):
    t0 = time.perf_counter()
    res = experiments.run_miniature(experiments.MiniatureConfig())
    hours = (time.perf_counter() - t0) / 3600
    g, r, c = res["generated"], res["reconstruction"], res["rate_doubled"]
    keys = ("dkl_psch", "rmse_pairwise_corr", "rmse_mean_isi", "rmse_std_isi")
    checks = {
        "dkl_psch": g["dkl_psch"] <= max(0.1, 3 * r["dkl_psch"]),
        "rmse_pairwise_corr": g["rmse_pairwise_corr"] <= 2 * r["rmse_pairwise_corr"],
        "rmse_mean_isi": g["rmse_mean_isi"] <= 2 * r["rmse_mean_isi"],
        "rmse_std_isi": g["rmse_std_isi"] <= 2 * r["rmse_std_isi"],
    }
    beats = {k: g[k] < c[k] for k in keys}
    ok = all(checks.values()) and all(beats.values()) and hours <= 2
    table = ", ".join(f"{k} gen {g[k]:.4g} / recon {r[k]:.4g} / doubled {c[k]:.4g}" for k in keys)
    report(6, ok, f"{table}; {hours * 60:.0f} min")
    assert all(checks.values()), checks
    assert all(beats.values()), beats
    assert hours <= 2


# 7


def test_07_latency_scaling(report):
    cfg = experiments.MiniatureConfig()
    et, ae = experiments.untrained_models(cfg.n_neurons, cfg.n_bins, cfg)
    with torch.no_grad():
        et.latent_std.fill_(1.0)
    lat = experiments.measure_latency(et, ae, cfg.n_bins, steps=(16,), counts=(502, 1004, 2008), repeats=3)
    lat.update(experiments.measure_latency(et, ae, cfg.n_bins, steps=(32,), counts=(2008,), repeats=3))
    k_ratio = lat[(32, 2008)] / lat[(16, 2008)]
    n_ratios = [lat[(16, 1004)] / lat[(16, 502)], lat[(16, 2008)] / lat[(16, 1004)]]
    # doubling trials may cost at most double, with a 10% allowance for timer noise
    ok = 1.5 <= k_ratio <= 2.5 and all(1.0 < r <= 2.2 for r in n_ratios)
    report(
        7,
        ok,
        f"K=32/K=16 {k_ratio:.2f} ({lat[(32, 2008)]:.2f}s / {lat[(16, 2008)]:.2f}s), "
        f"count doubling ratios {n_ratios[0]:.2f}, {n_ratios[1]:.2f}",
    )
    assert ok


# 8


def test_08_closed_loop_decoding(report):
    t0 = time.perf_counter()
    res = experiments.run_closed_loop()
    ok = res["ratio"] >= 0.7
    report(
        8,
        ok,
        f"R2 generated {res['r2_generated']:.3f} / held-out real {res['r2_real']:.3f} = {res['ratio']:.3f} "
        f"(lambda {res['lambda']}), {(time.perf_counter() - t0) / 60:.0f} min",
    )
    assert ok


# 9


def test_09_metric_self_consistency(report):
    ds = make_lorenz_dataset(n_trials=60, n_neurons=16, T=64, seed=9, behavior=None)
    rep = evaluate(ds, ds)
    zeros = (rep.dkl_psch, rep.rmse_pairwise_corr, rep.rmse_mean_isi, rep.rmse_std_isi) == (0.0, 0.0, 0.0, 0.0)
    rng = seeded_rng(19)
    kls = []
    for _ in range(1000):
        p = rng.uniform(size=rng.integers(1, 30)) * (rng.uniform(size=1) < 0.9)
        q = rng.uniform(size=rng.integers(1, 30))
        p = p + (p.sum() == 0)
        kls.append(kl_divergence(p / p.sum(), q / q.sum()))
    nonneg = min(kls) >= 0
    c, _ = pairwise_correlations(ds.spikes)
    sym = bool(np.array_equal(c, c.T) and np.all(np.diag(c) == 1.0))
    ok = zeros and nonneg and sym
    report(9, ok, f"evaluate(D, D) zero {zeros}, min KL over 1000 pairs {min(kls):.2e}, corr symmetric/unit diag {sym}")
    assert ok


# 10


def _tiny_run(tmp, tag):
    ds = make_lorenz_dataset(n_trials=24, n_neurons=6, T=16, seed=10, behavior="velocity")
    from eag.datafile import save_dataset

    save_dataset(ds, tmp / f"data_{tag}.eagd")
    ae_cfg = AEConfig(encoder_blocks=1, decoder_blocks=1, embed_dim=8, num_latents=2)
    ae, ae_ckpt, _ = pipeline.train_ae_stage(ds, ae_cfg, TrainConfig(epochs=2, warmup_epochs=0, batch_size=8), 10)
    et_cfg = ETConfig(embed_dim=8, encoder_depth=1, decoder_depth=1, num_heads=2, ff_ratio=2.0, mlp_depth=1, mlp_width=8, noise_dim=4)
    et, et_ckpt, _ = pipeline.train_eag_stage(
        ds, ae, et_cfg, TrainConfig(epochs=2, warmup_epochs=0, batch_size=8), 10, conditional=True
    )
    save_checkpoint(ae_ckpt, tmp / f"ae_{tag}.ckpt")
    save_checkpoint(et_ckpt, tmp / f"eag_{tag}.ckpt")
    return ds, ae, et


def test_10_determinism_and_persistence(report, tmp_path):
    with deterministic_reductions():
        ds, ae, et = _tiny_run(tmp_path, "a")
        _tiny_run(tmp_path, "b")
        same = {
            name: (tmp_path / f"{name}_a{ext}").read_bytes() == (tmp_path / f"{name}_b{ext}").read_bytes()
            for name, ext in (("data", ".eagd"), ("ae", ".ckpt"), ("eag", ".ckpt"))
        }
        ae2 = pipeline.ae_from_checkpoint(load_checkpoint(tmp_path / "ae_a.ckpt"))
        et2 = pipeline.et_from_checkpoint(load_checkpoint(tmp_path / "eag_a.ckpt"))
        x = torch.from_numpy(ds.spikes).to(torch.float64)
        z = torch.from_numpy(seeded_rng(3).normal(size=(4, 16, 2)))
        vis = torch.from_numpy(seeded_rng(4).uniform(size=(4, 16)) < 0.5)
        cond = pipeline.condition_of(ds, np.arange(4))
        eps = seeded_rng(5).torch_uniform((4, 16, 4))
        with torch.no_grad():
            ae_same = torch.equal(ae.decode(ae.encode(x)), ae2.decode(ae2.encode(x)))
            h1, h2 = et.features(z, vis, cond), et2.features(z, vis, cond)
            et_same = torch.equal(h1, h2) and torch.equal(et.mlp_generate(h1, eps), et2.mlp_generate(h2, eps))
    ok = all(same.values()) and ae_same and et_same
    report(10, ok, f"byte-identical {same}, AE forward bitwise {ae_same}, ET forward bitwise {et_same}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
