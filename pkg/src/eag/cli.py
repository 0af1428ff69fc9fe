"""``eag`` command line: simulate, train-ae, train-eag, sample, eval, decode.

Exit codes: 0 ok, 1 usage or config error, 2 numeric failure, 3 IO or format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, dump_config, load_config
from .datafile import DatasetFormatError, load_dataset, save_dataset
from .energy_transformer import BehaviorCondition
from .metrics import evaluate, pooled_r2, ridge_fit, select_ridge_penalty, closed_loop_validate
from .numerics import seeded_rng
from .trainer import CheckpointError, NumericalError, load_checkpoint, save_checkpoint

log = logging.getLogger("eag")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite_or_none(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def _setup(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed_override = args.seed
    out = Path(args.out or cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _epochs(train_cfg, epochs):
    if epochs is None:
        return train_cfg
    return dataclasses.replace(train_cfg, epochs=epochs)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg, out = _setup(args)
    for flag, key in (("trials", "n_trials"), ("neurons", "n_neurons"), ("bins", "n_bins")):
        if getattr(args, flag) is not None:
            setattr(cfg.lorenz, key, getattr(args, flag))
    ds = pipeline.simulate(cfg)
    path = out / "dataset.eagd"
    save_dataset(ds, path)
    (out / "config.ini").write_text(dump_config(cfg))
    summary = {
        "path": str(path),
        "trials": ds.n_trials,
        "neurons": ds.n_neurons,
        "bins": ds.n_bins,
        "mean_rate_hz": float(ds.spikes.mean() / ds.bin_width),
    }
    print(json.dumps(summary))
    return EXIT_OK


def _log_tail_writer(path: Path):
    entries = []

    def on_epoch(entry):
        entries.append(entry)
        log.info("epoch %d loss %.6g val %.6g", entry["epoch"], entry["train_loss"], entry["val"])

    return entries, on_epoch


def _run_training(out: Path, name: str, train):
    entries, on_epoch = _log_tail_writer(out)
    try:
        result = train(on_epoch)
    except NumericalError as exc:
        _write_json(out / f"{name}_log.json", {"error": str(exc), "log": entries})
        tail = entries[-5:]
        print(f"numeric failure: {exc}; last epochs: {json.dumps(tail)}", file=sys.stderr)
        raise
    return result, entries


def cmd_train_ae(args) -> int:
    cfg, out = _setup(args)
    ds = load_dataset(args.data)
    resume = load_checkpoint(args.resume, expected_stage="ae") if args.resume else None
    train_cfg = _epochs(cfg.train_ae, args.epochs)
    dtype = pipeline.torch_dtype(cfg.run.dtype)
    (model, ckpt, history), _ = _run_training(
        out,
        "ae",
        lambda cb: pipeline.train_ae_stage(ds, cfg.autoencoder, train_cfg, cfg.seed(), dtype, cb, resume),
    )
    path = out / "ae.ckpt"
    save_checkpoint(ckpt, path)
    _write_json(out / "ae_log.json", {"log": history, "best_epoch": ckpt.extra.get("best_epoch"), "epoch": ckpt.epoch})
    print(json.dumps({"checkpoint": str(path), "epochs": ckpt.epoch, "best_val_nll": _finite_or_none(ckpt.val_metric)}))
    return EXIT_OK


def _cached_latents(out: Path, ae_path: str, ae, ds) -> np.ndarray:
    digest = hashlib.sha256(Path(ae_path).read_bytes()).hexdigest()[:16]
    data_digest = hashlib.sha256(ds.spikes.tobytes()).hexdigest()[:16]
    cache = out / f"latents_{digest}_{data_digest}.npy"
    if cache.exists():
        return np.load(cache)
    z = pipeline.dataset_latents(ae, ds)
    np.save(cache, z)
    return z


def cmd_train_eag(args) -> int:
    cfg, out = _setup(args)
    ds = load_dataset(args.data)
    ae = pipeline.ae_from_checkpoint(load_checkpoint(args.ae, expected_stage="ae"))
    resume = load_checkpoint(args.resume, expected_stage="eag") if args.resume else None
    if args.conditional and ds.behavior is None:
        raise UsageError("--conditional needs a dataset with behavior labels")
    z = _cached_latents(out, args.ae, ae, ds)
    train_cfg = _epochs(cfg.train_eag, args.epochs)
    dtype = pipeline.torch_dtype(cfg.run.dtype)
    (model, ckpt, history), _ = _run_training(
        out,
        "eag",
        lambda cb: pipeline.train_eag_stage(
            ds,
            ae,
            cfg.energy_transformer,
            train_cfg,
            cfg.seed(),
            guidance=cfg.guidance,
            conditional=args.conditional,
            dtype=dtype,
            resume=resume,
            on_epoch=cb,
            latents=z,
        ),
    )
    path = out / "eag.ckpt"
    save_checkpoint(ckpt, path)
    _write_json(out / "eag_log.json", {"log": history, "epoch": ckpt.epoch})
    print(json.dumps({"checkpoint": str(path), "epochs": ckpt.epoch, "final_loss": _finite_or_none(ckpt.val_metric)}))
    return EXIT_OK


def _condition_from_file(path: str, count: int) -> BehaviorCondition:
    src = load_dataset(path, arrays={"spikes", "behavior", "split"})
    if src.behavior is None:
        raise UsageError(f"{path}: no behavior array to condition on")
    idx = np.resize(np.arange(src.n_trials), count)
    return pipeline.condition_of(src, idx)


def cmd_sample(args) -> int:
    cfg, out = _setup(args)
    ae = pipeline.ae_from_checkpoint(load_checkpoint(args.ae, expected_stage="ae"))
    eag_ckpt = load_checkpoint(args.eag, expected_stage="eag")
    et = pipeline.et_from_checkpoint(eag_ckpt)
    count = args.count if args.count is not None else cfg.sample.count
    steps = args.steps if args.steps is not None else cfg.sample.steps
    temp = args.temperature if args.temperature is not None else cfg.sample.temperature
    if count < 1 or steps < 1:
        raise UsageError("--count and --steps must be >= 1")
    condition = _condition_from_file(args.condition, count) if args.condition else None
    guidance = cfg.guidance
    if args.gamma is not None:
        guidance = dataclasses.replace(guidance, gamma=args.gamma)
    T = args.bins or eag_ckpt.config["max_len"]
    rng = seeded_rng(cfg.seed()).substream(pipeline.SAMPLE_STREAM)
    ds, seconds = pipeline.generate(
        et, ae, count, T, steps, temp, rng, condition, guidance, cfg.sample.batch_size, bin_width=args.bin_width
    )
    path = out / "samples.eagd"
    save_dataset(ds, path, extra_header={"latency_s": seconds, "gamma": guidance.gamma if condition else None})
    print(json.dumps({"path": str(path), "trials": count, "steps": steps, "latency_s": seconds}))
    return EXIT_OK


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_eval(args) -> int:
    _, out = _setup(args)
    real = load_dataset(args.real)
    gen = load_dataset(args.generated)
    if real.n_neurons != gen.n_neurons:
        raise UsageError(f"neuron counts differ: {real.n_neurons} vs {gen.n_neurons}")
    if not np.isclose(real.bin_width, gen.bin_width):
        raise UsageError(f"bin widths differ: {real.bin_width} vs {gen.bin_width}")
    report, ex = evaluate(real, gen, details=True)
    _write_json(out / "report.json", report.to_dict())
    size = max(len(ex["psch_real"]), len(ex["psch_gen"]))
    pr = np.pad(ex["psch_real"], (0, size - len(ex["psch_real"])))
    pg = np.pad(ex["psch_gen"], (0, size - len(ex["psch_gen"])))
    _write_csv(out / "psch.csv", ["count", "real", "generated"], [(i, pr[i], pg[i]) for i in range(size)])
    _write_csv(
        out / "neurons.csv",
        ["neuron", "mean_isi_real", "mean_isi_gen", "std_isi_real", "std_isi_gen"],
        [
            (i, ex["mean_isi_real"][i], ex["mean_isi_gen"][i], ex["std_isi_real"][i], ex["std_isi_gen"][i])
            for i in range(real.n_neurons)
        ],
    )
    _write_csv(
        out / "pairwise_corr.csv",
        ["pair", "real", "generated"],
        [(i, a, b) for i, (a, b) in enumerate(zip(ex["corr_real"], ex["corr_gen"]))],
    )
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _velocity_and_rates(ds, path):
    if ds.behavior is None or ds.behavior_kind != "velocity":
        raise UsageError(f"{path}: no velocity behavior array")
    if ds.rates is None:
        raise UsageError(f"{path}: no rates array")
    return ds.rates, ds.behavior


def cmd_decode(args) -> int:
    cfg, out = _setup(args)
    real = load_dataset(args.real)
    gen = load_dataset(args.generated)
    r_rates, r_vel = _velocity_and_rates(real, args.real)
    g_rates, g_vel = _velocity_and_rates(gen, args.generated)
    train, held = real.split == 0, real.split != 0
    if not held.any():
        held = train
    if args.lam is not None:
        lam, sweep = args.lam, None
    else:
        grid = [float(x) for x in cfg.metrics.ridge_grid.split(",")]
        lam, sweep = select_ridge_penalty(r_rates[train], r_vel[train], r_rates[held], r_vel[held], grid)
    dec = ridge_fit(r_rates[train], r_vel[train], lam)
    r2_real = closed_loop_validate(dec, r_rates[held], r_vel[held])
    r2_gen = closed_loop_validate(dec, g_rates, g_vel)
    report = {
        "lambda": lam,
        "sweep": None if sweep is None else [{"lambda": k, "r2": v} for k, v in sweep.items()],
        "r2_real": float(r2_real.mean()),
        "r2_generated": float(r2_gen.mean()),
        "r2_real_pooled": pooled_r2(dec, r_rates[held], r_vel[held]),
        "r2_generated_pooled": pooled_r2(dec, g_rates, g_vel),
        "n_real_trials": int(held.sum()),
        "n_gen_trials": gen.n_trials,
    }
    _write_json(out / "decode.json", report)
    print(json.dumps(report, default=_json_default))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eag", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--out", help="output directory (default: run.out)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("simulate", help="write a synthetic Lorenz dataset")
    common(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--neurons", type=int)
    sp.add_argument("--bins", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train-ae", help="train the spike autoencoder")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train_ae)

    sp = sub.add_parser("train-eag", help="train the energy transformer on AE latents")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--conditional", action="store_true", help="condition on the dataset's behavior")
    sp.set_defaults(func=cmd_train_eag)

    sp = sub.add_parser("sample", help="generate spike trials")
    common(sp)
    sp.add_argument("--eag", required=True)
    sp.add_argument("--ae", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--condition", help="dataset file whose behavior arrays condition the samples")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--bins", type=int)
    sp.add_argument("--bin-width", type=float, default=0.005)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="compare generated against real spikes")
    common(sp)
    sp.add_argument("--real", required=True)
    sp.add_argument("--generated", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("decode", help="closed-loop ridge decoding of velocity")
    common(sp)
    sp.add_argument("--real", required=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, help="fixed penalty; default sweeps metrics.ridge_grid")
    sp.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, pipeline.IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, DatasetFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
