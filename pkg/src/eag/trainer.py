"""Optimization loop, learning-rate schedule and the binary checkpoint format."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .numerics import RandomStream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"EAGC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 4000
    warmup_epochs: int = 100
    batch_size: int = 512
    seed: int = 0
    grad_clip: Optional[float] = None
    patience: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 10% of the peak at the last epoch."""
    lr, w, last = config.learning_rate, config.warmup_epochs, config.epochs - 1
    if epoch < w:
        return lr * epoch / w
    span = last - w
    progress = min((epoch - w) / span, 1.0) if span > 0 else 0.0
    return lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


class NumericalError(RuntimeError):
    pass


@dataclass
class FitResult:
    log: list
    best_state: dict
    best_epoch: int
    best_val: float
    optimizer: torch.optim.Optimizer
    last_epoch: int


def fit(
    model: torch.nn.Module,
    data: Sequence[torch.Tensor],
    loss_fn: Callable[[torch.nn.Module, tuple, RandomStream], torch.Tensor],
    config: TrainConfig,
    rng: RandomStream,
    val_fn: Optional[Callable[[torch.nn.Module], float]] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    keep: str = "best",
    stop_epoch: Optional[int] = None,
) -> FitResult:
    """Adam over shuffled minibatches of the tensors in ``data``.

    Every epoch draws its shuffle order and its loss randomness from its own
    substreams of ``rng``, so a run resumed at ``start_epoch`` with the saved
    optimizer state continues exactly as an uninterrupted run would.
    ``keep="last"`` returns the final parameters instead of the best-validation ones.
    ``stop_epoch`` pauses before that epoch without changing the schedule.
    """
    if keep not in ("best", "last"):
        raise ValueError("keep must be 'best' or 'last'")
    n = len(data[0])
    if n == 0:
        raise ValueError("dataset is empty")
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)

    history = []
    best_val, best_epoch = math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    epoch = start_epoch - 1  # last completed epoch
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start_epoch, end):
        lr = lr_at(epoch, config)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.substream(2 * epoch).permutation(n)
        step_rng = rng.substream(2 * epoch + 1)
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            batch = tuple(t[idx] for t in data)
            loss = loss_fn(model, batch, step_rng)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.eval()
        train_loss = total / count
        val = val_fn(model) if val_fn is not None else train_loss
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation metric at epoch {epoch}")
        entry = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val": val}
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    if keep == "last":
        best_state = copy.deepcopy(model.state_dict())
        best_epoch, best_val = epoch, history[-1]["val"] if history else math.nan
    return FitResult(history, best_state, best_epoch, best_val, opt, epoch)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class StageMismatchError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    stage: str  # "ae" or "eag"
    config: dict
    tensors: dict  # name -> np.ndarray (model state and optimizer moments)
    rng_state: Optional[dict] = None
    epoch: int = 0
    val_metric: float = math.nan
    extra: dict = field(default_factory=dict)

    def model_state(self, dtype=torch.float64) -> dict:
        return {
            k[len("model.") :]: torch.from_numpy(v.copy()).to(dtype)
            for k, v in self.tensors.items()
            if k.startswith("model.")
        }

    def optimizer_state(self) -> Optional[dict]:
        if "optim" not in self.extra:
            return None
        meta = self.extra["optim"]
        state = {}
        for i in range(meta["n_params"]):
            key = f"optim.{i}."
            if key + "exp_avg" not in self.tensors:
                continue
            dtype = getattr(torch, meta["dtype"])
            state[i] = {
                "step": torch.tensor(float(meta["steps"][str(i)])),
                "exp_avg": torch.from_numpy(self.tensors[key + "exp_avg"].copy()).to(dtype),
                "exp_avg_sq": torch.from_numpy(self.tensors[key + "exp_avg_sq"].copy()).to(dtype),
            }
        return {"state": state, "param_groups": meta["param_groups"]}


def make_checkpoint(
    stage: str,
    config: dict,
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng: Optional[RandomStream] = None,
    epoch: int = 0,
    val_metric: float = math.nan,
    extra: Optional[dict] = None,
    state: Optional[dict] = None,
) -> ModelCheckpoint:
    state = model.state_dict() if state is None else state
    tensors = {f"model.{k}": v.detach().cpu().to(torch.float64).numpy().copy() for k, v in state.items()}
    extra = dict(extra or {})
    if optimizer is not None:
        sd = optimizer.state_dict()
        steps = {}
        for i, s in sd["state"].items():
            tensors[f"optim.{i}.exp_avg"] = s["exp_avg"].to(torch.float64).numpy().copy()
            tensors[f"optim.{i}.exp_avg_sq"] = s["exp_avg_sq"].to(torch.float64).numpy().copy()
            steps[str(i)] = float(s["step"])
        dtype = str(next(model.parameters()).dtype).replace("torch.", "")
        extra["optim"] = {
            "n_params": len(sd["param_groups"][0]["params"]),
            "steps": steps,
            "param_groups": _jsonable(sd["param_groups"]),
            "dtype": dtype,
        }
    return ModelCheckpoint(
        stage=stage,
        config=config,
        tensors=tensors,
        rng_state=rng.get_state() if rng is not None else None,
        epoch=epoch,
        val_metric=float(val_metric),
        extra=extra,
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def write_container(path, magic: bytes, version: int, header: dict, arrays: dict) -> None:
    """Shared layout: magic, u16 version, u32 header length, JSON header,
    u32 CRC32 of the header, then raw little-endian array blocks."""
    blocks, directory, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": np.asarray(arr).dtype.str,
                "shape": list(np.shape(arr)),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blocks.append(raw)
        offset += len(raw)
    header = dict(header, arrays=directory)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", version, len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", zlib.crc32(hb)))
        for raw in blocks:
            fh.write(raw)


def read_container(path, magic: bytes, version: int, names: Optional[set] = None) -> tuple[dict, dict]:
    """Inverse of :func:`write_container`; ``names`` limits which arrays are read."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise TruncatedFileError(f"{path}: file too short")
    if data[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    ver, hlen = struct.unpack("<HI", data[4:10])
    if ver != version:
        raise VersionMismatchError(f"{path}: format version {ver}, expected {version}")
    if len(data) < 14 + hlen:
        raise TruncatedFileError(f"{path}: header truncated")
    hb = data[10 : 10 + hlen]
    (crc,) = struct.unpack("<I", data[10 + hlen : 14 + hlen])
    if zlib.crc32(hb) != crc:
        raise ChecksumError(f"{path}: header checksum mismatch")
    header = json.loads(hb)
    base = 14 + hlen
    arrays = {}
    for entry in header["arrays"]:
        if names is not None and entry["name"] not in names:
            continue
        lo, hi = base + entry["offset"], base + entry["offset"] + entry["nbytes"]
        if hi > len(data):
            raise TruncatedFileError(f"{path}: array {entry['name']} truncated")
        raw = data[lo:hi]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch in array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return header, arrays


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    header = {
        "stage": ckpt.stage,
        "config": ckpt.config,
        "rng_state": _jsonable(ckpt.rng_state),
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric if math.isfinite(ckpt.val_metric) else None,
        "extra": _jsonable(ckpt.extra),
    }
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in ckpt.tensors.items()}
    write_container(path, CKPT_MAGIC, CKPT_VERSION, header, arrays)


def load_checkpoint(path, expected_stage: Optional[str] = None) -> ModelCheckpoint:
    header, arrays = read_container(path, CKPT_MAGIC, CKPT_VERSION)
    if expected_stage is not None and header["stage"] != expected_stage:
        raise StageMismatchError(f"{path}: checkpoint stage {header['stage']!r}, expected {expected_stage!r}")
    val = header["val_metric"]
    return ModelCheckpoint(
        stage=header["stage"],
        config=header["config"],
        tensors=arrays,
        rng_state=_from_jsonable(header["rng_state"]),
        epoch=header["epoch"],
        val_metric=math.nan if val is None else val,
        extra=_from_jsonable(header["extra"]),
    )


def config_dict(cfg) -> dict:
    return asdict(cfg)
