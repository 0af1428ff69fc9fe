"""Single-file dataset container ("EAGD").

Layout: magic ``EAGD``, u16 version, u32 header length, JSON header, u32
CRC32 of the header, then raw little-endian arrays at the offsets listed in the
header's array directory (each with its own SHA-256). Arrays: ``spikes`` u16
(trials, n, T); optional ``rates`` f32 (trials, n, T); optional ``behavior``
f32, (trials, 2, T) velocities or (trials,) angles; ``split`` u8 (trials,).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .lorenz import TrialDataset
from .trainer import read_container, write_container

DATA_MAGIC = b"EAGD"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: TrialDataset, path, extra_header: Optional[dict] = None) -> None:
    if ds.spikes.max(initial=0) > np.iinfo(np.uint16).max:
        raise DatasetFormatError("spike counts exceed the u16 range")
    arrays = {"spikes": ds.spikes.astype("<u2")}
    if ds.rates is not None:
        arrays["rates"] = ds.rates.astype("<f4")
    if ds.behavior is not None:
        arrays["behavior"] = np.asarray(ds.behavior).astype("<f4")
    arrays["split"] = ds.split.astype("u1")
    header = {
        "n": ds.n_neurons,
        "T": ds.n_bins,
        "bin_width": ds.bin_width,
        "n_trials": ds.n_trials,
        "behavior_kind": ds.behavior_kind,
        "meta": ds.meta,
    }
    header.update(extra_header or {})
    write_container(path, DATA_MAGIC, DATA_VERSION, header, arrays)


def load_dataset(path, arrays: Optional[set] = None) -> TrialDataset:
    header, data = read_container(path, DATA_MAGIC, DATA_VERSION, arrays)
    spikes = data["spikes"].astype(np.int64)
    expect = (header["n_trials"], header["n"], header["T"])
    if spikes.shape != expect:
        raise DatasetFormatError(f"{path}: spikes shape {spikes.shape} does not match header {expect}")
    rates = data.get("rates")
    ds = TrialDataset(
        spikes=spikes,
        bin_width=header["bin_width"],
        rates=None if rates is None else rates.astype(np.float64),
        behavior=None if "behavior" not in data else data["behavior"].astype(np.float64),
        behavior_kind=header["behavior_kind"] if "behavior" in data else None,
        split=data.get("split"),
        meta=dict(header.get("meta") or {}),
    )
    ds.meta["header"] = {k: v for k, v in header.items() if k not in ("arrays", "meta")}
    return ds
