import numpy as np
import pytest

from eag.datafile import DatasetFormatError, load_dataset, save_dataset
from eag.lorenz import TrialDataset
from eag.trainer import ChecksumError, CheckpointError, TruncatedFileError


def test_round_trip(tiny_lorenz, tmp_path):
    p = tmp_path / "d.eagd"
    save_dataset(tiny_lorenz, p, {"note": "x"})
    back = load_dataset(p)
    assert np.array_equal(back.spikes, tiny_lorenz.spikes)
    assert np.array_equal(back.split, tiny_lorenz.split)
    assert np.allclose(back.rates, tiny_lorenz.rates, rtol=1e-6)
    assert np.allclose(back.behavior, tiny_lorenz.behavior, rtol=1e-6, atol=1e-6)
    assert back.behavior_kind == tiny_lorenz.behavior_kind
    assert back.bin_width == tiny_lorenz.bin_width
    assert back.meta["header"]["note"] == "x"


def test_saves_are_byte_identical(tiny_lorenz, tmp_path):
    save_dataset(tiny_lorenz, tmp_path / "a")
    save_dataset(tiny_lorenz, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_spikes_only(tmp_path):
    ds = TrialDataset(spikes=np.arange(24).reshape(2, 3, 4))
    save_dataset(ds, tmp_path / "s")
    back = load_dataset(tmp_path / "s")
    assert back.rates is None and back.behavior is None and back.behavior_kind is None
    assert np.array_equal(back.spikes, ds.spikes)


def test_partial_read(tiny_lorenz, tmp_path):
    save_dataset(tiny_lorenz, tmp_path / "d")
    back = load_dataset(tmp_path / "d", arrays={"spikes"})
    assert back.rates is None and np.array_equal(back.spikes, tiny_lorenz.spikes)


def test_payload_corruption_detected(tiny_lorenz, tmp_path):
    p = tmp_path / "d"
    save_dataset(tiny_lorenz, p)
    raw = bytearray(p.read_bytes())
    raw[-5] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_dataset(p)


def test_truncation_detected(tiny_lorenz, tmp_path):
    p = tmp_path / "d"
    save_dataset(tiny_lorenz, p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(TruncatedFileError):
        load_dataset(p)


def test_checkpoint_file_rejected(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"EAGC" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_dataset(p)


def test_counts_beyond_u16(tmp_path):
    with pytest.raises(DatasetFormatError):
        save_dataset(TrialDataset(spikes=np.full((1, 1, 1), 70000)), tmp_path / "d")
