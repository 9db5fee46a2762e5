"""Checkpoint file format: round trips, storage modes, corruption rejection."""

import struct

import numpy as np
import pytest

from deskdiff.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from deskdiff.errors import (
    BadMagicError,
    CheckpointError,
    ChecksumMismatchError,
    TruncatedFileError,
    VersionUnsupportedError,
)
from deskdiff.experts import init_bank
from deskdiff.training import bank_flat_params, init_opt_state


def _write(path, bank, **over):
    kw = dict(step=7, beta_start=1e-3, beta_end=0.2, phase="experts",
              vocab_words=["red", "square"])
    kw.update(over)
    save_checkpoint(path, bank, **kw)


# ---------------------------------------------------------------------------
# round trips
# ---------------------------------------------------------------------------

def test_roundtrip_is_bitwise_at_f64(tmp_path, tiny_bank):
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank)
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.phase == "experts"
    assert ck.beta_start == 1e-3 and ck.beta_end == 0.2
    assert ck.vocab_words == ["red", "square"]
    assert ck.bank.n == 2 and ck.bank.T == 10
    assert ck.bank.dims == tiny_bank.dims
    orig = bank_flat_params(tiny_bank)
    back = bank_flat_params(ck.bank)
    assert orig.keys() == back.keys()
    for name in orig:
        np.testing.assert_array_equal(back[name], orig[name])


def test_f32_storage_rounds_but_stays_close(tmp_path, tiny_bank):
    p64, p32 = tmp_path / "a.bin", tmp_path / "b.bin"
    _write(p64, tiny_bank, storage="f64")
    _write(p32, tiny_bank, storage="f32")
    assert p32.stat().st_size < 0.6 * p64.stat().st_size
    orig = bank_flat_params(tiny_bank)
    back = bank_flat_params(load_checkpoint(p32).bank)
    for name in orig:
        assert back[name].dtype == np.float64
        np.testing.assert_array_equal(back[name],
                                      orig[name].astype("<f4").astype("<f8"))


def test_opt_state_roundtrip(tmp_path, tiny_bank):
    flat = bank_flat_params(tiny_bank)
    opt = init_opt_state(flat)
    opt["step"] = 5
    rng = np.random.default_rng(0)
    for name in opt["m"]:
        opt["m"][name] += rng.standard_normal(opt["m"][name].shape)
        opt["v"][name] += rng.random(opt["v"][name].shape)
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank, opt_state=opt)
    ck = load_checkpoint(path)
    assert ck.opt_state["step"] == 5
    for kind in ("m", "v"):
        assert ck.opt_state[kind].keys() == opt[kind].keys()
        for name in opt[kind]:
            np.testing.assert_array_equal(ck.opt_state[kind][name], opt[kind][name])


def test_without_opt_state_none_comes_back(tmp_path, tiny_bank):
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank)
    assert load_checkpoint(path).opt_state is None


def test_extra_header_fields_survive(tmp_path, tiny_bank):
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank, extra={"w_a": 0.01, "w_l": 0.1, "train_seed": 3,
                                   "partition": [[1, 5], [6, 10]]})
    header = load_checkpoint(path).header
    assert header["w_a"] == 0.01 and header["w_l"] == 0.1
    assert header["train_seed"] == 3
    assert header["partition"] == [[1, 5], [6, 10]]


def test_save_is_atomic_no_tmp_left_behind(tmp_path, tiny_bank):
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank)
    assert not (tmp_path / "ck.bin.tmp").exists()
    # overwriting in place keeps the file loadable
    _write(path, tiny_bank, step=9)
    assert load_checkpoint(path).step == 9


def test_unknown_storage_mode_rejected(tmp_path, tiny_bank):
    with pytest.raises(CheckpointError):
        _write(tmp_path / "ck.bin", tiny_bank, storage="f16")


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

@pytest.fixture()
def good_file(tmp_path, tiny_bank):
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank)
    return path


def test_bad_magic(good_file):
    data = good_file.read_bytes()
    good_file.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(good_file)


def test_unsupported_version(good_file):
    data = bytearray(good_file.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    # version sits before the checksum region check
    good_file.write_bytes(bytes(data))
    with pytest.raises(VersionUnsupportedError):
        load_checkpoint(good_file)


def test_truncations(good_file):
    data = good_file.read_bytes()
    for keep in (0, 3, 10, len(data) // 2, len(data) - 1):
        good_file.write_bytes(data[:keep])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(good_file)


def test_trailing_garbage(good_file):
    good_file.write_bytes(good_file.read_bytes() + b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(good_file)


def test_flipped_payload_byte_fails_the_checksum(good_file):
    data = bytearray(good_file.read_bytes())
    data[len(data) // 2] ^= 0xFF
    good_file.write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatchError):
        load_checkpoint(good_file)


def test_magic_constant_is_stable():
    assert MAGIC == b"EV2K"


def test_loaded_bank_is_usable(tmp_path, tiny_bank, sched10):
    from deskdiff.sampling import sample
    path = tmp_path / "ck.bin"
    _write(path, tiny_bank)
    bank = load_checkpoint(path).bank
    a = sample(bank, sched10, steps=5, seed=0)
    b = sample(tiny_bank, sched10, steps=5, seed=0)
    np.testing.assert_array_equal(a.image, b.image)
