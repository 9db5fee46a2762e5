"""Single-file checkpoints: JSON header plus named raw array blobs.

Layout, all little-endian:

    magic "EV2K" | u32 version | u64 total file length
    u32 header length | header JSON (utf-8, sorted keys)
    u32 blob count | blobs | u32 crc32 of everything before it

Each blob is u16 name length, name, u8 dtype code, u8 ndim, u32 per-dim
sizes, then the raw array bytes.  Parameters live under "param.", optimizer
moments under "opt.m." and "opt.v.".  Storage "f32" halves the file at the
cost of rounding; loads always come back as float64.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import ModelDims
from .errors import (
    BadMagicError,
    CheckpointError,
    ChecksumMismatchError,
    TruncatedFileError,
    VersionUnsupportedError,
)
from .experts import ExpertBank, init_bank
from .trees import flatten_tree

MAGIC = b"EV2K"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    bank: ExpertBank
    step: int
    phase: str
    beta_start: float
    beta_end: float
    opt_state: dict | None
    vocab_words: list[str] | None
    header: dict


def _bank_flat(bank: ExpertBank) -> dict:
    tree = {"experts": [e.weights for e in bank.experts],
            "text": bank.text_encoder.weights}
    return flatten_tree(tree)


def _pack_blob(buf: bytearray, name: str, arr: np.ndarray, storage: str) -> None:
    if arr.dtype == np.float64 and storage == "f32":
        arr = arr.astype("<f4")
    else:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype("<f8")
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw))
    buf += raw
    buf += struct.pack("<BB", _DTYPE_CODES[arr.dtype.newbyteorder("<")], arr.ndim)
    for dim in arr.shape:
        buf += struct.pack("<I", dim)
    buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


class _Cursor:
    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file ends at {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(path, bank: ExpertBank, *, step: int, beta_start: float,
                    beta_end: float, phase: str = "experts",
                    opt_state: dict | None = None,
                    vocab_words: list[str] | None = None,
                    storage: str = "f64", extra: dict | None = None) -> None:
    if storage not in ("f64", "f32"):
        raise CheckpointError(f"unknown storage mode {storage!r}")
    header = {
        "T": bank.T,
        "n_experts": bank.n,
        "dims": asdict(bank.dims),
        "beta_start": float(beta_start),
        "beta_end": float(beta_end),
        "step": int(step),
        "phase": phase,
        "storage": storage,
        "opt_step": None if opt_state is None else int(opt_state["step"]),
        "vocab_words": vocab_words,
    }
    if extra:
        header.update(extra)

    blobs = bytearray()
    count = 0
    for name, arr in sorted(_bank_flat(bank).items()):
        _pack_blob(blobs, f"param.{name}", np.asarray(arr), storage)
        count += 1
    if opt_state is not None:
        for kind in ("m", "v"):
            for name, arr in sorted(opt_state[kind].items()):
                _pack_blob(blobs, f"opt.{kind}.{name}", np.asarray(arr), storage)
                count += 1

    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(header_raw))
    body += header_raw
    body += struct.pack("<I", count)
    body += blobs

    total = 4 + 4 + 8 + len(body) + 4
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", total)
    out += body
    out += struct.pack("<I", zlib.crc32(bytes(out)))

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, no room for magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, header cut off")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise VersionUnsupportedError(f"{path}: version {version}, expected {VERSION}")
    total = struct.unpack("<Q", data[8:16])[0]
    if len(data) < total:
        raise TruncatedFileError(f"{path}: declares {total} bytes, has {len(data)}")
    if len(data) > total:
        raise CheckpointError(f"{path}: {len(data) - total} trailing bytes")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumMismatchError(f"{path}: crc32 mismatch")

    cur = _Cursor(data, 16)
    header_len = cur.u32()
    try:
        header = json.loads(cur.take(header_len).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    count = cur.u32()
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = cur.take(cur.u16()).decode("utf-8")
        code = cur.u8()
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        ndim = cur.u8()
        shape = tuple(cur.u32() for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        raw = cur.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        blobs[name] = arr.astype(np.float64) if dtype.kind == "f" else arr.astype(np.int64)

    dims = ModelDims(**header["dims"])
    bank = init_bank(dims, header["n_experts"], header["T"], seed=0)
    flat = _bank_flat(bank)
    want = {f"param.{name}" for name in flat}
    have = {name for name in blobs if name.startswith("param.")}
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(
            f"{path}: parameter names do not match model layout "
            f"(missing {missing}, unexpected {extra})")
    for name, arr in flat.items():
        saved = blobs[f"param.{name}"]
        if saved.shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {saved.shape}, model wants {arr.shape}")
        arr[...] = saved

    opt_state = None
    if header.get("opt_step") is not None:
        opt_state = {"step": int(header["opt_step"]), "m": {}, "v": {}}
        for blob_name, arr in blobs.items():
            if blob_name.startswith("opt.m."):
                opt_state["m"][blob_name[len("opt.m."):]] = arr
            elif blob_name.startswith("opt.v."):
                opt_state["v"][blob_name[len("opt.v."):]] = arr

    return Checkpoint(bank=bank, step=int(header["step"]), phase=header["phase"],
                      beta_start=float(header["beta_start"]),
                      beta_end=float(header["beta_end"]),
                      opt_state=opt_state,
                      vocab_words=header.get("vocab_words"), header=header)
