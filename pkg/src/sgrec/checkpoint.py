"""Binary checkpoint format.

Layout (little-endian)::

    b"SGRC1"
    u32 header_len, header JSON (UTF-8, sorted keys)
    u32 record_count
    record*: u16 name_len, name, u8 dtype, u8 ndim, u32 dims[ndim], u64 nbytes, raw data
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .engine import AdamState
from .errors import CompatibilityError, IntegrityError

MAGIC = b"SGRC1"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_DIGEST = 32


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    adam: AdamState
    epoch: int
    rng_state: dict
    vocab_fingerprint: str
    shape: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def header(self) -> dict:
        return {
            "version": self.version,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "vocab_fingerprint": self.vocab_fingerprint,
            "shape": self.shape,
            "param_names": list(self.params),
            "adam": {
                "learning_rate": self.adam.learning_rate,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "epsilon": self.adam.epsilon,
                "step": self.adam.step,
            },
        }


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot serialise dtype {arr.dtype} for {name}")
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    data = arr.astype(_DTYPES[code], copy=False).tobytes()
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    names = list(ckpt.params)
    records += [(f"adam_m/{k}", m) for k, m in zip(names, ckpt.adam.m)]
    records += [(f"adam_v/{k}", v) for k, v in zip(names, ckpt.adam.v)]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + _DIGEST or not raw.startswith(MAGIC):
        if raw.startswith(MAGIC[: len(raw)]) and len(raw) < len(MAGIC) + _DIGEST:
            raise IntegrityError("checkpoint is truncated")
        raise CompatibilityError("not an sgrec checkpoint (bad magic)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted file)")

    r = _Reader(body)
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise CompatibilityError(f"checkpoint version {header.get('version')} is not supported (expected {FORMAT_VERSION})")
    if expected_fingerprint is not None and header["vocab_fingerprint"] != expected_fingerprint:
        raise CompatibilityError("checkpoint was trained on a different vocabulary (fingerprint mismatch)")

    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        if code not in _DTYPES:
            raise IntegrityError(f"unknown dtype code {code} in record {name}")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after checkpoint records")

    names = header["param_names"]
    try:
        params = {k: arrays[f"param/{k}"] for k in names}
        adam = AdamState(**header["adam"])
        adam.m = [arrays[f"adam_m/{k}"] for k in names]
        adam.v = [arrays[f"adam_v/{k}"] for k in names]
    except KeyError as exc:
        raise IntegrityError(f"checkpoint is missing record {exc}") from exc
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        params=params,
        adam=adam,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        vocab_fingerprint=header["vocab_fingerprint"],
        shape=header["shape"],
        version=header["version"],
    )


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_fingerprint)
