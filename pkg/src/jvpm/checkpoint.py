"""Binary checkpoints.

Layout (little-endian)::

    "JVCK" | version u32
    | kind str | config str | meta str           (str = u32 length + utf-8)
    | tensor table                                  (parameters)
    | adam_t u64 | tensor table (m) | tensor table (v)
    | step u64 | rng state str (json) | tokenizer seed u64

tensor table = u32 count, then per tensor: name str | rank u32 | dims u32*rank
| f64 data.  Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"JVCK"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config_text: str
    tensors: dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    tokenizer_seed: int = 0
    meta: dict[str, str] = field(default_factory=dict)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        parts.append(_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def encode(ck: Checkpoint) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in ck.meta.items())
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        _str(ck.kind),
        _str(ck.config_text),
        _str(meta),
        _table(ck.tensors),
        struct.pack("<Q", ck.adam_t),
        _table(ck.adam_m),
        _table(ck.adam_v),
        struct.pack("<Q", ck.step),
        _str(json.dumps(ck.rng_state, sort_keys=True)),
        struct.pack("<Q", ck.tokenizer_seed),
    ])


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.name}: truncated checkpoint (needed {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def table(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.str()
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def decode(buf: bytes, name: str = "<bytes>") -> Checkpoint:
    try:
        return _decode(buf, name)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error, ValueError) as exc:
        raise MalformedCheckpointError(f"{name}: malformed checkpoint contents ({exc})") from exc


def _decode(buf: bytes, name: str) -> Checkpoint:
    r = _Reader(buf, name)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{name}: checkpoint version {version}, this build reads {VERSION}")
    kind, config_text, meta_text = r.str(), r.str(), r.str()
    tensors = r.table()
    adam_t = r.u64()
    m, v = r.table(), r.table()
    step = r.u64()
    rng_state = json.loads(r.str())
    seed = r.u64()
    if r.pos != len(buf):
        raise CheckpointError(f"{name}: {len(buf) - r.pos} trailing bytes after checkpoint")
    meta = dict(ln.split("=", 1) for ln in meta_text.splitlines() if ln)
    return Checkpoint(kind, config_text, tensors, adam_t, m, v, step, rng_state, seed, meta)


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path))
