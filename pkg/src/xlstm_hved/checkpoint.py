"""Binary checkpoint archive.

Layout (little-endian)::

    b"XHVD" | u32 version
    u32 n | n parameter entries
    u32 n | n optimizer entries
    u32 n | n bytes of UTF-8 JSON metadata (RNG states, configs, step)

Each entry is ``u32 name_len | name | u8 dtype | u8 rank | u64 dims[rank] | raw data``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"XHVD"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class CheckpointError(ParseError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError("dtype", f"{name}: cannot store dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(ckpt.params))]
    parts += [_encode_entry(k, v) for k, v in ckpt.params.items()]
    parts.append(struct.pack("<I", len(ckpt.optimizer)))
    parts += [_encode_entry(k, v) for k, v in ckpt.optimizer.items()]
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated", f"file ends inside {what} (need {n} bytes at {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def entry(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<I", "entry name length")
        name = self.take(n, "entry name").decode("utf-8")
        code, rank = self.unpack("<BB", f"{name} header")
        if code not in DTYPE_CODES:
            raise CheckpointError("dtype", f"{name}: unknown dtype code {code}")
        dims = self.unpack(f"<{rank}Q", f"{name} dims")
        dt = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(count * dt.itemsize, f"{name} data"), dtype=dt)
        return name, data.reshape(dims).astype(dt.newbyteorder("="))


def decode(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError("version", f"format version {version} is not supported (expected {VERSION})")
    (n,) = r.unpack("<I", "parameter count")
    params = dict(r.entry() for _ in range(n))
    (n,) = r.unpack("<I", "optimizer count")
    optimizer = dict(r.entry() for _ in range(n))
    (n,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("metadata", str(exc)) from None
    if r.pos != len(raw):
        raise CheckpointError("trailing", f"{len(raw) - r.pos} unexpected bytes after metadata")
    return Checkpoint(params, optimizer, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
