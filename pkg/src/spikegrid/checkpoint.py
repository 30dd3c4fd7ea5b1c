"""Versioned binary checkpoints.

Layout (little-endian)::

    b"SGCK"  u16 version  32-byte schema digest
    u32 n    n bytes of UTF-8 JSON (network description + metadata)
    u32 count, then per tensor:
        u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
        prod(dims) float32 values

The schema digest covers everything that fixes parameter names and shapes,
so a checkpoint can be checked against a config before any tensor is read.
"""

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .network import NetworkSpec, param_shapes

MAGIC = b"SGCK"
VERSION = 1


class CheckpointMismatch(ConfigError):
    """The checkpoint was written for a different network layout."""


@dataclass
class Checkpoint:
    net: NetworkSpec
    params: dict
    meta: dict


def dumps(net: NetworkSpec, params: dict, meta=None) -> bytes:
    expected = param_shapes(net)
    if set(expected) != set(params):
        raise ConfigError("parameter names do not match the network description")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<H", VERSION) + net.schema_hash())
    header = json.dumps({"network": net.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)) + header)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != tuple(expected[name]):
            raise ConfigError(f"{name}: shape {arr.shape} != {tuple(expected[name])}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes, source="<bytes>", expect: NetworkSpec = None) -> Checkpoint:
    """Parse a checkpoint; with ``expect``, refuse one whose layout differs."""
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise DataError(f"{source}: not a spikegrid checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    digest = r.take(32)
    if expect is not None and digest != expect.schema_hash():
        raise CheckpointMismatch(f"{source}: checkpoint layout does not match the configured network")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n).decode())
    net = NetworkSpec.from_dict(header["network"])
    if net.schema_hash() != digest:
        raise DataError(f"{source}: schema digest does not match the stored network")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (length,) = r.unpack("<H")
        name = r.take(length).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(r.take(size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise DataError(f"{source}: trailing bytes after the last tensor")
    expected = param_shapes(net)
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise DataError(f"{source}: stored tensors do not match the stored network")
    return Checkpoint(net, params, header["meta"])


def load(path, expect: NetworkSpec = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(raw, str(path), expect)
