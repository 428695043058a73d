"""Binary checkpoints: a small JSON header plus named little-endian f64 arrays.

Layout::

    magic        8 bytes  b"TRIGCKPT"
    version      u32
    config hash  32 bytes (SHA-256 of the network config)
    iteration    u64
    meta         u32 length + UTF-8 JSON (RNG states, optimizer counters, config echo)
    sections     u32 count, then per section:
                 u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims, f64 payload
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TRIGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    iteration: int
    meta: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        """Arrays whose names start with ``prefix + '/'``, with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.sections.items() if k.startswith(p)}

    def put(self, prefix: str, arrays: dict):
        for k, v in arrays.items():
            self.sections[f"{prefix}/{k}"] = np.asarray(v, dtype=np.float64)


def to_bytes(ck: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(ck.config_hash),
           struct.pack("<Q", ck.iteration)]
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ck.sections))]
    for name, arr in ck.sections.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        out += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(out)


def from_bytes(buf: bytes, expect_hash: str | None = None) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    chash = buf[pos:pos + 32].hex()
    pos += 32
    if expect_hash is not None and chash != expect_hash:
        raise CheckpointError(f"config hash mismatch: file {chash[:12]}, expected {expect_hash[:12]}")
    (iteration,) = take("<Q")
    (mlen,) = take("<I")
    meta = json.loads(buf[pos:pos + mlen].decode())
    pos += mlen
    (count,) = take("<I")
    sections = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        sections[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return Checkpoint(chash, iteration, meta, sections)


def save(path, ck: Checkpoint):
    try:
        with open(path, "wb") as fh:
            fh.write(to_bytes(ck))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load(path, expect_hash: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(buf, expect_hash)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
