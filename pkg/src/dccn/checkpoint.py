"""Binary checkpoint container.

Layout, version 1, little-endian::

    magic        8 bytes   b"DCCNCKPT"
    version      uint32    1
    meta_len     uint32    length of the JSON metadata blob
    meta         meta_len  UTF-8 JSON (model config, seed, step, ...)
    n_entries    uint32
    then per entry, in sorted name order:
      name_len   uint16
      name       name_len bytes, UTF-8 (e.g. encoder.layer0.selfattn.WQ)
      ndim       uint8
      dims       ndim x uint32
      data       prod(dims) x float64, row-major

Nothing may follow the last entry.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DCCNCKPT"
VERSION = 1


def dumps(state, meta=None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw), arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def loads(buf):
    """Return ``(state, meta)`` from checkpoint bytes."""
    r = _Reader(bytes(buf))
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid UTF-8 JSON", offset=meta_at) from None
    (count,) = r.unpack("<I", "entry count")
    state = {}
    for _ in range(count):
        at = r.pos
        name_len, ndim = r.unpack("<HB", "entry header")
        try:
            name = r.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", offset=at + 3) from None
        if name in state:
            raise FormatError(f"duplicate entry {name!r}", offset=at)
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(8 * n, f"data of {name}")
        state[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry", offset=r.pos)
    return state, meta


def save(path, state, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(state, meta))


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return loads(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0]}") from None


def save_model(path, model, **meta):
    import dataclasses

    meta = dict(meta)
    meta["model"] = dataclasses.asdict(model.cfg)
    meta["seed"] = model.seed
    save(path, model.state_dict(), meta)


def load_model(path):
    from .config import ModelConfig
    from .multimodal import DCCNModel

    state, meta = load(path)
    model = DCCNModel(ModelConfig(**meta["model"]), seed=meta.get("seed", 1))
    model.load_state_dict(state)
    return model, meta
