"""Binary checkpoint format.

Layout (little-endian):

    b"OBRG" | version u32 | entry count u32
    per entry: name length u32 | name utf-8 | dtype tag u8 | rank u8 | dims u32 * rank | byte length u64
    payloads, concatenated in table order
    CRC32 of the payload region, u32

Run metadata (fingerprint, step, stage, rng state, optimizer step count) is a
JSON document stored as the uint8 entry ``__meta__``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CompatibilityError, CorruptionError

MAGIC = b"OBRG"
VERSION = 1
META = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


def _to_numpy(t) -> np.ndarray:
    arr = t.detach().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in _TAGS:
        raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")
    return np.array(arr, dtype=dt, order="C", copy=True)


def encode(tensors: dict, meta: dict) -> bytes:
    entries = {META: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name in sorted(tensors):
        entries[name] = _to_numpy(tensors[name])
    table = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    payload = []
    for name, arr in entries.items():
        nb = name.encode()
        table.append(struct.pack("<I", len(nb)) + nb)
        table.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        table.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.tobytes()
        table.append(struct.pack("<Q", len(data)))
        payload.append(data)
    body = b"".join(payload)
    return b"".join(table) + body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    def need(n, what):
        if pos + n > len(data):
            raise CorruptionError(f"checkpoint truncated while reading {what}")

    pos = 0
    need(12, "header")
    if data[:4] != MAGIC:
        raise CorruptionError("not an OBRG checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CompatibilityError(f"checkpoint format version {version}, expected {VERSION}")
    pos = 12
    table = []
    for _ in range(count):
        need(4, "entry name length")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(nlen + 2, "entry name")
        name = data[pos:pos + nlen].decode()
        pos += nlen
        tag, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CorruptionError(f"unknown dtype tag {tag} for {name}")
        need(4 * rank + 8, "entry dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        (blen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        table.append((name, _DTYPES[tag], dims, blen))
    start = pos
    total = sum(t[3] for t in table)
    need(total + 4, "payload")
    body = data[start:start + total]
    (crc,) = struct.unpack_from("<I", data, start + total)
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint payload CRC mismatch")
    if start + total + 4 != len(data):
        raise CorruptionError("trailing bytes after checkpoint CRC")
    tensors, meta, off = {}, None, 0
    for name, dt, dims, blen in table:
        arr = np.frombuffer(body, dtype=dt, count=blen // dt.itemsize, offset=off).reshape(dims)
        off += blen
        if name == META:
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = torch.from_numpy(arr.copy())
    if meta is None:
        raise CorruptionError("checkpoint has no metadata entry")
    return tensors, meta


def save(path: str | Path, tensors: dict, meta: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    tmp.replace(path)


def load(path: str | Path, fingerprint: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptionError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors, meta = decode(data)
    if fingerprint is not None and meta.get("fingerprint") != fingerprint:
        raise CompatibilityError(
            f"checkpoint {path} was written under config fingerprint {meta.get('fingerprint')}, "
            f"current config is {fingerprint}")
    return tensors, meta
