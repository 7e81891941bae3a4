"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"VDMCKPT\\0"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       raw little-endian tensor payloads, in header order

The header carries the model config, training-stage tag, RNG state, free-form
metadata and a tensor table ``[{name, dtype, shape, offset, nbytes}]`` with
offsets relative to the first payload byte. Serialisation is canonical, so
``save(load(path))`` reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VDMCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1"}


@dataclass
class Checkpoint:
    config: dict
    stage: str
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        key = arr.dtype.name
        if key not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        table.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "stage": ckpt.stage,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def loads(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        lo = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=lo)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return Checkpoint(header["config"], header["stage"], tensors, header["rng_state"], header["meta"])


def save(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, dumps(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
