"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"HRFCKPT1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header
    remainder     payload: raw array bytes, concatenated

The header holds ``config_hash``, ``seeds`` and free-form ``meta`` plus a
``tensors`` list of ``{path, shape, dtype, offset, nbytes}`` records.
``dtype`` is ``"<f4"`` for 32-bit runs and ``"<f8"`` for 64-bit runs;
``offset`` is relative to the start of the payload.  Arrays are stored
C-ordered, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"HRFCKPT1"
_ALLOWED = {"<f4", "<f8", "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], *, config_hash: str = "",
                    seeds: Mapping | None = None, meta: Mapping | None = None) -> None:
    records = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _ALLOWED:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        records.append({"path": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": 1, "config_hash": config_hash, "seeds": dict(seeds or {}),
              "meta": dict(meta or {}), "tensors": records}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, header)``; ``tensors`` maps path -> numpy array."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    tensors = {}
    for rec in header["tensors"]:
        if rec["dtype"] not in _ALLOWED:
            raise CheckpointError(f"{rec['path']}: unsupported dtype {rec['dtype']}")
        raw = payload[rec["offset"]: rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"{rec['path']}: truncated payload")
        arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"])
        tensors[rec["path"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header
