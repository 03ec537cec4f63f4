"""Checkpoint file format.

Layout (all integers little-endian):

    bytes 0..4    magic b"HACK"
    bytes 4..8    format version, uint32
    bytes 8..12   header length H, uint32
    bytes 12..12+H  header, UTF-8 JSON
    then          raw tensor data, concatenated

The header holds the model config and its sha256 hash, normalization
stats, the diffusion schedule parameters, optional training metadata, and
a tensor index: name, shape, dtype, byte offset into the data section.
Floats in the header are written with Python repr semantics, which
round-trip bit-exactly through JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"HACK"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    norm_low: np.ndarray
    norm_high: np.ndarray
    schedule: dict
    meta: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config)


def save(path: str | Path, params: dict[str, Tensor | np.ndarray], model_config: dict,
         norm_low, norm_high, schedule: dict, meta: dict | None = None) -> None:
    arrays = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4" if arr.dtype == np.float32 else "<f8")

    index = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.str, "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes

    header = {
        "format_version": FORMAT_VERSION,
        "config": model_config,
        "config_hash": config_hash(model_config),
        "norm_low": [float(v) for v in np.asarray(norm_low, dtype=np.float64)],
        "norm_high": [float(v) for v in np.asarray(norm_high, dtype=np.float64)],
        "schedule": schedule,
        "meta": meta or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(arrays):
            f.write(arrays[name].tobytes())


def load(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    data = raw[12 + hlen:]

    params = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(data[start:start + nbytes], dtype=dt).reshape(entry["shape"])
        params[entry["name"]] = arr.copy()

    stored_hash = header["config_hash"]
    actual = config_hash(header["config"])
    if stored_hash != actual:
        raise CheckpointError(f"{path}: config hash mismatch ({stored_hash} != {actual})")

    return Checkpoint(
        params=params,
        model_config=header["config"],
        norm_low=np.asarray(header["norm_low"], dtype=np.float64),
        norm_high=np.asarray(header["norm_high"], dtype=np.float64),
        schedule=header["schedule"],
        meta=header.get("meta", {}),
    )
