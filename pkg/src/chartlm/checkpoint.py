"""Self-describing binary checkpoints.

Layout: 4-byte magic, little-endian uint32 format version, uint64 header
length, UTF-8 JSON header, then raw little-endian tensor blobs in header
order. The header records every tensor's name/shape/dtype plus a config
snapshot and free-form metadata, so a file is loadable without the model
class that wrote it.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .nn import Module

MAGIC = b"CLMC"
VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], config: dict,
                    extra: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str.replace(">", "<"),
                        "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"tensors": entries, "config": config,
                         "extra": extra or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            blob = fh.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise ValueError(f"truncated checkpoint at tensor {entry['name']}")
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["config"], header["extra"]


def collect_parameters(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.parameter_map().items()}


def apply_parameters(module: Module, tensors: dict[str, np.ndarray],
                     prefix_filter: str | None = None) -> None:
    """Load arrays into the module's parameters by name; every parameter must
    be present with the exact shape."""
    pmap = module.parameter_map()
    if prefix_filter is not None:
        tensors = {k: v for k, v in tensors.items() if k.startswith(prefix_filter)}
    for name, p in pmap.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing parameter {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"shape mismatch for parameter {name}: "
                             f"checkpoint {tuple(arr.shape)}, model {tuple(p.data.shape)}")
        p.data = arr.astype(p.data.dtype, copy=True)
