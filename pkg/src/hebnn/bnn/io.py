"""Versioned binary model files.

Layout::

    b"HEBNNMDL" | u16 version | u32 header length | JSON header | float64 tensors

The JSON header (sorted keys, compact) holds the architecture, the tensor
table (name, shape, byte offset) and the activation-range statistics.
Tensors follow in table order as little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import BayesianNetwork

MAGIC = b"HEBNNMDL"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class ModelFormatError(ValueError):
    pass


def model_to_bytes(network: BayesianNetwork, stats: dict | None = None, meta: dict | None = None) -> bytes:
    network.validate()
    tensors, table, offset = [], [], 0
    for i, layer in enumerate(network.linear_layers):
        for name, arr in layer.params().items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"name": f"{i}.{name}", "shape": list(arr.shape), "offset": offset})
            tensors.append(data)
            offset += len(data)
    header = {"architecture": network.config(), "tensors": table,
              "stats": stats or {}, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(tensors)


def model_from_bytes(data: bytes) -> tuple[BayesianNetwork, dict, dict]:
    if len(data) < _PREFIX.size:
        raise ModelFormatError("model file truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise ModelFormatError("model header truncated")
    try:
        header = json.loads(data[_PREFIX.size:start])
        network = BayesianNetwork.from_config(header["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from exc
    body = memoryview(data)[start:]
    entries = {e["name"]: e for e in header["tensors"]}
    expected = sum(8 * int(np.prod(e["shape"])) for e in header["tensors"])
    if len(body) != expected:
        raise ModelFormatError(f"model body is {len(body)} bytes, expected {expected}")
    for i, layer in enumerate(network.linear_layers):
        for name, arr in layer.params().items():
            e = entries.get(f"{i}.{name}")
            if e is None or tuple(e["shape"]) != arr.shape:
                raise ModelFormatError(f"tensor {i}.{name} missing or mis-shaped")
            vals = np.frombuffer(body, dtype="<f8", count=arr.size, offset=e["offset"])
            if not np.all(np.isfinite(vals)):
                raise ModelFormatError(f"tensor {i}.{name} has non-finite values")
            arr[...] = vals.reshape(arr.shape)
    return network, header.get("stats", {}), header.get("meta", {})


def save_model(path, network: BayesianNetwork, stats: dict | None = None, meta: dict | None = None):
    Path(path).write_bytes(model_to_bytes(network, stats, meta))


def load_model(path) -> tuple[BayesianNetwork, dict, dict]:
    return model_from_bytes(Path(path).read_bytes())
