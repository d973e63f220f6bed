"""Named-tensor checkpoint archive.

Layout: an ASCII magic line, a decimal header-length line, a JSON header
(metadata echo plus a tensor table of name/shape/offset), one newline, then
a contiguous little-endian float32 payload. Offsets are validated to tile
the payload exactly; loading either returns every tensor or raises without
returning a partial model.
"""
from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor

MAGIC = b"KPLIFT-CKPT-1\n"
_DTYPE = "<f4"


def save_checkpoint(params, meta, path):
    """Write named tensors (Tensor or ndarray values) as float32 plus JSON
    metadata. Parameter order follows the dict's insertion order."""
    table = []
    blobs = []
    offset = 0
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        blob = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPE)).tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {"meta": meta, "tensors": table, "payload_bytes": offset}
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors: name -> float64 ndarray, meta).

    Validates the tensor table against the payload: wrong offsets, short or
    oversized payloads fail with the offending tensor named.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = blob.find(b"\n", pos)
    if nl < 0:
        raise ValueError(f"{path}: truncated header length")
    try:
        header_len = int(blob[pos:nl])
    except ValueError:
        raise ValueError(f"{path}: invalid header length") from None
    header_start = nl + 1
    header_end = header_start + header_len
    if header_end + 1 > len(blob):
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start:header_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ValueError(f"{path}: invalid header JSON: {e}") from None
    payload = blob[header_end + 1 :]
    declared = header.get("payload_bytes")
    table = header.get("tensors", [])
    names = [t["name"] for t in table]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"{path}: duplicate tensor names {dupes}")
    itemsize = np.dtype(_DTYPE).itemsize
    expected_offset = 0
    tensors = {}
    for entry in table:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if entry.get("dtype", _DTYPE) != _DTYPE:
            raise ValueError(f"{path}: tensor {name!r}: unsupported dtype {entry['dtype']}")
        if entry["offset"] != expected_offset:
            raise ValueError(
                f"{path}: tensor {name!r}: offset {entry['offset']} does not match "
                f"expected {expected_offset} (manifest/payload mismatch)"
            )
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize if shape else itemsize
        if shape == ():
            nbytes = itemsize
        end = expected_offset + nbytes
        if end > len(payload):
            raise ValueError(
                f"{path}: payload truncated: tensor {name!r} needs bytes "
                f"[{expected_offset}, {end}) of {len(payload)}"
            )
        arr = np.frombuffer(payload[expected_offset:end], dtype=np.dtype(_DTYPE))
        tensors[name] = arr.reshape(shape).astype(np.float64)
        expected_offset = end
    if declared is not None and declared != expected_offset:
        raise ValueError(
            f"{path}: header declares {declared} payload bytes, table consumes {expected_offset}"
        )
    if len(payload) != expected_offset:
        raise ValueError(
            f"{path}: {len(payload) - expected_offset} trailing payload bytes"
        )
    return tensors, header.get("meta", {})


def restore_into(param_dict, tensors, where="checkpoint"):
    """Copy loaded arrays into live parameter tensors; the name sets and
    shapes must match exactly."""
    missing = sorted(set(param_dict) - set(tensors))
    if missing:
        raise ValueError(f"{where}: missing tensors {missing}")
    extra = sorted(set(tensors) - set(param_dict))
    if extra:
        raise ValueError(f"{where}: unexpected tensors {extra}")
    for name, tensor in param_dict.items():
        arr = tensors[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"{where}: tensor {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr
