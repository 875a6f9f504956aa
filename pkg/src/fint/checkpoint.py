"""FINTCKPT container: magic, version, JSON header, raw float64 parameter blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FINTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header byte length


class CheckpointError(ValueError):
    pass


class SchemaMismatch(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"schema hash mismatch: checkpoint {found} vs dataset {expected}")
        self.expected, self.found = expected, found


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` (in sorted name order) after a JSON header.

    ``header`` must be JSON-serializable; a ``tensors`` manifest with shapes and
    byte offsets (relative to the end of the header) is added. Output bytes
    depend only on the inputs.
    """
    manifest, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "tensors": manifest}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load(path, expected_schema_hash: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a FINTCKPT file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
    if expected_schema_hash is not None and header.get("schema_hash") != expected_schema_hash:
        raise SchemaMismatch(expected_schema_hash, header.get("schema_hash"))
    tensors = {}
    for t in header["tensors"]:
        lo = start + t["offset"]
        if lo + t["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        tensors[t["name"]] = np.frombuffer(buf, "<f8", t["nbytes"] // 8, lo).reshape(t["shape"]).copy()
    return header, tensors
