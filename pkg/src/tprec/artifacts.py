"""Versioned binary container for named numpy arrays plus a JSON header.

Layout: magic, format version (u32), header length (u64), UTF-8 JSON
header, then the raw little-endian array buffers back to back. Nothing
time-dependent is written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TPRECART"
CONTAINER_VERSION = 1


def save_arrays(path, arrays: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    specs = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    doc = {"meta": dict(header or {}), "arrays": specs}
    head = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a tprec artifact")
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<IQ", data, pos)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos += struct.calcsize("<IQ")
    doc = json.loads(data[pos : pos + head_len].decode("utf-8"))
    base = pos + head_len
    arrays = {}
    for spec in doc["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        start = base + spec["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
    return arrays, doc["meta"]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
