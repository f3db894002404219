"""HATW1 weight container.

Layout: magic ``b"HATW1"``, u32 little-endian header length, UTF-8 JSON header
``{"config": {...}, "tensors": [{"name", "shape", "offset"}, ...], "meta": {...}}``,
then the tensors back to back as little-endian float32. Offsets are in bytes
from the start of the payload.
"""
import json
import struct

import numpy as np

from headflow.errors import InputError

MAGIC = b"HATW1"


def dumps(config, tensors, meta=None):
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = {"config": config, "tensors": entries}
    if meta:
        header["meta"] = meta
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(chunks)


def loads(blob):
    if blob[:5] != MAGIC:
        raise InputError("not a HATW1 container (bad magic)")
    if len(blob) < 9:
        raise InputError("truncated container header")
    (hlen,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"corrupt container header: {exc}") from None
    payload = memoryview(blob)[9 + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise InputError(f"tensor {entry['name']} runs past end of payload")
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return header.get("config", {}), tensors, header.get("meta", {})


def write(path, config, tensors, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(config, tensors, meta))


def read(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    return loads(blob)
