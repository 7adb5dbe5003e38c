"""Atomic file writes and little-endian float32 parameter payloads.

Checkpoints are a JSON header file plus a sibling ``.bin`` payload holding
the named arrays concatenated as little-endian float32, in header order.
"""

import json
import os
import tempfile

import numpy as np


def atomic_write_bytes(path, data: bytes):
    """Write bytes via temp file + rename so failures leave no partial file."""
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def pack_f32(arrays):
    """Concatenate a name->array dict into a little-endian float32 payload.

    Returns (payload bytes, index) where index maps name -> (offset_in_floats,
    shape). Order follows dict insertion order.
    """
    chunks = []
    index = {}
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        index[name] = {"offset": offset, "shape": list(a.shape)}
        chunks.append(a.tobytes())
        offset += a.size
    return b"".join(chunks), index


def unpack_f32(payload: bytes, index):
    """Inverse of pack_f32; arrays come back as float64."""
    flat = np.frombuffer(payload, dtype="<f4")
    out = {}
    for name, meta in index.items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        out[name] = flat[start:start + n].reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path_json, header: dict, arrays):
    """Write header JSON + sibling .bin payload atomically."""
    payload, index = pack_f32(arrays)
    path_json = os.fspath(path_json)
    bin_path = os.path.splitext(path_json)[0] + ".bin"
    header = dict(header)
    header["payload"] = os.path.basename(bin_path)
    header["index"] = index
    atomic_write_bytes(bin_path, payload)
    atomic_write_json(path_json, header)


def load_checkpoint(path_json):
    """Returns (header dict, name->float64 array dict)."""
    path_json = os.fspath(path_json)
    with open(path_json, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    bin_path = os.path.join(os.path.dirname(path_json) or ".", header["payload"])
    with open(bin_path, "rb") as fh:
        payload = fh.read()
    arrays = unpack_f32(payload, header["index"])
    return header, arrays


def derive_seed(*parts) -> int:
    """Stable seed mixing for (seed, prompt index, sample index) tuples."""
    import hashlib

    key = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
