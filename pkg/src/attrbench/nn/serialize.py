"""Binary checkpoints: magic, JSON descriptor, then float32 little-endian arrays."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATRBCKP1"


class CheckpointError(Exception):
    pass


def save_arrays(path, descriptor: dict, named_arrays) -> None:
    """Write arrays in the given order; their names and shapes go in the descriptor."""
    named_arrays = list(named_arrays)
    meta = dict(descriptor)
    meta["tensors"] = [{"name": n, "shape": list(np.shape(a))} for n, a in named_arrays]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in named_arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_arrays(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated descriptor")
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        meta = json.loads(raw[pos : pos + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt descriptor") from exc
    pos += n
    arrays = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if len(raw) < pos + 4 * count:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return meta, arrays
