"""Versioned binary checkpoints.

Layout: 8-byte magic ``KGACTCK1``, a little-endian uint32 header length, a
UTF-8 JSON header (sorted keys) listing array names/shapes/dtypes plus free
-form metadata, then the raw array payloads little-endian in header order.
"""

import json
import struct

import numpy as np

from .model import ModelParams

MAGIC = b"KGACTCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, params: ModelParams, meta: dict) -> None:
    arrays = list(params.as_dict().items())
    header = {
        "arrays": [
            {"name": name, "shape": list(a.shape), "dtype": np.dtype(a.dtype).str}
            for name, a in arrays
        ],
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        loaded = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated array {spec['name']}")
            loaded[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    return ModelParams.from_dict(loaded), header["meta"]
