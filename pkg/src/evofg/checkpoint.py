"""Binary checkpoint container shared by expert/router/key-cache files.

Layout (all integers little-endian):
  bytes 0..3   magic "EVFG"
  bytes 4..7   format version (u32)
  bytes 8..11  header length in bytes (u32)
  header       UTF-8 JSON; carries a "tensors" list of {"name", "shape"}
  payload      for each tensor, in header order, raw float64 little-endian
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EVFG"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, header: dict, tensors: dict):
    header = dict(header)
    header["tensors"] = [
        {"name": k, "shape": list(v.shape)} for k, v in tensors.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, tensors
