"""Single-file binary checkpoints.

Layout::

    b"TVOOCKPT" | u32 version | u32 index length | JSON index | blobs

The index maps blob keys to ``{offset, shape, dtype}`` (offsets are
relative to the start of the blob section) and carries a free-form
``meta`` object. Blobs are little-endian float64 so parameters survive a
round trip bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["CheckpointError", "CheckpointData", "write_checkpoint", "read_checkpoint", "VERSION"]

MAGIC = b"TVOOCKPT"
VERSION = 1
_DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    blobs: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Blobs under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.blobs.items() if k.startswith(p)}


def write_checkpoint(path, blobs: Mapping[str, np.ndarray], meta: Mapping) -> None:
    index = {}
    chunks = []
    offset = 0
    for key in sorted(blobs):
        arr = np.asarray(blobs[key], dtype=_DTYPE)  # keeps 0-d shapes
        raw = arr.tobytes()
        index[key] = {"offset": offset, "shape": list(arr.shape), "dtype": "f8"}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({"blobs": index, "meta": meta}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(head)) + head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> CheckpointData:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated index")
    try:
        head = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed index ({exc})") from None
    body = memoryview(data)[16 + hlen:]
    blobs = {}
    for key, ent in head["blobs"].items():
        n = int(np.prod(ent["shape"], dtype=np.int64)) * 8
        start = ent["offset"]
        if ent.get("dtype") != "f8" or start + n > len(body):
            raise CheckpointError(f"{path}: blob {key!r} is truncated or has an unknown dtype")
        blobs[key] = np.frombuffer(body[start:start + n], dtype=_DTYPE).reshape(ent["shape"]).astype(np.float64)
    return CheckpointData(blobs, head["meta"])
