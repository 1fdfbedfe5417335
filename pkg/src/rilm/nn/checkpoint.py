"""Versioned binary checkpoint container.

Layout::

    b"RILMCKPT" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header holds ``model_kind``, the model ``config`` record and a
``manifest`` of ``{name, shape, offset}`` entries; the payload is the
concatenation of every tensor as little-endian float64, row-major.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RILMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def manifest(self) -> list[dict]:
        out, offset = [], 0
        for name, arr in self.tensors.items():
            out.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        return out

    def to_bytes(self) -> bytes:
        header = {"model_kind": self.model_kind, "config": self.config, "manifest": self.manifest()}
        htext = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.tensors.values())
        return _PREFIX.pack(MAGIC, VERSION, len(htext)) + htext + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _PREFIX.size:
            raise CheckpointError("checkpoint: file shorter than fixed prefix")
        magic, version, hlen = _PREFIX.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"checkpoint: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"checkpoint: unsupported version {version}")
        start = _PREFIX.size
        if len(raw) < start + hlen:
            raise CheckpointError("checkpoint: truncated header")
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        payload = memoryview(raw)[start + hlen :]
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        expected = 0
        for entry in header["manifest"]:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
            if name in tensors:
                raise CheckpointError(f"checkpoint: duplicate tensor name {name!r}")
            if offset != expected:
                raise CheckpointError(f"checkpoint: tensor {name!r} offset {offset} != expected {expected}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            expected += nbytes
            if expected > len(payload):
                raise CheckpointError(
                    f"checkpoint: payload length {len(payload)} bytes too short for tensor {name!r}"
                )
            tensors[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        if expected != len(payload):
            raise CheckpointError(f"checkpoint: payload length {len(payload)} != manifest total {expected}")
        return cls(header["model_kind"], header["config"], tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def average_checkpoints(items) -> Checkpoint:
    """Element-wise mean of checkpoints (paths or :class:`Checkpoint` objects).

    Computed as ``first + sum(x_i - first) / k`` so that averaging identical
    copies returns the input bit for bit. The config comes from the first.
    """
    ckpts = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in items]
    if not ckpts:
        raise CheckpointError("average_checkpoints: no checkpoints given")
    first = ckpts[0]
    ref = [(n, a.shape) for n, a in first.tensors.items()]
    for c in ckpts[1:]:
        other = [(n, a.shape) for n, a in c.tensors.items()]
        if other != ref:
            for (n1, s1), (n2, s2) in zip(ref, other):
                if n1 != n2 or s1 != s2:
                    raise CheckpointError(f"average_checkpoints: manifest mismatch at tensor {n1!r}")
            longer = ref if len(ref) > len(other) else other
            raise CheckpointError(
                f"average_checkpoints: manifest mismatch at tensor {longer[min(len(ref), len(other))][0]!r}"
            )
    k = float(len(ckpts))
    out = OrderedDict()
    for name, base in first.tensors.items():
        delta = np.zeros_like(base)
        for c in ckpts[1:]:
            delta += c.tensors[name] - base
        out[name] = base + delta / k
    return Checkpoint(first.model_kind, json.loads(json.dumps(first.config)), out)
