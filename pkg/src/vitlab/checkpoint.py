"""Named-tensor checkpoints and their on-disk format.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
raw little-endian float32 data. The header maps each canonical tensor name
to ``{"dtype": "f32", "shape": [...], "offset": o, "nbytes": n}`` with
offsets relative to the start of the data section, plus a
``"__metadata__"`` entry carrying the model geometry (see
:meth:`vitlab.vit.ViTConfig.to_meta`).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .vit import ViT, ViTConfig, canonical_names, check_weights, expected_shapes

_META_KEY = "__metadata__"


class CheckpointError(ValueError):
    """Checkpoint contents disagree with their metadata."""


class CheckpointFormatError(CheckpointError):
    """The file is not a parseable checkpoint."""


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()}, json.loads(json.dumps(self.meta)))

    def validate(self):
        try:
            check_weights(self.meta, self.tensors)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from None

    def config(self, drop_rate: float = 0.0) -> ViTConfig:
        return ViTConfig.from_meta(self.meta, drop_rate)

    def ordered_names(self):
        names = canonical_names(self.meta["L"])
        return [n for n in names if n in self.tensors] + sorted(k for k in self.tensors if k not in names)

    @classmethod
    def from_model(cls, model: ViT) -> "Checkpoint":
        return cls(model.state_dict(), model.config.to_meta())

    def to_model(self, dtype=np.float32, drop_rate: float = 0.0) -> ViT:
        return ViT(self.config(drop_rate), self.tensors, dtype=dtype)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {_META_KEY: ckpt.meta}
    chunks = []
    offset = 0
    for name in ckpt.ordered_names():
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path):
    ckpt.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 8:
        raise CheckpointFormatError(f"{source}: file too short for a header ({len(raw)} bytes)")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise CheckpointFormatError(f"{source}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: corrupt header: {exc}") from None
    if not isinstance(header, dict) or _META_KEY not in header:
        raise CheckpointFormatError(f"{source}: header lacks {_META_KEY}")
    meta = header.pop(_META_KEY)
    data = memoryview(raw)[8 + hlen:]
    tensors = {}
    for name, entry in header.items():
        try:
            dtype, shape, off, nbytes = entry["dtype"], entry["shape"], entry["offset"], entry["nbytes"]
        except (KeyError, TypeError):
            raise CheckpointFormatError(f"{source}: malformed header entry for {name}") from None
        if dtype != "f32":
            raise CheckpointFormatError(f"{source}: unsupported dtype {dtype!r} for {name}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + nbytes > len(data):
            raise CheckpointFormatError(f"{source}: data for {name} out of bounds or inconsistent with its shape")
        tensors[name] = np.frombuffer(data[off:off + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint against its embedded metadata."""
    path = Path(path)
    ckpt = parse_checkpoint(path.read_bytes(), str(path))
    try:
        expected_shapes(ckpt.meta)
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: incomplete metadata ({exc})") from None
    ckpt.validate()
    return ckpt
