"""Binary checkpoint format.

    b"LCNT1" | uint64 LE manifest length | UTF-8 JSON manifest | float32 LE blobs

The manifest lists every blob as ``{"name", "shape", "offset"}`` with offsets
counted from the start of the blob section; blobs are stored back to back in
manifest order, model parameters first, then optimizer buffers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ShapeMismatchError, TruncatedCheckpointError
from .images import write_bytes_atomic

MAGIC = b"LCNT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arch: dict
    blobs: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def blob_offsets(shapes) -> list[int]:
    offsets, pos = [], 0
    for shape in shapes:
        offsets.append(pos)
        pos += 4 * int(np.prod(shape, dtype=np.int64))
    return offsets


def to_bytes(ckpt: Checkpoint) -> bytes:
    items = [("model", k, v) for k, v in ckpt.blobs.items()] + [("optim", k, v) for k, v in ckpt.optimizer.items()]
    shapes = [list(np.shape(v)) for _, _, v in items]
    entries = [{"group": g, "name": k, "shape": s, "offset": o}
               for (g, k, _), s, o in zip(items, shapes, blob_offsets(shapes))]
    manifest = {"version": ckpt.version, "arch": ckpt.arch, "blobs": entries, "epoch": ckpt.epoch,
                "seed": ckpt.seed, "meta": ckpt.meta}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for _, _, v in items)
    return MAGIC + struct.pack("<Q", len(header)) + header + body


def from_bytes(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise TruncatedCheckpointError("truncated header")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC):start])
    if len(data) < start + mlen:
        raise TruncatedCheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TruncatedCheckpointError(f"unreadable manifest: {e}") from e
    body = memoryview(data)[start + mlen:]
    entries = manifest["blobs"]
    expected = blob_offsets([e["shape"] for e in entries])
    for e, off in zip(entries, expected):
        if e["offset"] != off:
            raise ShapeMismatchError(f"blob {e['name']}: offset {e['offset']} disagrees with shapes (expected {off})")
    total = expected[-1] + 4 * int(np.prod(entries[-1]["shape"], dtype=np.int64)) if entries else 0
    if len(body) < total:
        raise TruncatedCheckpointError(f"truncated blob data: have {len(body)} of {total} bytes")
    if len(body) > total:
        raise ShapeMismatchError(f"{len(body) - total} trailing bytes after last blob")
    model, optim = {}, {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        (model if e["group"] == "model" else optim)[e["name"]] = arr.astype(np.float32)
    return Checkpoint(manifest["arch"], model, optim, manifest["epoch"], manifest["seed"],
                      manifest.get("meta", {}), manifest["version"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_bytes_atomic(path, to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def check_against(ckpt: Checkpoint, expected_shapes: dict[str, tuple]) -> None:
    """Every expected blob present exactly once with the right shape."""
    names = set(ckpt.blobs)
    if names != set(expected_shapes):
        raise ShapeMismatchError(f"blob names differ: missing {sorted(set(expected_shapes) - names)}, "
                                 f"unexpected {sorted(names - set(expected_shapes))}")
    for k, shape in expected_shapes.items():
        if tuple(ckpt.blobs[k].shape) != tuple(shape):
            raise ShapeMismatchError(f"blob {k}: shape {ckpt.blobs[k].shape} vs architecture {tuple(shape)}")
