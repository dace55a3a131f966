"""Binary checkpoint files.

Layout::

    b"SCAVIT01"
    uint64 little-endian header length
    UTF-8 JSON header (sorted keys): format_version, model_config, train_config,
        epoch, rng_state, optimizer, manifest [{name, shape, offset}]
    float64 little-endian blobs, in manifest order; offsets are byte offsets
    from the start of this data section
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"SCAVIT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The checkpoint file is corrupt, truncated, or incompatible."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict | None = None
    optimizer: dict = field(default_factory=dict)  # kind, step, lr, ...
    moments: dict[str, np.ndarray] = field(default_factory=dict)  # "m.<name>" / "v.<name>"
    train_config: dict | None = None


def _blobs(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield f"param.{name}", arr
    for name, arr in ckpt.moments.items():
        yield f"moment.{name}", arr


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in _blobs(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer": ckpt.optimizer,
        "manifest": manifest,
        "data_bytes": offset,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    data = blob[start + hlen :]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"{path}: expected {header['data_bytes']} data bytes, found {len(data)}")
    params, moments = {}, {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo, hi = entry["offset"], entry["offset"] + 8 * count
        if hi > len(data):
            raise CheckpointError(f"{path}: blob {entry['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, name = entry["name"].partition(".")
        (params if kind == "param" else moments)[name] = arr
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        optimizer=header["optimizer"],
        moments=moments,
        train_config=header["train_config"],
    )


def check_shapes(ckpt: Checkpoint, expected: dict[str, tuple[int, ...]]) -> None:
    """Raise unless the checkpoint holds exactly the expected parameter names and shapes."""
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter manifest mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if ckpt.params[name].shape != tuple(shape):
            raise CheckpointError(f"shape mismatch for {name}: {ckpt.params[name].shape} vs {tuple(shape)}")
