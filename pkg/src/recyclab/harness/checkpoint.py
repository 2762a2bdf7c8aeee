"""Binary checkpoint files: magic "RCLB", versioned JSON header with a
checksummed segment directory, raw little-endian payload.

One format stores three kinds of weight sets — backbone checkpoints
(optionally with optimizer slots for bitwise resume), full-parameter
deltas, and adapter deltas — dispatched on the header kind field.
save/load round-trips are bitwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..model import (ADAPTER, FULL_DELTA, AdaptedWeights, ModelConfig, ParamVector)
from ..train import Checkpoint


MAGIC = b"RCLB"
FORMAT_VERSION = 1

KIND_BACKBONE = "backbone"


class CheckpointFormatError(Exception):
    """File is not a recognizable checkpoint."""


class VersionError(CheckpointFormatError):
    """Format version not supported by this reader."""


class ChecksumError(CheckpointFormatError):
    """A segment's payload bytes fail their checksum."""


class TruncationError(CheckpointFormatError):
    """File ends before the declared payload does."""


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def _directory_entry(name: str, arr: np.ndarray, offset: int) -> tuple[dict, bytes, int]:
    arr = _le_dtype(arr)
    raw = arr.tobytes()
    entry = {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
             "offset": offset, "length": len(raw), "crc32": zlib.crc32(raw)}
    return entry, raw, offset + len(raw)


def save_checkpoint(path, obj: Checkpoint | AdaptedWeights):
    """Write a backbone checkpoint or an adapted-weights delta."""
    if isinstance(obj, Checkpoint):
        kind = KIND_BACKBONE
        segments = dict(obj.params.items())
        config = obj.config
        meta = dict(obj.meta)
        optim = obj.optim_state
    elif isinstance(obj, AdaptedWeights):
        kind = obj.kind  # full_delta | adapter
        segments = dict(obj.segments.items())
        config = obj.config
        meta = {"source_task": obj.source_task, "source_checkpoint": obj.source_checkpoint}
        optim = None
    else:
        raise CheckpointFormatError(f"cannot save object of type {type(obj).__name__}")

    directory, chunks, offset = [], [], 0
    for name, arr in segments.items():
        entry, raw, offset = _directory_entry(f"seg::{name}", arr, offset)
        directory.append(entry)
        chunks.append(raw)
    optim_step = None
    if optim is not None:
        optim_step = int(optim["step"])
        for slot in ("m", "v"):
            for name, arr in optim[slot].items():
                entry, raw, offset = _directory_entry(f"adam_{slot}::{name}", arr, offset)
                directory.append(entry)
                chunks.append(raw)

    header = {"kind": kind,
              "config": config.to_dict() if config is not None else None,
              "meta": _jsonable(meta),
              "optim_step": optim_step,
              "segments": directory}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def _jsonable(meta):
    out = {}
    for k, v in meta.items():
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def load_checkpoint(path) -> Checkpoint | AdaptedWeights:
    """Read a checkpoint file, verifying magic, version, and per-segment
    checksums; dispatches on the header kind field."""
    with open(path, "rb") as fh:
        head = fh.read(4 + 4 + 8)
        if len(head) < 16 or head[:4] != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
        version = struct.unpack("<I", head[4:8])[0]
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: format version {version} unsupported "
                               f"(reader supports {FORMAT_VERSION})")
        header_len = struct.unpack("<Q", head[8:16])[0]
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise TruncationError(f"{path}: truncated header")
        header = json.loads(blob.decode())
        payload = fh.read()

    groups: dict[str, dict[str, np.ndarray]] = {"seg": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["segments"]:
        start, length = entry["offset"], entry["length"]
        raw = payload[start:start + length]
        if len(raw) < length:
            raise TruncationError(f"{path}: truncated payload at segment {entry['name']!r}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"{path}: checksum mismatch in segment {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        prefix, _, name = entry["name"].partition("::")
        groups[prefix][name] = arr

    config = ModelConfig.from_dict(header["config"]) if header["config"] else None
    kind = header["kind"]
    if kind == KIND_BACKBONE:
        optim = None
        if header.get("optim_step") is not None:
            optim = {"step": header["optim_step"], "m": groups["adam_m"], "v": groups["adam_v"]}
        return Checkpoint(ParamVector(groups["seg"], config), config,
                          dict(header["meta"]), optim)
    if kind in (FULL_DELTA, ADAPTER):
        meta = header["meta"]
        return AdaptedWeights(kind, ParamVector(groups["seg"], config),
                              source_task=meta.get("source_task"),
                              source_checkpoint=meta.get("source_checkpoint"))
    raise CheckpointFormatError(f"{path}: unknown checkpoint kind {kind!r}")
