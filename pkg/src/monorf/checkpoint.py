"""Checkpoint files: an 8-byte little-endian header length, a UTF-8 JSON
header (version, config snapshot, counters, tensor table) and a contiguous
little-endian float32 payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .train import ModelState

FORMAT_VERSION = 1
MAGIC = "monorf-checkpoint"
_GROUPS = ("params", "adam_m", "adam_v")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state: ModelState, config: dict, seed: int) -> Path:
    """Write atomically (temp file + rename) so an interrupted save never
    leaves a truncated checkpoint behind."""
    path = Path(path)
    table = []
    chunks = []
    offset = 0
    for group in _GROUPS:
        tensors = getattr(state, group)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            table.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        # batches are drawn from (seed, epoch, step), so this is the whole rng state
        "rng": {"seed": seed, "epoch": state.epoch},
        "config": config,
        "tensors": table,
        "payload_floats": offset,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, Path(path))


def _read_header(fh, path: Path) -> dict:
    head = fh.read(8)
    if len(head) != 8:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<Q", head)
    if n > os.fstat(fh.fileno()).st_size - 8:
        raise CheckpointError(f"{path}: not a checkpoint file (header length {n} exceeds file size)")
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    if header.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path):
    """Returns (ModelState, header)."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    with fh:
        header = _read_header(fh, path)
        payload = np.frombuffer(fh.read(), dtype="<f4")
    if payload.size != header["payload_floats"]:
        raise CheckpointError(f"{path}: payload has {payload.size} floats, header says {header['payload_floats']}")
    groups = {g: {} for g in _GROUPS}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = payload[t["offset"] : t["offset"] + count].reshape(t["shape"]).astype(np.float32)
        groups[t["group"]][t["name"]] = arr
    state = ModelState(groups["params"], groups["adam_m"], groups["adam_v"], header["step"], header["epoch"])
    return state, header
