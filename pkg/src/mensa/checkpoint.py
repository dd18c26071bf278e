"""Single-file binary checkpoints.

Layout (all little-endian)::

    8 bytes   magic  b"MENSACKP"
    uint32    format version
    uint64    header length H
    H bytes   UTF-8 JSON header: encoder config, K, n, training counters and a
              manifest of {name, shape, offset} for every array
    ...       float32 arrays back to back, in manifest order
    uint32    CRC32 of the array section

Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MENSACKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]):
    manifest, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = dict(header, format_version=FORMAT_VERSION, manifest=manifest, data_bytes=offset)
    blob = b"".join(chunks)
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    if len(raw) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    start = 20 + hlen
    nbytes = header["data_bytes"]
    if len(raw) != start + nbytes + 4:
        raise CheckpointError(f"{path}: truncated or padded file "
                              f"({len(raw)} bytes, expected {start + nbytes + 4})")
    blob = raw[start:start + nbytes]
    (crc,) = struct.unpack("<I", raw[start + nbytes:])
    if zlib.crc32(blob) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def model_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                for key in ("exp_avg", "exp_avg_sq"):
                    arrays[f"optim/{names[id(p)]}/{key}"] = st[key].detach().cpu().numpy()
                arrays[f"optim/{names[id(p)]}/step"] = np.array([float(st["step"])])
    return arrays


def restore_model(model: torch.nn.Module, arrays: dict, optimizer: torch.optim.Optimizer | None = None):
    """Copy arrays into ``model`` (and optimizer moments) after checking every
    name and shape; nothing is modified if any check fails."""
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in arrays]
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks parameter(s) {missing}")
    extra = [n for n in arrays if not n.startswith("optim/") and n not in params]
    if extra:
        raise CheckpointShapeError(f"checkpoint has unknown parameter(s) {extra}")
    for name, p in params.items():
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise CheckpointShapeError(
                f"parameter '{name}' has shape {tuple(arrays[name].shape)} in checkpoint, "
                f"model expects {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.as_tensor(arrays[name], dtype=p.dtype))
    if optimizer is not None:
        for name, p in params.items():
            key = f"optim/{name}/step"
            if key not in arrays:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[key][0])),
                "exp_avg": torch.as_tensor(arrays[f"optim/{name}/exp_avg"], dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"optim/{name}/exp_avg_sq"], dtype=p.dtype).clone(),
            }
