"""Manifest-driven checkpoint files.

Layout::

    b"HWGN" | version: u32 LE | manifest length: u32 LE | manifest (UTF-8 JSON) | payload

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``;
the payload holds their little-endian float32 bytes contiguously in manifest
order.  Free-form metadata (configs, step counter, rng states) lives under the
manifest's ``meta`` key.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, UnsupportedVersionError

MAGIC = b"HWGN"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < _HEADER.size:
        raise CorruptCheckpointError("file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CorruptCheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from exc

    payload = memoryview(data)[start:]
    expected = 0
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e.get("dtype") != "float32" or e["offset"] != expected or e["nbytes"] != 4 * count:
            raise CorruptCheckpointError(f"manifest entry {e.get('name')!r} is inconsistent")
        expected += e["nbytes"]
    if len(payload) != expected:
        raise CorruptCheckpointError(f"payload has {len(payload)} bytes, manifest expects {expected}")

    tensors = {}
    for e in entries:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


# -- module and optimizer state ---------------------------------------------------

def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k.replace('.', '/')}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {}
    for key, current in module.state_dict().items():
        name = f"{prefix}/{key.replace('.', '/')}"
        if name not in tensors:
            raise CorruptCheckpointError(f"checkpoint lacks tensor {name}")
        value = tensors[name]
        if tuple(value.shape) != tuple(current.shape):
            raise CorruptCheckpointError(f"{name}: shape {value.shape} != {tuple(current.shape)}")
        state[key] = torch.as_tensor(value, dtype=current.dtype)
    module.load_state_dict(state)


def optimizer_tensors(prefix: str, module: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    for key, param in module.named_parameters():
        for slot, value in optimizer.state.get(param, {}).items():
            value = torch.as_tensor(value)
            out[f"opt/{prefix}/{key.replace('.', '/')}/{slot}"] = value.reshape(-1) if value.dim() == 0 else value
    return out


def load_optimizer(prefix: str, module: torch.nn.Module, optimizer: torch.optim.Optimizer,
                   tensors: dict[str, np.ndarray]) -> None:
    head = f"opt/{prefix}/"
    for key, param in module.named_parameters():
        base = head + key.replace(".", "/") + "/"
        slots = {n[len(base):]: v for n, v in tensors.items() if n.startswith(base)}
        if not slots:
            continue
        state = {}
        for slot, value in slots.items():
            if slot == "step":
                state[slot] = torch.tensor(float(value.reshape(-1)[0]), dtype=torch.float32)
            else:
                state[slot] = torch.as_tensor(value, dtype=param.dtype).reshape(param.shape).clone()
        optimizer.state[param] = state
