"""FXCK checkpoint files: named float32 tensors, including optimizer state."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adam import AdamState

MAGIC = b"FXCK"
VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an FXCK checkpoint")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def save_checkpoint(path, params: dict, adam: AdamState | None = None, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in params.items()}
    if adam is not None:
        tensors["adam/t"] = np.array(adam.t, dtype=np.float32)
        tensors.update({f"adam/m/{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam/v/{k}": v for k, v in adam.v.items()})
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = np.asarray(v, dtype=np.float32)
    write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[dict, AdamState | None, dict]:
    tensors = read_tensors(path)
    params, extra = {}, {}
    adam = AdamState() if "adam/t" in tensors else None
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "extra":
            extra[rest] = arr
        elif name == "adam/t":
            adam.t = int(arr)
        elif rest.startswith("m/"):
            adam.m[rest[2:]] = arr
        elif rest.startswith("v/"):
            adam.v[rest[2:]] = arr
    return params, adam, extra
