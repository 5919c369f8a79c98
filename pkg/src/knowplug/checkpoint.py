"""Binary model checkpoints.

Layout: magic ``KPC1`` | u32 header length | header JSON | raw tensor
bytes in manifest order. The header carries the format version, a config
echo sufficient to rebuild the model, the tensor manifest
``[name, dtype, shape]`` and an extra dict (optimizer scalars, data
cursor). Tensor bytes are written verbatim from contiguous arrays, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KPC1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict,
                    tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    manifest = []
    blobs = []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append([name, arr.dtype.str, list(arr.shape)])
        blobs.append(arr.tobytes())
    header = json.dumps({"format_version": FORMAT_VERSION, "kind": kind,
                         "config": config, "manifest": manifest,
                         "extra": extra or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    """Returns (kind, config, tensors, extra)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{header['format_version']}")
    tensors = {}
    off = 8 + hlen
    for name, dtype_str, shape in header["manifest"]:
        dt = np.dtype(dtype_str)
        count = int(np.prod(shape)) if shape else 1
        nbytes = dt.itemsize * count
        tensors[name] = np.frombuffer(data, dtype=dt, count=count,
                                      offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    return header["kind"], header["config"], tensors, header["extra"]


def optimizer_tensors(opt) -> dict[str, np.ndarray]:
    out = {}
    for name, m in opt.m.items():
        out[f"adam.m.{name}"] = m
    for name, v in opt.v.items():
        out[f"adam.v.{name}"] = v
    return out


def restore_optimizer(opt, tensors: dict[str, np.ndarray], extra: dict) -> None:
    opt.step = int(extra["adam_step"])
    opt.lr = float(extra["adam_lr"])
    for name, t in tensors.items():
        if name.startswith("adam.m."):
            opt.m[name[len("adam.m."):]] = t.copy()
        elif name.startswith("adam.v."):
            opt.v[name[len("adam.v."):]] = t.copy()
