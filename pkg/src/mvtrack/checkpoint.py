"""Binary checkpoint format.

Little-endian layout::

    b"MVTT" | u32 version (=1) | u32 count
    per parameter: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ShapeMismatch

MAGIC = b"MVTT"
VERSION = 1


def encode_parameters(named: list[tuple[str, torch.Tensor]]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, tensor in named:
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_parameters(data: bytes, path=None) -> list[tuple[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", path)
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path)
        pos = 12
        out = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out.append((name, arr))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint ({exc})", path) from exc
    if pos != len(data):
        raise FormatError("trailing bytes after last parameter", path)
    return out


def save_checkpoint(model: nn.Module, path) -> None:
    Path(path).write_bytes(encode_parameters(list(model.named_parameters())))


def load_checkpoint(model: nn.Module, path) -> None:
    """Load parameters in place; names and shapes must match the model exactly."""
    stored = decode_parameters(Path(path).read_bytes(), path)
    params = dict(model.named_parameters())
    names = [n for n, _ in stored]
    if set(names) != set(params) or len(names) != len(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise ShapeMismatch(f"checkpoint/model parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, arr in stored:
        p = params[name]
        if tuple(p.shape) != arr.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
    with torch.no_grad():
        for name, arr in stored:
            params[name].copy_(torch.from_numpy(arr.copy()))
