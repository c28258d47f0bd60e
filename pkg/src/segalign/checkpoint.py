"""Versioned binary checkpoint container.

Layout (little-endian throughout):

    magic   8 bytes  b"SEGALNV1"
    u32     manifest length, then UTF-8 JSON manifest
    u32     section count
    per section:
        u16  name length, name bytes (UTF-8)
        u8   dtype code (0 = float32, 1 = float64, 2 = int64)
        u8   ndim, then ndim x u32 dims
        raw row-major data

Tensors are stored in their native dtype so a save/load round trip is
bitwise exact.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, IncompatibleCheckpointError

MAGIC = b"SEGALNV1"

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_state(path, state: dict[str, torch.Tensor], manifest: dict) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mbytes)))
    buf.write(mbytes)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        if arr.dtype not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for section {name}")
        nbytes = name.encode()
        buf.write(struct.pack("<H", len(nbytes)))
        buf.write(nbytes)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CorruptCheckpointError("checkpoint file is truncated")
    return data


def load_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(len(MAGIC)) != MAGIC:
        raise IncompatibleCheckpointError(f"bad magic/version header in {path}")
    (mlen,) = struct.unpack("<I", _read(buf, 4))
    try:
        manifest = json.loads(_read(buf, mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable manifest: {e}") from e
    (count,) = struct.unpack("<I", _read(buf, 4))
    state: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, nlen).decode()
        code, ndim = struct.unpack("<BB", _read(buf, 2))
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(_read(buf, n), dtype=dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(_DTYPES[code])).clone()
    return state, manifest


def save_module(path, module: torch.nn.Module, manifest: dict) -> None:
    save_state(path, dict(module.state_dict()), manifest)


def load_into(path, module: torch.nn.Module, expected: dict | None = None) -> dict:
    """Load a checkpoint into an already-constructed module.

    Keys in `expected` must match the stored manifest exactly; mismatches
    raise IncompatibleCheckpointError before any parameter is touched.
    """
    state, manifest = load_state(path)
    if expected:
        for key, value in expected.items():
            if manifest.get(key) != value:
                raise IncompatibleCheckpointError(
                    f"manifest field {key!r}: stored {manifest.get(key)!r}, "
                    f"expected {value!r}"
                )
    module.load_state_dict(state)
    return manifest
