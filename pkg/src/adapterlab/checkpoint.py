"""Versioned binary checkpoint container.

Layout, all integers little-endian:
    magic b"ALCK" | u32 format version
    u32 n_config_entries, then per entry: u32 key_len, key utf8, u32 val_len, val utf8
    u32 n_params, then per param: u32 name_len, name utf8, u32 ndim, ndim x u64 dims,
    raw float64 little-endian row-major data

Config values are stored stringified; callers own the parsing. The same
container holds full models, adapter-only overlays, and retrieval indexes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ALCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint file")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def write_checkpoint(path, config: dict, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config)))
        for key, val in config.items():
            _write_str(fh, str(key))
            _write_str(fh, str(val))
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_config,) = struct.unpack("<I", _read_exact(fh, 4))
        config = {}
        for _ in range(n_config):
            key = _read_str(fh)
            config[key] = _read_str(fh)
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(n_params):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)
    return config, params
