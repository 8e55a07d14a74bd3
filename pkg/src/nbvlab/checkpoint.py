"""Versioned parameter-block container used by classifier and agent files.

Byte layout (all integers little-endian, all payloads float64 C-order):

    magic    8 bytes  b"NBVLABCK"
    version  uint32   currently 1
    kind     uint32 length + that many UTF-8 bytes (e.g. "classifier")
    n_meta   uint32
    n_meta times:
        key    uint32 length + UTF-8 bytes
        value  uint32 length + UTF-8 bytes
    n_blocks uint32
    n_blocks times:
        name   uint32 length + UTF-8 bytes
        ndim   uint32
        shape  ndim x uint64
        data   prod(shape) x float64

Blocks are written sorted by name, so equal contents produce byte-identical
files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NBVLABCK"
VERSION = 1


def _write_str(fh, text):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint file")
    return raw


def _read_str(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_blocks(path, kind, meta, blocks):
    """Write named float64 arrays plus string metadata."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, kind)
        fh.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            _write_str(fh, key)
            _write_str(fh, str(meta[key]))
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_blocks(path):
    """Read a container; returns (kind, meta dict, name -> float64 array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an nbvlab checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(fh)
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = {}
        for _ in range(n_meta):
            key = _read_str(fh)
            meta[key] = _read_str(fh)
        (n_blocks,) = struct.unpack("<I", _read_exact(fh, 4))
        blocks = {}
        for _ in range(n_blocks):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").copy()
            blocks[name] = data.reshape(shape)
        return kind, meta, blocks
