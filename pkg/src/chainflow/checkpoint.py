"""Binary checkpoint container for a ParamStore.

Layout (all integers little-endian)::

    8 bytes   magic b"CHFLCKPT"
    uint32    header length H
    H bytes   UTF-8 JSON {"format_version": 1, "config_digest": str,
                          "config": {...}, "n_entries": N}
    N entries, each:
        uint16  name length, then UTF-8 name
        uint8   dtype code (0 = float64, 1 = float32)
        uint8   ndim, then ndim x uint32 dims
        raw little-endian C-order data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensorcore import ParamStore

MAGIC = b"CHFLCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: ParamStore, config: dict) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest(config),
        "config": config,
        "n_entries": len(params),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", len(hb)), hb]
    for name, t in params.items():
        arr = np.asarray(t.data, order="C")
        code = _CODES[arr.dtype]
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays by name, header)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    if header["config_digest"] != config_digest(header["config"]):
        raise CheckpointError(f"{path}: config digest mismatch")
    off = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(header["n_entries"]):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).copy()
            off += n * dt.itemsize
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt entry ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return arrays, header


def load_into(path, params: ParamStore) -> dict:
    arrays, header = load_checkpoint(path)
    params.load_arrays(arrays)
    return header
