"""Versioned binary container for named float64 tensors.

Layout (little-endian)::

    b"LPFL" | u16 version | u32 meta length | meta JSON (utf-8)
    u32 tensor count
    per tensor: u16 name length | name | u8 ndim | u32 dims... | float64 data (row-major)
    32-byte SHA-256 of everything above

Adapter tensors are named ``layers.{i}.{role}.lora_{A|B}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LPFL"
VERSION = 1
_DIGEST = 32


class WireError(ValueError):
    pass


def pack(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), a.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def unpack(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < len(MAGIC) + 6 + _DIGEST or buf[:4] != MAGIC:
        raise WireError("not an LPFL container")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise WireError("checksum mismatch")
    version, meta_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise WireError(f"unsupported container version {version}")
    off = 10
    meta = json.loads(body[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off : off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(body):
        raise WireError("trailing bytes in container")
    return out, meta


def payload_nbytes(tensors: dict[str, np.ndarray]) -> int:
    """Bytes of tensor data alone (8 per element), excluding framing."""
    return 8 * sum(int(np.asarray(a).size) for a in tensors.values())


def parse_adapter_name(name: str) -> tuple[int, str, str]:
    """``layers.3.value.lora_B`` -> ``(3, "value", "B")``."""
    parts = name.split(".")
    if len(parts) != 4 or parts[0] != "layers" or parts[3] not in ("lora_A", "lora_B"):
        raise WireError(f"not an adapter tensor name: {name!r}")
    return int(parts[1]), parts[2], parts[3][-1]


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> int:
    data = pack(tensors, meta)
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return unpack(Path(path).read_bytes())
