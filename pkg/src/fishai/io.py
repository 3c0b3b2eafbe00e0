"""Binary and text serialization helpers shared by every stage.

Raw float arrays (latents and checkpoint parameter blobs) use one layout::

    bytes 0..3    magic  b"FLAT"
    bytes 4..15   three little-endian uint32 dims (C, H, W)
    bytes 16..    C*H*W little-endian float32 values, C-order

Matrices are stored with ``C = 1``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint

RAW_MAGIC = b"FLAT"
RAW_HEADER = struct.Struct("<4sIII")


def stable_hash(*parts) -> int:
    """64-bit hash of ``parts`` that is stable across processes and platforms."""
    payload = json.dumps([str(p) for p in parts], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj) -> str:
    return sha256_hex(canonical_json(obj))[:16]


def encode_raw(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"raw float blobs hold 2-D or 3-D arrays, got {arr.ndim}-D")
    c, h, w = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return RAW_HEADER.pack(RAW_MAGIC, c, h, w) + body


def decode_raw(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_raw`; always returns a 3-D float32 array."""
    if len(data) < RAW_HEADER.size:
        raise CorruptCheckpoint("raw blob shorter than its header")
    magic, c, h, w = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    expected = RAW_HEADER.size + 4 * c * h * w
    if len(data) != expected:
        raise CorruptCheckpoint(f"raw blob has {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=RAW_HEADER.size).reshape(c, h, w).astype(np.float32)


def read_raw_header(data: bytes) -> tuple[int, int, int]:
    magic, c, h, w = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    return c, h, w


def save_raw(path, array) -> None:
    atomic_write_bytes(path, encode_raw(array))


def load_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_once(path, data: bytes) -> bool:
    """Create ``path`` with ``data`` unless it already exists.

    Returns True when this call created the file. Concurrent writers race on
    ``os.link`` so exactly one succeeds and later writes never clobber it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        try:
            os.link(tmp, path)
        except FileExistsError:
            return False
        return True
    finally:
        os.unlink(tmp)


def write_jsonl(path, rows) -> None:
    lines = [json.dumps(r, ensure_ascii=False, separators=(",", ":")) for r in rows]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
