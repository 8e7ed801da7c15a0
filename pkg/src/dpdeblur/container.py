"""Self-describing binary container for named tensors plus a JSON header.

Layout: magic ``DPC1`` | u32 format version | u64 header length | UTF-8 JSON
header | raw little-endian C-order tensor payload | 32-byte SHA-256 digest of
everything before it. Used for model checkpoints and patch caches; a
truncated or corrupted file fails the checksum and nothing partial is
returned.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"DPC1"
FORMAT_VERSION = 1

_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u2", "<u1"}


class ContainerError(ValueError):
    """Raised for unreadable, corrupt, or version-mismatched containers."""


def write_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` (name -> array) with a JSON header to ``path``."""
    index = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise ContainerError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        index.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps(
        {"kind": kind, "version": FORMAT_VERSION, "meta": meta, "tensors": index},
        sort_keys=True,
    ).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (MAGIC, struct.pack("<I", FORMAT_VERSION),
                      struct.pack("<Q", len(header)), header, *blobs):
            digest.update(chunk)
            fh.write(chunk)
        fh.write(digest.digest())


def read_container(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, verifying magic, version, and checksum.

    Returns ``(meta, tensors)``; raises :class:`ContainerError` on any
    integrity problem without returning partial data.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic or truncated)")
    body, stored_digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored_digest:
        raise ContainerError(f"{path}: checksum mismatch (file corrupt or truncated)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: container version {version} unsupported "
                             f"(expected {FORMAT_VERSION})")
    (header_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off : off + header_len].decode("utf-8"))
    off += header_len
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ContainerError(
            f"{path}: container kind {header.get('kind')!r}, expected {expect_kind!r}")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        dt = np.dtype(entry["dtype"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=off).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        off += nbytes
    if off != len(body):
        raise ContainerError(f"{path}: payload length mismatch")
    return header["meta"], tensors
