"""Tensor container: JSON manifest followed by raw little-endian float64 payloads.

Layout::

    b"FLTENSOR"             8-byte magic
    uint32 LE               container version
    uint64 LE               manifest length in bytes
    manifest                UTF-8 JSON: {"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}]}
    payload                 tensors concatenated in manifest order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLTENSOR"
CONTAINER_VERSION = 1
DTYPE = "<f8"


class ContainerError(IOError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": DTYPE,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(manifest))
    return header + manifest + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    head = len(MAGIC) + 12
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a tensor container (bad magic)")
    version, mlen = struct.unpack("<IQ", blob[len(MAGIC):head])
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if head + mlen > len(blob):
        raise ContainerError("truncated manifest")
    try:
        manifest = json.loads(blob[head:head + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        meta = manifest["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"corrupt manifest: {exc}") from exc

    payload = memoryview(blob)[head + mlen:]
    expected = sum(int(e["nbytes"]) for e in entries)
    if len(payload) != expected:
        raise ContainerError(f"payload has {len(payload)} bytes, manifest expects {expected}")
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        off, nbytes = int(e["offset"]), int(e["nbytes"])
        if e.get("dtype") != DTYPE or nbytes != 8 * int(np.prod(shape, dtype=np.int64)) \
                or off + nbytes > len(payload):
            raise ContainerError(f"corrupt manifest entry for {e.get('name')!r}")
        tensors[e["name"]] = np.frombuffer(payload[off:off + nbytes], dtype=DTYPE).reshape(shape).copy()
    return tensors, meta


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    return loads(blob)
