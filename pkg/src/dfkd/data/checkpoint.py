"""Binary checkpoint format.

Layout, all integers little-endian::

    4 bytes   magic b"DFKD"
    u32       format version (currently 1)
    u64       header length in bytes
    header    UTF-8 JSON: kind, config, meta, and a tensor manifest
              [{name, shape, offset, count}], offsets in 8-byte units
    payload   float64 values of every tensor, manifest order, C order
    8 bytes   blake2b-64 digest of the payload

Loading checks magic, version and digest in that order; a file cut short
anywhere after the magic fails the digest check.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from ..errors import BadMagicError, BadVersionError, ChecksumError, CheckpointError

MAGIC = b"DFKD"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
_PREFIX = struct.Struct("<4sIQ")
DIGEST_SIZE = 8


@dataclass
class Checkpoint:
    kind: str
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def payload_digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def encode_checkpoint(kind: str, tensors: Dict[str, np.ndarray], config=None, meta=None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"kind": kind, "config": config or {}, "meta": meta or {}, "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload + payload_digest(payload)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(blob) < _PREFIX.size:
        raise ChecksumError("checkpoint truncated inside the prefix")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version not in SUPPORTED_VERSIONS:
        raise BadVersionError(f"checkpoint format version {version} not supported (known: {SUPPORTED_VERSIONS})")
    start = _PREFIX.size + header_len
    if len(blob) < start + DIGEST_SIZE:
        raise ChecksumError("checkpoint truncated before the payload")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        manifest = header["tensors"]
        n_values = sum(int(t["count"]) for t in manifest)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    end = start + 8 * n_values
    payload = blob[start:end]
    digest = blob[end:end + DIGEST_SIZE]
    if len(payload) != 8 * n_values or len(digest) != DIGEST_SIZE or len(blob) != end + DIGEST_SIZE:
        raise ChecksumError("checkpoint length does not match its manifest (truncated or padded)")
    if payload_digest(payload) != digest:
        raise ChecksumError("checkpoint payload digest mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for t in manifest:
        off, count = int(t["offset"]), int(t["count"])
        tensors[t["name"]] = values[off:off + count].astype(np.float64).reshape(tuple(t["shape"]))
    return Checkpoint(header["kind"], tensors, header.get("config", {}), header.get("meta", {}), version)


def save_checkpoint(path, kind: str, tensors: Dict[str, np.ndarray], config=None, meta=None) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(kind, tensors, config, meta))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
