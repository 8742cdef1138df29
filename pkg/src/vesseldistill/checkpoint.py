"""Binary model checkpoints.

Layout: ``b"VDCK"``, a little-endian uint32 format version, a uint64 header
length, a UTF-8 JSON header with sorted keys, then the raw little-endian
tensor payloads back to back. The header lists each tensor's name, dtype,
shape, byte offset and SHA-256 digest, so a damaged payload is caught on
load instead of producing a silently wrong model. Nothing time-dependent is
stored, which keeps identical runs byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"VDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def config_hash(config: Dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelCheckpoint:
    """Parameters, optimiser moments and provenance of one trained model."""

    descriptor: Dict[str, Any]
    stage: str
    epoch: int
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        n = len(prefix)
        return OrderedDict((k[n:], v) for k, v in self.tensors.items() if k.startswith(prefix))

    def to_bytes(self) -> bytes:
        entries = []
        payloads = []
        offset = 0
        for name, arr in self.tensors.items():
            a = np.ascontiguousarray(arr)
            dt = a.dtype.newbyteorder("<")
            raw = a.astype(dt, copy=False).tobytes()
            entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw),
                            "sha256": hashlib.sha256(raw).hexdigest()})
            payloads.append(raw)
            offset += len(raw)
        header = {
            "descriptor": self.descriptor,
            "stage": self.stage,
            "epoch": int(self.epoch),
            "metrics": self.metrics,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "tensors": entries,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(payloads)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "ModelCheckpoint":
        if len(raw) < _PREFIX.size:
            raise CheckpointError(f"{source}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"{source}: checkpoint format version {version}, "
                                  f"this build reads version {VERSION}")
        try:
            header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{source}: unreadable header ({exc})") from None
        if header.get("config_hash") != config_hash(header.get("config", {})):
            raise CheckpointError(f"{source}: config hash does not match the stored config")
        body = raw[_PREFIX.size + hlen:]
        tensors = OrderedDict()
        for e in header["tensors"]:
            chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
            if len(chunk) != e["nbytes"] or hashlib.sha256(chunk).hexdigest() != e["sha256"]:
                raise CheckpointError(f"{source}: checksum mismatch in tensor {e['name']!r}; "
                                      "the file is corrupted")
            tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(header["descriptor"], header["stage"], header["epoch"], tensors,
                   header["metrics"], header["config"])


def save_checkpoint(ckpt: ModelCheckpoint, path) -> str:
    """Write ``ckpt`` and return its SHA-256 hex digest."""
    raw = ckpt.to_bytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path, expect_descriptor: Optional[Dict[str, Any]] = None) -> ModelCheckpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {p} does not exist")
    ckpt = ModelCheckpoint.from_bytes(p.read_bytes(), str(p))
    if expect_descriptor is not None:
        check_descriptor(ckpt, expect_descriptor)
    return ckpt


def check_descriptor(ckpt: ModelCheckpoint, expected: Dict[str, Any]) -> None:
    if ckpt.descriptor != expected:
        raise CheckpointError(
            f"architecture mismatch: checkpoint holds {ckpt.descriptor}, model is {expected}"
        )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
