"""Binary checkpoint format.

Layout: 8-byte magic ``MAAFCKPT``, little-endian u32 version, u64 header
length, UTF-8 JSON header (configs, vocabulary, step, RNG and sampler state,
tensor directory), then the raw little-endian tensor payloads back to back.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MAAFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    config: dict
    vocab: list
    step: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        dtypes = {np.asarray(a).dtype for a in self.tensors.values()}
        wide = any(d == np.float64 for d in dtypes)
        dtype = np.dtype("<f8" if wide else "<f4")
        directory, blobs, offset = [], [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(np.asarray(arr), dtype=dtype).tobytes()
            directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "config": self.config,
            "vocab": list(self.vocab),
            "step": int(self.step),
            "rng": self.rng_state,
            "extra": self.extra,
            "dtype": dtype.str,
            "tensors": directory,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(buf) < 20 or buf[:8] != MAGIC:
            raise CheckpointError(f"{source}: bad magic, not a MAAF checkpoint")
        (version,) = struct.unpack("<I", buf[8:12])
        if version != VERSION:
            raise CheckpointError(f"{source}: checkpoint version {version}, expected {VERSION}")
        (hlen,) = struct.unpack("<Q", buf[12:20])
        if 20 + hlen > len(buf):
            raise CheckpointError(f"{source}: truncated header")
        try:
            header = json.loads(buf[20:20 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{source}: corrupt header ({e})") from e
        dtype = np.dtype(header["dtype"])
        base = 20 + hlen
        tensors = {}
        for entry in header["tensors"]:
            start = base + entry["offset"]
            stop = start + entry["nbytes"]
            if stop > len(buf):
                raise CheckpointError(f"{source}: truncated payload for {entry['name']}")
            arr = np.frombuffer(buf[start:stop], dtype=dtype).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        return cls(tensors, header["config"], header["vocab"], header["step"], header["rng"], header["extra"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
