"""``MAILCK1`` checkpoint files.

Layout, all little-endian::

    b"MAILCK1", u8 version
    -- payload region --
    u32 len, config text (UTF-8)
    i32 epoch
    u32 len, rng state (JSON, UTF-8)
    u32 parameter count
    per parameter: u32 len, name (UTF-8), u32 rank, i64[rank] extents, f64[prod] values
    -- end of payload --
    u32 crc32(payload region)
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"MAILCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        def blob(b: bytes) -> bytes:
            return struct.pack("<I", len(b)) + b

        parts = [blob(self.config.to_text().encode("utf-8")),
                 struct.pack("<i", self.epoch),
                 blob(json.dumps(self.rng_state, sort_keys=True).encode("utf-8")),
                 struct.pack("<I", len(self.params))]
        for name, arr in self.params.items():
            arr = np.asarray(arr, dtype="<f8")
            parts.append(blob(name.encode("utf-8")))
            parts.append(struct.pack(f"<I{arr.ndim}q", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
        payload = b"".join(parts)
        return MAGIC + bytes([self.version]) + payload + struct.pack("<I", zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a MAILCK1 checkpoint")
        if len(buf) < len(MAGIC) + 1 + 4:
            raise ChecksumError("checkpoint truncated")
        version = buf[len(MAGIC)]
        if version != VERSION:
            raise VersionError(f"checkpoint version {version}, expected {VERSION}")
        payload = buf[len(MAGIC) + 1:-4]
        (stored,) = struct.unpack("<I", buf[-4:])
        if zlib.crc32(payload) != stored:
            raise ChecksumError("checkpoint checksum mismatch (truncated or corrupt)")
        try:
            return cls._parse(payload, version)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint payload: {exc}") from exc

    @classmethod
    def _parse(cls, payload: bytes, version: int) -> "Checkpoint":
        pos = 0

        def blob() -> bytes:
            nonlocal pos
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            out = payload[pos:pos + n]
            if len(out) != n:
                raise ValueError("short blob")
            pos += n
            return out

        config = TrainConfig.from_text(blob().decode("utf-8"))
        (epoch,) = struct.unpack_from("<i", payload, pos)
        pos += 4
        rng_state = json.loads(blob().decode("utf-8"))
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        params = OrderedDict()
        for _ in range(count):
            name = blob().decode("utf-8")
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}q", payload, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(payload, "<f8", size, pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(payload):
            raise ValueError("trailing bytes in payload")
        return cls(config, params, epoch, rng_state, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
