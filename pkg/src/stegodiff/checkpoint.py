"""On-disk model container.

Layout (all integers little-endian)::

    b"STEGODIF"  u32 format_version
    u64 header_len   header JSON  {schedule, arch, tensors: [{name, shape, offset, nbytes}]}
    u64 tensor_len   tensor region: raw float32 tensors in header order
    u64 meta_len     metadata JSON

The checksum is the SHA-256 of the tensor region alone, so metadata such as
the creation time never changes it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .diffusion_math import NoiseSchedule
from .score_net import UNet, UNetConfig
from .stego_keys import atomic_write_bytes

MAGIC = b"STEGODIF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def tensor_region(net: nn.Module) -> tuple[list[dict], bytes]:
    index, chunks, offset = [], [], 0
    for name, t in net.state_dict().items():
        raw = t.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def weights_checksum(net: nn.Module) -> str:
    return hashlib.sha256(tensor_region(net)[1]).hexdigest()


@dataclass
class StegoCheckpoint:
    """A plain model (schedule + weights + metadata); stego checkpoints carry no key material."""

    net: UNet
    sched: NoiseSchedule
    metadata: dict = field(default_factory=dict)

    @property
    def checksum(self) -> str:
        return weights_checksum(self.net)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.net.config.image_shape

    def to_bytes(self) -> bytes:
        index, region = tensor_region(self.net)
        header = json.dumps(
            {"schedule": self.sched.to_dict(), "arch": self.net.config.to_dict(), "tensors": index},
            sort_keys=True,
        ).encode()
        meta = dict(self.metadata)
        meta.setdefault("tool_version", __version__)
        meta.setdefault("created", time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
        meta["checksum"] = hashlib.sha256(region).hexdigest()
        meta_raw = json.dumps(meta, sort_keys=True).encode()
        return b"".join([
            MAGIC, struct.pack("<I", FORMAT_VERSION),
            struct.pack("<Q", len(header)), header,
            struct.pack("<Q", len(region)), region,
            struct.pack("<Q", len(meta_raw)), meta_raw,
        ])

    def save(self, path: str | Path) -> Path:
        return atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "StegoCheckpoint":
        header, region, meta = parse(data)
        net = UNet(UNetConfig.from_dict(header["arch"]))
        expected = net.state_dict()
        names = {e["name"] for e in header["tensors"]}
        if names != set(expected):
            missing, extra = set(expected) - names, names - set(expected)
            raise CheckpointError(f"layer-path mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        state = {}
        for e in header["tensors"]:
            arr = np.frombuffer(region, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
            state[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))
        net.load_state_dict(state)
        net.eval()
        return cls(net, NoiseSchedule.from_dict(header["schedule"]), meta)

    @classmethod
    def load(cls, path: str | Path) -> "StegoCheckpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(data)


def parse(data: bytes) -> tuple[dict, bytes, dict]:
    """Split a checkpoint into (header, tensor region, metadata), verifying the checksum."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    blocks = []
    for _ in range(3):
        if pos + 8 > len(data):
            raise CheckpointError("truncated checkpoint")
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        blocks.append(data[pos:pos + n])
        pos += n
    header, region, meta = json.loads(blocks[0]), blocks[1], json.loads(blocks[2])
    digest = hashlib.sha256(region).hexdigest()
    if meta.get("checksum") not in (None, digest):
        raise CheckpointError("tensor region does not match recorded checksum")
    meta["checksum"] = digest
    return header, region, meta


def read_tensor_region(path: str | Path) -> bytes:
    return parse(Path(path).read_bytes())[1]
