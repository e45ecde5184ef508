"""Secret keys, payloads, and the portable key-to-noise generator.

The noise generator is pinned so that sender and recipient reproduce the
same extraction noise on different machines:

1. Philox4x64-10 keyed with the 64-bit seed, counter starting at zero,
   emitting raw 64-bit words (NumPy's ``Philox(key=seed).random_raw``).
2. Each pair of words (a, b) becomes two doubles
   ``u1 = ((a >> 11) + 1) * 2**-53`` in (0, 1] and ``u2 = (b >> 11) * 2**-53`` in [0, 1).
3. Box-Muller in float64: ``r = sqrt(-2 ln u1)``, emitting ``r cos(2 pi u2)``
   then ``r sin(2 pi u2)``; the stream is truncated to the tensor size,
   reshaped in C order, and cast to float32.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

NOISE_ALGORITHM_ID = "philox4x64-10/box-muller-f64/v1"
KEY_FILE_VERSION = 1
_U64 = 2**64


@dataclass(frozen=True)
class SecretKey:
    seed: int
    timestep: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < _U64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if int(self.timestep) < 1:
            raise ValueError(f"timestep must be >= 1, got {self.timestep}")

    def check(self, T: int) -> "SecretKey":
        if self.timestep > T:
            raise ValueError(f"key timestep {self.timestep} exceeds schedule length {T}")
        return self


@dataclass
class SecretPayload:
    image: torch.Tensor  # (C, H, W) in [-1, 1]
    key: SecretKey
    label: str = "payload"


def _gaussian_f64(seed: int, n: int) -> np.ndarray:
    pairs = (n + 1) // 2
    raw = np.random.Philox(key=int(seed)).random_raw(2 * pairs).reshape(pairs, 2)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty((pairs, 2), dtype=np.float64)
    out[:, 0] = r * np.cos(theta)
    out[:, 1] = r * np.sin(theta)
    return out.reshape(-1)[:n]


def key_to_noise(key: SecretKey | int, shape) -> torch.Tensor:
    """Deterministic standard-normal tensor for a key (or bare seed)."""
    seed = key.seed if isinstance(key, SecretKey) else int(key)
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    z = _gaussian_f64(seed, n).astype(np.float32).reshape(shape)
    return torch.from_numpy(z)


def validate_key_set(keys: list[SecretKey]) -> list[str]:
    """Return conflict messages for duplicate (seed, timestep) pairs; empty means ok."""
    seen: dict[tuple[int, int], int] = {}
    conflicts = []
    for i, k in enumerate(keys):
        pair = (int(k.seed), int(k.timestep))
        if pair in seen:
            conflicts.append(f"keys {seen[pair]} and {i} share seed={pair[0]} timestep={pair[1]}")
        else:
            seen[pair] = i
    return conflicts


class KeyFileError(ValueError):
    pass


@dataclass
class KeyFile:
    key: SecretKey
    image_shape: tuple[int, ...]
    checkpoint_checksum: str
    label: str = "payload"
    noise_algorithm_id: str = NOISE_ALGORITHM_ID
    version: int = KEY_FILE_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": int(self.key.seed),
            "timestep": int(self.key.timestep),
            "image_shape": list(self.image_shape),
            "noise_algorithm_id": self.noise_algorithm_id,
            "checkpoint_checksum": self.checkpoint_checksum,
            "label": self.label,
        }

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "KeyFile":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise KeyFileError(f"cannot read key file {path}: {e}") from e
        missing = {"version", "seed", "timestep", "image_shape", "noise_algorithm_id",
                   "checkpoint_checksum"} - d.keys()
        if missing:
            raise KeyFileError(f"key file {path} missing fields {sorted(missing)}")
        if d["version"] != KEY_FILE_VERSION:
            raise KeyFileError(f"unsupported key file version {d['version']}")
        if d["noise_algorithm_id"] != NOISE_ALGORITHM_ID:
            raise KeyFileError(f"unknown noise algorithm {d['noise_algorithm_id']!r}")
        return cls(
            key=SecretKey(int(d["seed"]), int(d["timestep"])),
            image_shape=tuple(d["image_shape"]),
            checkpoint_checksum=str(d["checkpoint_checksum"]),
            label=d.get("label", "payload"),
        )


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode())
