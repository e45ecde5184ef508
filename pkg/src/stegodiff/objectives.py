"""Losses that drive score-function editing, and the fidelity-batch sources they sample from."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .diffusion_math import NoiseSchedule, forward_diffuse, one_step_reconstruct
from .stego_keys import SecretPayload, key_to_noise, validate_key_set

log = logging.getLogger(__name__)


@dataclass
class EmbedConfig:
    payloads: list[SecretPayload]
    lam: float = 1.0
    fidelity_batch: int = 64
    fidelity_source: str = "model_generated"

    def validate(self, sched: NoiseSchedule) -> "EmbedConfig":
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.payloads:
            raise ValueError("at least one payload is required")
        if self.fidelity_source not in ("model_generated", "surrogate_folder"):
            raise ValueError(f"unknown fidelity source {self.fidelity_source!r}")
        for p in self.payloads:
            p.key.check(sched.T)
        conflicts = validate_key_set([p.key for p in self.payloads])
        if conflicts:
            raise ValueError("key conflict: " + "; ".join(conflicts))
        return self


@dataclass
class FidelityBatch:
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def triples(self):
        return list(zip(self.x0, self.eps, self.t.tolist()))


class FidelitySource:
    """Pool of clean images x0 for the fidelity expectation, with a provenance tag per image."""

    def __init__(self, pool: torch.Tensor, provenance: str, kind: str):
        if pool.ndim != 4 or pool.shape[0] == 0:
            raise ValueError("fidelity pool must be a non-empty (N, C, H, W) tensor")
        self.pool = pool.float()
        self.provenance = provenance
        self.kind = kind

    @classmethod
    def model_generated(cls, frozen: nn.Module, sched: NoiseSchedule, *, checksum: str,
                        pool_size: int = 256, num_steps: int = 50, seed: int = 0,
                        cache_dir: str | Path | None = None) -> "FidelitySource":
        """Sample a pool once from the frozen model with skip-step sampling (cached on disk if asked)."""
        from .sampler import SamplerConfig, skip_step_sample

        cache = None
        if cache_dir is not None:
            tag = hashlib.sha256(f"{checksum}:{pool_size}:{num_steps}:{seed}:{sched.T}".encode()).hexdigest()[:16]
            cache = Path(cache_dir) / f"fidelity_pool_{tag}.npy"
            if cache.exists():
                return cls(torch.from_numpy(np.load(cache)), checksum, "model_generated")
        pool = skip_step_sample(frozen, sched, SamplerConfig("skip_step", num_steps, seed), pool_size)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache, pool.numpy())
        return cls(pool, checksum, "model_generated")

    @classmethod
    def from_folder(cls, folder: str | Path, image_size: int | None = None) -> "FidelitySource":
        from .images import load_folder

        folder = Path(folder)
        imgs = load_folder(folder, image_size) if folder.is_dir() else []
        if len(imgs) == 0:
            raise ValueError(f"surrogate folder {folder} contains no images")
        return cls(torch.stack(imgs), f"folder:{folder}", "surrogate_folder")

    def draw(self, n: int, sched: NoiseSchedule, rng: np.random.Generator) -> FidelityBatch:
        return draw_fidelity_batch(self, n, sched, rng)


def draw_fidelity_batch(source: FidelitySource, n: int, sched: NoiseSchedule,
                        rng: np.random.Generator) -> FidelityBatch:
    """n triples (x0, eps, t): x0 from the pool, eps ~ N(0, I), t ~ Uniform{1..T}."""
    shape = tuple(source.pool.shape[1:])
    if n == 0:
        empty = torch.empty((0, *shape))
        return FidelityBatch(empty, empty.clone(), torch.empty(0, dtype=torch.long), [])
    idx = rng.integers(0, source.pool.shape[0], size=n)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, *shape), dtype=np.float32)
    return FidelityBatch(source.pool[torch.from_numpy(idx)], torch.from_numpy(eps),
                         torch.from_numpy(t).long(), [source.provenance] * n)


def reconstruct_secret(net: nn.Module, z: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """One-step reconstruction f_theta(z, t) for a single image."""
    eps = net(z.unsqueeze(0), torch.tensor([t]))[0]
    return one_step_reconstruct(z, t, eps, sched)


def accuracy_loss(net: nn.Module, payload: SecretPayload, sched: NoiseSchedule,
                  z: torch.Tensor | None = None) -> torch.Tensor:
    """||f_theta(z_s, t_s) - x_s||^2 (summed over pixels, model range)."""
    if z is None:
        z = key_to_noise(payload.key, payload.image.shape)
    x_hat = reconstruct_secret(net, z.to(payload.image.dtype), payload.key.timestep, sched)
    return (x_hat - payload.image).pow(2).sum()


def fidelity_loss(net: nn.Module, frozen: nn.Module, batch: FidelityBatch, sched: NoiseSchedule) -> torch.Tensor:
    """Batch mean of ||eps_theta(x_t, t) - eps_frozen(x_t, t)||^2; no gradient reaches ``frozen``."""
    if len(batch) == 0:
        raise ValueError("empty fidelity batch")
    xt = forward_diffuse(batch.x0, batch.t, batch.eps, sched)
    with torch.no_grad():
        ref = frozen(xt, batch.t)
    out = net(xt, batch.t)
    return (out - ref).pow(2).flatten(1).sum(1).mean()


def combined_loss(net: nn.Module, frozen: nn.Module, config: EmbedConfig, batch: FidelityBatch | None,
                  sched: NoiseSchedule, noises: list[torch.Tensor] | None = None):
    """(1/M) sum_i accuracy_i + lambda * fidelity; returns (total, breakdown)."""
    if noises is None:
        noises = [key_to_noise(p.key, p.image.shape) for p in config.payloads]
    acc = [accuracy_loss(net, p, sched, z) for p, z in zip(config.payloads, noises)]
    acc_mean = torch.stack(acc).mean()
    fid = None
    total = acc_mean
    if config.lam > 0 and batch is not None:
        fid = fidelity_loss(net, frozen, batch, sched)
        total = acc_mean + config.lam * fid
    breakdown = {
        "acc_loss": [a.item() for a in acc],
        "acc_mean": acc_mean.item(),
        "fid_loss": None if fid is None else fid.item(),
        "total": total.item(),
    }
    return total, breakdown
