"""Reverse-process sampling: full ancestral chain and deterministic skip-step (DDIM, eta=0).

Sampler randomness comes from one Philox stream per image, keyed by
``seed + (index << 64)``, so image ``i`` of a batch depends only on
``(seed, i)`` and never on global RNG state. This makes shared-seed
comparisons between two models replay exactly the same noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .diffusion_math import NoiseSchedule, ancestral_step, one_step_reconstruct


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ancestral"
    num_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ancestral", "skip_step"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


class _Streams:
    def __init__(self, seed: int, n: int, shape: tuple[int, ...]):
        self.gens = [np.random.Generator(np.random.Philox(key=int(seed) + (i << 64))) for i in range(n)]
        self.shape = shape

    def normal(self) -> torch.Tensor:
        return torch.from_numpy(
            np.stack([g.standard_normal(self.shape, dtype=np.float32) for g in self.gens])
        )


def initial_noise(seed: int, n: int, shape: tuple[int, ...]) -> torch.Tensor:
    return _Streams(seed, n, shape).normal()


def _image_shape(net: nn.Module, shape) -> tuple[int, ...]:
    if shape is not None:
        return tuple(shape)
    return tuple(net.config.image_shape)


def _batched_eps(net, x: torch.Tensor, t: int, batch_size: int) -> torch.Tensor:
    outs = []
    for i in range(0, x.shape[0], batch_size):
        xb = x[i:i + batch_size]
        outs.append(net(xb, torch.full((xb.shape[0],), t, dtype=torch.long)))
    return torch.cat(outs)


@torch.no_grad()
def ancestral_sample(net: nn.Module, sched: NoiseSchedule, cfg: SamplerConfig, n: int, *,
                     shape=None, batch_size: int = 64, clip: bool = True) -> torch.Tensor:
    """Iterate the DDPM reverse chain from t=T down to 1; returns (n, C, H, W)."""
    if cfg.kind != "ancestral":
        raise ValueError("ancestral_sample requires cfg.kind == 'ancestral'")
    if n <= 0:
        raise ValueError("n must be positive")
    streams = _Streams(cfg.seed, n, _image_shape(net, shape))
    x = streams.normal()
    for t in range(sched.T, 0, -1):
        eps = _batched_eps(net, x, t, batch_size)
        noise = streams.normal() if sched.sigmas[t - 1] > 0 else None
        x = ancestral_step(x, t, eps, noise, sched)
    return x.clamp(-1, 1) if clip else x


def skip_timesteps(T: int, num_steps: int) -> list[int]:
    """Uniform-stride decreasing subsequence of 1..T ending at 1."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    ts = [int(np.floor(k * T / num_steps)) + 1 for k in range(num_steps)]
    ts.reverse()
    if any(a <= b for a, b in zip(ts, ts[1:])) or ts[-1] != 1:
        raise ValueError("invalid timestep subsequence")
    return ts


@torch.no_grad()
def skip_step_sample(net: nn.Module, sched: NoiseSchedule, cfg: SamplerConfig, n: int, *,
                     shape=None, batch_size: int = 64, clip: bool = True) -> torch.Tensor:
    """Deterministic skip-step sampling; the seed only determines x_T."""
    if cfg.kind != "skip_step":
        raise ValueError("skip_step_sample requires cfg.kind == 'skip_step'")
    if n <= 0:
        raise ValueError("n must be positive")
    ts = skip_timesteps(sched.T, cfg.num_steps)
    x = initial_noise(cfg.seed, n, _image_shape(net, shape))
    for i, t in enumerate(ts):
        eps = _batched_eps(net, x, t, batch_size)
        x0 = one_step_reconstruct(x, t, eps, sched)
        if i + 1 == len(ts):
            x = x0
        else:
            ab_prev = float(sched.alpha_bars[ts[i + 1] - 1])
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return x.clamp(-1, 1) if clip else x


def sample(net: nn.Module, sched: NoiseSchedule, cfg: SamplerConfig, n: int, **kw) -> torch.Tensor:
    fn = ancestral_sample if cfg.kind == "ancestral" else skip_step_sample
    return fn(net, sched, cfg, n, **kw)
