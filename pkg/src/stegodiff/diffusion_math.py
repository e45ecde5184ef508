"""Closed-form constants and transforms of the DDPM forward and reverse processes.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and the schedule
vectors are indexed with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule, precomputed once in float64."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        t = self.check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ScheduleError(f"unsupported schedule kind {d.get('kind')!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt((1.0 - alpha_bars_prev) * betas / (1.0 - alpha_bars))
    sigmas[0] = 0.0
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), betas, alphas, alpha_bars, sigmas)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at (possibly batched) 1-based t, broadcastable against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long().numpy() - 1
        c = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return c.view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(values[int(t) - 1], dtype=like.dtype, device=like.device)


def _check_range(t, sched: NoiseSchedule) -> None:
    ts = t.detach().cpu().long() if isinstance(t, torch.Tensor) else torch.tensor([int(t)])
    if ts.numel() and (ts.min() < 1 or ts.max() > sched.T):
        raise ScheduleError(f"timestep outside [1, {sched.T}]")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Return sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_range(t, sched)
    ab = _coef(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def one_step_reconstruct(z: torch.Tensor, t, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process in one step: (z - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t)."""
    _check_range(t, sched)
    ab = _coef(sched.alpha_bars, t, z)
    if torch.any(ab <= 0):
        raise ArithmeticError("alpha_bar must be positive")
    return (z - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()


def ancestral_step(x: torch.Tensor, t: int, eps_pred: torch.Tensor, noise: torch.Tensor | None,
                   sched: NoiseSchedule) -> torch.Tensor:
    """One reverse-chain update x_t -> x_{t-1}; ``noise`` is ignored where sigma_t is zero."""
    t = sched.check_t(t)
    a = float(sched.alphas[t - 1])
    ab = float(sched.alpha_bars[t - 1])
    mean = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)
    sigma = float(sched.sigmas[t - 1])
    if sigma == 0.0 or noise is None:
        return mean
    return mean + sigma * noise
