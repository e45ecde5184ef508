"""PSNR / SSIM on [0, 1]-range images, plus model/metric range conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

# PSNR of identical images; serialized as the string "inf".
IDENTICAL = math.inf

RANGES = {"model": (-1.0, 1.0), "metric": (0.0, 1.0)}


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def range_convert(x, src: str, dst: str):
    """Affine map between the "model" [-1, 1] and "metric" [0, 1] ranges."""
    if src not in RANGES or dst not in RANGES:
        raise ValueError(f"unknown range tag: {src!r} -> {dst!r}")
    lo_s, hi_s = RANGES[src]
    lo_d, hi_d = RANGES[dst]
    return (x - lo_s) * ((hi_d - lo_d) / (hi_s - lo_s)) + lo_d


def to_metric(x):
    return range_convert(x, "model", "metric")


def _check_pair(a: np.ndarray, b: np.ndarray, tol: float = 1e-6) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    for arr in (a, b):
        if arr.size and (arr.min() < -tol or arr.max() > 1.0 + tol):
            raise ValueError("images must lie in the [0, 1] metric range")


def psnr(a, b) -> float:
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable "valid" correlation over the last two axes
    k = len(g)
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         shrink: bool = False) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Accepts (H, W), (C, H, W) or (N, C, H, W) arrays in [0, 1]. With ``shrink``
    images smaller than the window use the largest odd window that fits.
    """
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    if shrink and a.ndim >= 2 and min(a.shape[-2:]) < win:
        win = max(1, min(a.shape[-2:]) - (1 - min(a.shape[-2:]) % 2))
    if a.ndim < 2 or min(a.shape[-2:]) < win:
        raise ValueError(f"SSIM needs images at least {win}x{win}, got {a.shape}")
    g = _gaussian_window(win, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    smap = num / den
    # per-channel means, then mean over channels (and images)
    return float(smap.reshape(*smap.shape[:-2], -1).mean(axis=-1).mean())


def format_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.2f}"


def _jsonable(v: float):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, a, b) -> tuple[float, float]:
        p, s = psnr(a, b), ssim(a, b, shrink=True)
        self.psnr.append(p)
        self.ssim.append(s)
        return p, s

    @staticmethod
    def _stats(vals: list[float]) -> tuple[float, float]:
        if not vals:
            return float("nan"), float("nan")
        if all(math.isinf(v) for v in vals):
            return IDENTICAL, 0.0
        # identical pairs are excluded from the mean of a mixed list
        arr = np.array([v for v in vals if not math.isinf(v)], dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    @property
    def psnr_mean(self) -> float:
        return self._stats(self.psnr)[0]

    @property
    def ssim_mean(self) -> float:
        return self._stats(self.ssim)[0]

    def to_dict(self) -> dict:
        pm, ps = self._stats(self.psnr)
        sm, ss = self._stats(self.ssim)
        return {
            "psnr": [_jsonable(v) for v in self.psnr],
            "ssim": list(self.ssim),
            "psnr_mean": _jsonable(pm),
            "psnr_std": ps,
            "ssim_mean": sm,
            "ssim_std": ss,
        }
