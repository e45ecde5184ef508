"""Timestep-conditioned noise predictor (a small DDPM-style U-Net) and toy training."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .diffusion_math import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 1
    temb_dim: int = 64
    groups: int = 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Noise predictor eps_theta(x, t) with GroupNorm residual blocks and skip connections.

    No attention and no batch statistics, so the forward pass is a pure
    function of (parameters, x, t).
    """

    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        self.config = cfg
        ch = cfg.base_channels
        self.temb = nn.Sequential(
            nn.Linear(ch, cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [ch]
        cur = ch
        for i, mult in enumerate(cfg.channel_mults):
            level = nn.Module()
            level.blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                level.blocks.append(ResBlock(cur, ch * mult, cfg.temb_dim, cfg.groups))
                cur = ch * mult
                skip_chs.append(cur)
            if i < len(cfg.channel_mults) - 1:
                level.downsample = nn.Conv2d(cur, cur, 3, stride=2, padding=1)
                skip_chs.append(cur)
            self.down.append(level)

        self.mid1 = ResBlock(cur, cur, cfg.temb_dim, cfg.groups)
        self.mid2 = ResBlock(cur, cur, cfg.temb_dim, cfg.groups)

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_mults))):
            level = nn.Module()
            level.blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                level.blocks.append(ResBlock(cur + skip_chs.pop(), ch * mult, cfg.temb_dim, cfg.groups))
                cur = ch * mult
            if i > 0:
                level.upsample = nn.Conv2d(cur, cur, 3, padding=1)
            self.up.append(level)

        self.norm_out = nn.GroupNorm(min(cfg.groups, cur), cur)
        self.conv_out = nn.Conv2d(cur, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.temb(timestep_embedding(t, self.config.base_channels))
        h = self.conv_in(x)
        hs = [h]
        for level in self.down:
            for block in level.blocks:
                h = block(h, temb)
                hs.append(h)
            if hasattr(level, "downsample"):
                h = level.downsample(h)
                hs.append(h)
        h = self.mid2(self.mid1(h, temb), temb)
        for level in self.up:
            for block in level.blocks:
                h = block(torch.cat([h, hs.pop()], dim=1), temb)
            if hasattr(level, "upsample"):
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def build_net(config: UNetConfig | None = None, seed: int = 0) -> UNet:
    """Construct a freshly initialized UNet without touching the global torch RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return UNet(config)


def _as_t(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.long()
    return torch.full((batch,), int(t), dtype=torch.long)


def predict_noise(net: nn.Module, x: torch.Tensor, t, T: int | None = None) -> torch.Tensor:
    """eps_theta(x, t) for a single image (C,H,W) or a batch (B,C,H,W)."""
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    tb = _as_t(t, xb.shape[0])
    if T is not None and (tb.min() < 1 or tb.max() > T):
        raise ValueError(f"timestep outside [1, {T}]")
    out = net(xb, tb)
    return out[0] if single else out


_KINDS = ((nn.Linear, "linear"), (nn.Conv2d, "conv2d"), (nn.GroupNorm, "norm"), (nn.Embedding, "embedding"))


def layer_kind(module: nn.Module) -> str:
    for cls, name in _KINDS:
        if isinstance(module, cls):
            return name
    return "other"


def layer_table(net: nn.Module) -> dict[str, dict]:
    """Ordered map layer-path -> {kind, params: {name: shape}} over modules that own parameters."""
    table = {}
    for path, module in net.named_modules():
        own = {n: tuple(p.shape) for n, p in module.named_parameters(recurse=False)}
        if own:
            table[path] = {"kind": layer_kind(module), "params": own}
    return table


def clone_frozen(net: nn.Module) -> nn.Module:
    """Deep, gradient-isolated copy of ``net`` in eval mode."""
    frozen = copy.deepcopy(net)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def param_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().float().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def count_params(net: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad or not trainable_only)


def denoising_loss(net: nn.Module, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Mean over the batch of ||eps - eps_theta(x_t, t)||^2, averaged per element."""
    xt = forward_diffuse(x0, t, eps, sched)
    return F.mse_loss(net(xt, t), eps)


def train_toy_ddpm(
    dataset: torch.Tensor | Sequence[torch.Tensor],
    sched: NoiseSchedule,
    steps: int,
    *,
    config: UNetConfig | None = None,
    net: nn.Module | None = None,
    batch_size: int = 64,
    lr: float = 2e-4,
    seed: int = 0,
    log_every: int = 100,
    ema_decay: float | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[nn.Module, list[tuple[int, float]]]:
    """Fit a noise predictor on ``dataset`` (images in [-1, 1]) with the standard denoising objective.

    With ``ema_decay`` the returned network carries the exponential moving average
    of the weights instead of the last iterate. Returns the network and the logged
    training curve ``[(step, loss), ...]``.
    """
    data = torch.stack(list(dataset)) if not isinstance(dataset, torch.Tensor) else dataset
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if config is None:
        config = UNetConfig(image_size=data.shape[-1], in_channels=data.shape[1])
    gen = torch.Generator().manual_seed(seed)
    if net is None:
        net = build_net(config, seed)
    if steps == 0:
        return net, []
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    ema = AveragedModel(net, multi_avg_fn=get_ema_multi_avg_fn(ema_decay)) if ema_decay else None
    rng = np.random.Generator(np.random.Philox(seed))
    curve = []
    net.train()
    for step in range(1, steps + 1):
        idx = torch.from_numpy(rng.integers(0, data.shape[0], size=batch_size))
        x0 = data[idx]
        t = torch.from_numpy(rng.integers(1, sched.T + 1, size=batch_size))
        eps = torch.randn(x0.shape, generator=gen)
        loss = denoising_loss(net, x0, t, eps, sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update_parameters(net)
        if step % log_every == 0 or step == steps:
            value = loss.item()
            curve.append((step, value))
            log.info("train step %d loss %.5f", step, value)
            if callback:
                callback(step, value)
    if ema is not None:
        net.load_state_dict(ema.module.state_dict())
    net.eval()
    return net, curve
