"""Hybrid parameter-efficient fine-tuning.

Squared-gradient sensitivity is accumulated per parameter, binarized at a
global quantile threshold, and layers are ranked by how many of their
parameters are sensitive (not by summed score). The top layers then get
low-rank adapters ``W + gamma * A @ B`` with rank-stabilized scaling and
separate learning rates for ``A`` and ``B``.

Convolution weights are flattened as ``(out_channels, in_channels * kH * kW)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion_math import NoiseSchedule
from .objectives import EmbedConfig, FidelitySource, combined_loss
from .score_net import layer_kind
from .stego_keys import key_to_noise

log = logging.getLogger(__name__)

ADAPTABLE = ("linear", "conv2d")


@dataclass
class PeftConfig:
    n_iters: int = 50
    sparsity: float = 0.01
    eta: int = 15
    rank: int = 64
    # rank is quoted for a base width of 128 channels and scaled to the actual net
    rank_ref_width: int | None = 128
    alpha: float | None = None  # None -> alpha = rank, i.e. gamma = sqrt(rank)
    lr: float = 1e-4
    lr_ratio: float = 16.0
    clamp_rank: bool = True
    max_grad_norm: float | None = None  # global gradient-norm clip for the fine-tune
    lr_decay: str = "cosine"  # anneal every group to 0 over the run; "constant" disables

    def __post_init__(self):
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError(f"lr_decay must be 'constant' or 'cosine', got {self.lr_decay!r}")

    def effective_rank(self, base_width: int) -> int:
        if not self.rank_ref_width:
            return self.rank
        return max(1, int(round(self.rank * base_width / self.rank_ref_width)))


def layer_of(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0] if "." in param_name else ""


# ---------------------------------------------------------------- sensitivity


@dataclass
class SensitivityMap:
    scores: dict[str, torch.Tensor]  # parameter name -> accumulated squared gradient
    n_iters: int
    seed: int

    def layers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.scores:
            out.setdefault(layer_of(name), []).append(name)
        return out

    @property
    def total(self) -> int:
        return sum(s.numel() for s in self.scores.values())


def accumulate_sensitivity(net: nn.Module, frozen: nn.Module, config: EmbedConfig, sched: NoiseSchedule,
                           n_iters: int, *, source: FidelitySource | None = None, seed: int = 0,
                           batches: list | None = None) -> SensitivityMap:
    """Sum over ``n_iters`` fresh fidelity batches of the squared gradient of the combined loss.

    Parameters are never updated here; the payload noise stays fixed by each key.
    ``batches`` may supply the fidelity batches explicitly (one per iteration).
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    params = [(n, p) for n, p in net.named_parameters()]
    scores = {n: torch.zeros_like(p, dtype=torch.float64) for n, p in params}
    noises = [key_to_noise(p.key, p.image.shape) for p in config.payloads]
    rng = np.random.Generator(np.random.Philox(key=seed))
    tensors = [p for _, p in params]
    saved = [p.requires_grad for p in tensors]
    for p in tensors:
        p.requires_grad_(True)
    try:
        _accumulate(net, frozen, config, sched, n_iters, source, batches, params, scores, noises, rng)
    finally:
        for p, flag in zip(tensors, saved):
            p.requires_grad_(flag)
    return SensitivityMap(scores, n_iters, seed)


def _accumulate(net, frozen, config, sched, n_iters, source, batches, params, scores, noises, rng):
    tensors = [p for _, p in params]
    for j in range(n_iters):
        if batches is not None:
            batch = batches[j]
        elif source is not None and config.lam > 0:
            batch = source.draw(config.fidelity_batch, sched, rng)
        else:
            batch = None
        loss, _ = combined_loss(net, frozen, config, batch, sched, noises)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        for (n, _), g in zip(params, grads):
            if g is not None:
                scores[n] += g.detach().double() ** 2


# ------------------------------------------------------------- layer ranking


@dataclass
class LayerSelection:
    tau: float
    sparsity: float
    eta: int
    ranking: list[tuple[str, int]]  # (layer path, sensitive count), best first
    selected: list[str]
    n_sensitive: int = 0
    n_total: int = 0
    layer_sizes: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "sparsity_target": self.sparsity,
            "eta": self.eta,
            "n_sensitive": self.n_sensitive,
            "n_total": self.n_total,
            "sensitive_fraction": self.n_sensitive / max(self.n_total, 1),
            "ranking": [{"layer": p, "count": c, "size": self.layer_sizes.get(p, 0)} for p, c in self.ranking],
            "selected": list(self.selected),
        }


def quantile_threshold(values: np.ndarray, sparsity: float) -> float:
    """Score tau such that the top ``round(sparsity * n)`` values satisfy g >= tau."""
    k = max(1, int(round(sparsity * values.size)))
    return float(np.partition(values, values.size - k)[values.size - k])


def select_layers(smap: SensitivityMap, sparsity: float, eta: int,
                  kinds: dict[str, str] | None = None) -> LayerSelection:
    """Binarize at the global quantile, rank layers by sensitive count, keep the top ``eta``.

    ``kinds`` maps layer path -> layer kind; when given, only linear/conv2d
    layers are eligible for selection (all layers still appear in the ranking).
    Ties in count are broken by layer path.
    """
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must be in (0, 1)")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    names = sorted(smap.scores)
    flat = np.concatenate([smap.scores[n].detach().cpu().numpy().ravel() for n in names])
    tau = quantile_threshold(flat, sparsity)
    counts: dict[str, int] = {}
    sizes: dict[str, int] = {}
    for n in names:
        s = smap.scores[n].detach().cpu().numpy()
        layer = layer_of(n)
        counts[layer] = counts.get(layer, 0) + int((s >= tau).sum())
        sizes[layer] = sizes.get(layer, 0) + s.size
    ranking = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    eligible = [p for p, _ in ranking if kinds is None or kinds.get(p) in ADAPTABLE]
    if eta > len(eligible):
        warnings.warn(f"eta={eta} exceeds {len(eligible)} eligible layers; selecting all", stacklevel=2)
    return LayerSelection(tau, sparsity, eta, ranking, eligible[:eta], int((flat >= tau).sum()),
                          int(flat.size), sizes)


def layer_kinds(net: nn.Module) -> dict[str, str]:
    return {path: layer_kind(m) for path, m in net.named_modules()}


# ---------------------------------------------------------------------- LoRA


class LoraAdapter(nn.Module):
    """Frozen base linear/conv layer plus a trainable low-rank delta on its 2-D-flattened weight."""

    def __init__(self, base: nn.Module, rank: int, scale: float, path: str = "",
                 lr_a: float = 1e-4, lr_b: float = 1.6e-3, init_std: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if not isinstance(base, (nn.Linear, nn.Conv2d)):
            raise TypeError(f"LoRA supports Linear/Conv2d, got {type(base).__name__}")
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        m = base.weight.shape[0]
        n = base.weight[0].numel()
        if rank < 1 or rank > min(m, n):
            raise ValueError(f"rank {rank} not in [1, min({m}, {n})] for layer {path!r}")
        self.path, self.rank, self.scale = path, rank, float(scale)
        self.lr_a, self.lr_b = lr_a, lr_b
        std = init_std if init_std is not None else 1.0 / math.sqrt(rank)
        a = torch.randn(m, rank, generator=generator) * std
        self.A = nn.Parameter(a.to(base.weight.dtype))
        self.B = nn.Parameter(torch.zeros(rank, n, dtype=base.weight.dtype))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[1]

    def delta(self) -> torch.Tensor:
        return (self.scale * (self.A @ self.B)).view_as(self.base.weight)

    def forward(self, x):
        w = self.base.weight + self.delta()
        if isinstance(self.base, nn.Linear):
            return F.linear(x, w, self.base.bias)
        b = self.base
        return F.conv2d(x, w, b.bias, b.stride, b.padding, b.dilation, b.groups)

    def merged(self) -> nn.Module:
        base = self.base
        with torch.no_grad():
            base.weight.add_(self.delta())
        for p in base.parameters():
            p.requires_grad_(True)
        return base


def _set_submodule(net: nn.Module, path: str, module: nn.Module) -> None:
    parent, _, attr = path.rpartition(".")
    owner = net.get_submodule(parent) if parent else net
    if isinstance(owner, (nn.ModuleList, nn.Sequential)) and attr.isdigit():
        owner[int(attr)] = module
    else:
        setattr(owner, attr, module)


def adapters(net: nn.Module) -> list[LoraAdapter]:
    return [m for m in net.modules() if isinstance(m, LoraAdapter)]


def inject_lora(net: nn.Module, selection: LayerSelection | list[str], rank: int, *,
                lr: float = 1e-4, lr_ratio: float = 16.0, alpha: float | None = None,
                clamp_rank: bool = False, seed: int = 0) -> tuple[nn.Module, list[LoraAdapter]]:
    """Wrap each selected layer with a LoRA adapter (in place); freeze everything else.

    B starts at zero, so the edited network is functionally identical at injection.
    The scale is ``alpha / sqrt(r)`` with ``alpha`` defaulting to ``rank``. With
    ``clamp_rank`` a layer too small for ``rank`` gets ``min(m, n)`` instead of raising.
    """
    paths = selection.selected if isinstance(selection, LayerSelection) else list(selection)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    for p in net.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    out = []
    for path in paths:
        module = net.get_submodule(path)
        kind = layer_kind(module)
        if kind not in ADAPTABLE:
            warnings.warn(f"skipping {path!r}: LoRA not supported for {kind} layers", stacklevel=2)
            continue
        m, n = module.weight.shape[0], module.weight[0].numel()
        r = min(rank, m, n) if clamp_rank else rank
        gamma = (rank if alpha is None else alpha) / math.sqrt(r)
        adapter = LoraAdapter(module, r, gamma, path, lr_a=lr, lr_b=lr * lr_ratio, generator=gen)
        _set_submodule(net, path, adapter)
        out.append(adapter)
    return net, out


def merge_lora(net: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and restore the plain layer (in place)."""
    found = [(n, m) for n, m in net.named_modules() if isinstance(m, LoraAdapter)]
    if not found:
        raise ValueError("network has no LoRA adapters to merge")
    for path, adapter in found:
        if adapter.delta().shape != adapter.base.weight.shape:
            raise ValueError(f"adapter shape mismatch at {path!r}")
        _set_submodule(net, path, adapter.merged())
    for p in net.parameters():
        p.requires_grad_(True)
    return net


def lora_param_groups(adapter_list: list[LoraAdapter]) -> list[dict]:
    return [
        {"params": [a.A for a in adapter_list], "lr": adapter_list[0].lr_a if adapter_list else 0.0},
        {"params": [a.B for a in adapter_list], "lr": adapter_list[0].lr_b if adapter_list else 0.0},
    ]


# ----------------------------------------------------------------- training


def optimize(net: nn.Module, frozen: nn.Module, config: EmbedConfig, sched: NoiseSchedule,
             param_groups: list[dict], steps: int, *, source: FidelitySource | None = None, seed: int = 0,
             log_every: int = 50, on_log: Callable[[dict], None] | None = None,
             on_step: Callable[[int], None] | None = None, max_grad_norm: float | None = None,
             lr_decay: str = "constant") -> list[dict]:
    """Adam (no weight decay) on the combined loss; a fresh fidelity batch each step.

    Returns the logged loss curve. Raises ``FloatingPointError`` on a non-finite loss.
    """
    if steps <= 0:
        return []
    opt = torch.optim.Adam(param_groups, weight_decay=0.0)
    if lr_decay not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps) if lr_decay == "cosine" else None
    noises = [key_to_noise(p.key, p.image.shape) for p in config.payloads]
    rng = np.random.Generator(np.random.Philox(key=seed))
    curve = []
    for step in range(1, steps + 1):
        batch = source.draw(config.fidelity_batch, sched, rng) if source is not None else None
        loss, parts = combined_loss(net, frozen, config, batch, sched, noises)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if max_grad_norm:
            nn.utils.clip_grad_norm_([p for g in param_groups for p in g["params"]], max_grad_norm)
        opt.step()
        if decay is not None:
            decay.step()
        if step % log_every == 0 or step == steps or step == 1:
            rec = {"step": step, **parts}
            curve.append(rec)
            log.debug("step %d %s", step, parts)
            if on_log:
                on_log(rec)
        if on_step:
            on_step(step)
    return curve


def full_finetune(net: nn.Module, frozen: nn.Module, config: EmbedConfig, sched: NoiseSchedule, steps: int, *,
                  source: FidelitySource | None = None, lr: float = 1e-4, seed: int = 0, **kw) -> nn.Module:
    """Ablation baseline: optimize every parameter against the combined loss (in place)."""
    for p in net.parameters():
        p.requires_grad_(True)
    optimize(net, frozen, config, sched, [{"params": list(net.parameters()), "lr": lr}], steps,
             source=source, seed=seed, **kw)
    return net
