"""End-to-end embedding, one-step extraction, and fidelity auditing."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .checkpoint import StegoCheckpoint
from .diffusion_math import one_step_reconstruct
from .metrics import MetricReport, psnr, ssim, to_metric
from .objectives import EmbedConfig, FidelitySource
from .peft import (PeftConfig, accumulate_sensitivity, inject_lora, layer_kinds, lora_param_groups, merge_lora,
                   optimize, select_layers)
from .sampler import SamplerConfig, sample
from .score_net import clone_frozen, count_params
from .stego_keys import SecretKey, key_to_noise

log = logging.getLogger(__name__)


class ChecksumMismatch(RuntimeError):
    pass


def embed_config_hash(config: EmbedConfig, peft: PeftConfig, steps: int) -> str:
    """Hash of the non-secret embedding settings (no seeds, timesteps or images)."""
    blob = json.dumps({"lam": config.lam, "fidelity_batch": config.fidelity_batch,
                       "fidelity_source": config.fidelity_source, "M": len(config.payloads),
                       "peft": asdict(peft), "steps": steps}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@torch.no_grad()
def extract(stego: StegoCheckpoint, key: SecretKey, *, expected_checksum: str | None = None,
            force: bool = False) -> torch.Tensor:
    """Recover a secret with one network evaluation; output clamped to [-1, 1]."""
    key.check(stego.sched.T)
    if expected_checksum is not None and expected_checksum != stego.checksum:
        msg = f"key was issued for checkpoint {expected_checksum[:12]}..., model is {stego.checksum[:12]}..."
        if not force:
            raise ChecksumMismatch(msg)
        log.warning("%s (continuing because force=True)", msg)
    z = key_to_noise(key, stego.image_shape)
    eps = stego.net(z.unsqueeze(0), torch.tensor([key.timestep]))[0]
    return one_step_reconstruct(z, key.timestep, eps, stego.sched).clamp(-1, 1)


def extraction_metrics(extracted: torch.Tensor, secret: torch.Tensor) -> tuple[float, float]:
    a, b = to_metric(extracted), to_metric(secret.clamp(-1, 1))
    return psnr(a, b), ssim(a, b, shrink=True)


@dataclass
class EmbedReport:
    self_check: list[dict] = field(default_factory=list)
    loss_curve: list[dict] = field(default_factory=list)
    selection: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    preprocessing: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)

    @property
    def psnrs(self) -> list[float]:
        return [row["psnr"] for row in self.self_check]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("snapshots")
        return d


def _self_check(stego: StegoCheckpoint, config: EmbedConfig) -> list[dict]:
    rows = []
    for p in config.payloads:
        x = extract(stego, p.key)
        ps, ss = extraction_metrics(x, p.image)
        rows.append({"label": p.label, "timestep": p.key.timestep, "psnr": ps, "ssim": ss})
    return rows


def embed(original: StegoCheckpoint, config: EmbedConfig, peft: PeftConfig, steps: int = 2000, *,
          source: FidelitySource | None = None, seed: int = 0, pool_size: int = 256, pool_steps: int = 50,
          cache_dir=None, snapshot_steps: tuple[int, ...] = (), log_every: int = 50,
          on_log: Callable[[dict], None] | None = None) -> tuple[StegoCheckpoint, EmbedReport]:
    """Sensitivity accumulation -> layer selection -> LoRA -> optimize -> merge -> self-check.

    ``snapshot_steps`` additionally merges and self-checks copies of the network at
    those iteration counts; they are returned in ``report.snapshots`` as checkpoints.
    """
    sched = original.sched
    config.validate(sched)
    shape = tuple(original.image_shape)
    for p in config.payloads:
        if tuple(p.image.shape) != shape:
            raise ValueError(f"payload {p.label!r} has shape {tuple(p.image.shape)}, model expects {shape}")
    timing = {}
    t_start = time.perf_counter()
    frozen = clone_frozen(original.net)
    net = copy.deepcopy(original.net)

    t0 = time.perf_counter()
    if source is None and config.lam > 0:
        if config.fidelity_source != "model_generated":
            raise ValueError("surrogate_folder fidelity source must be supplied explicitly")
        source = FidelitySource.model_generated(frozen, sched, checksum=original.checksum, pool_size=pool_size,
                                                num_steps=pool_steps, seed=seed, cache_dir=cache_dir)
    timing["fidelity_pool_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    smap = accumulate_sensitivity(net, frozen, config, sched, peft.n_iters, source=source, seed=seed)
    selection = select_layers(smap, peft.sparsity, peft.eta, layer_kinds(net))
    timing["sensitivity_s"] = time.perf_counter() - t0

    total_params = count_params(net)
    rank = peft.effective_rank(net.config.base_channels)
    net, adapter_list = inject_lora(net, selection, rank, lr=peft.lr, lr_ratio=peft.lr_ratio, alpha=peft.alpha,
                                    clamp_rank=peft.clamp_rank, seed=seed)
    trainable = count_params(net, trainable_only=True)

    meta_base = {
        "kind": "stego",
        "source_checksum": original.checksum,
        "source_weights": original.metadata.get("weights", "raw"),
        "embed_config_hash": embed_config_hash(config, peft, steps),
        "payload_count": len(config.payloads),
    }
    snapshots: dict[int, tuple[StegoCheckpoint, list[dict]]] = {}

    def on_step(step: int) -> None:
        if step in snapshot_steps and step != steps:
            snap = merge_lora(copy.deepcopy(net))
            snap.eval()
            ck = StegoCheckpoint(snap, sched, dict(meta_base, steps=step))
            snapshots[step] = (ck, _self_check(ck, config))

    t0 = time.perf_counter()
    curve = optimize(net, frozen, config, sched, lora_param_groups(adapter_list), steps, source=source,
                     seed=seed + 1, log_every=log_every, on_log=on_log, on_step=on_step,
                     max_grad_norm=peft.max_grad_norm, lr_decay=peft.lr_decay)
    timing["finetune_s"] = time.perf_counter() - t0

    merge_lora(net)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    stego = StegoCheckpoint(net, sched, dict(meta_base, steps=steps))
    # self-check runs on the merged network that is actually shipped
    t0 = time.perf_counter()
    rows = _self_check(stego, config)
    timing["self_check_s"] = time.perf_counter() - t0
    timing["total_s"] = time.perf_counter() - t_start

    report = EmbedReport(
        self_check=rows,
        loss_curve=curve,
        selection=selection.to_dict(),
        timing=timing,
        params={"total": total_params, "trainable": trainable, "trainable_fraction": trainable / total_params,
                "rank": rank, "adapters": [{"layer": a.path, "rank": a.rank, "m": a.m, "n": a.n,
                                             "scale": a.scale} for a in adapter_list]},
        config={"lambda": config.lam, "fidelity_batch": config.fidelity_batch,
                "fidelity_source": config.fidelity_source, "steps": steps, "peft": asdict(peft),
                "payload_count": len(config.payloads)},
        snapshots={k: v for k, v in snapshots.items()},
    )
    return stego, report


@dataclass
class AuditReport:
    pairs: MetricReport
    residual: float
    residual_n: int
    sampler: dict
    original_samples: torch.Tensor | None = None
    stego_samples: torch.Tensor | None = None

    @property
    def psnr_mean(self) -> float:
        return self.pairs.psnr_mean

    def to_dict(self) -> dict:
        return {"shared_seed": self.pairs.to_dict(), "score_residual": self.residual,
                "residual_triples": self.residual_n, "sampler": self.sampler}


@torch.no_grad()
def score_residual(net_a, net_b, x0: torch.Tensor, sched, n: int, seed: int = 0, batch_size: int = 64) -> float:
    """Mean over fresh (x0, eps, t) triples of ||eps_a(x_t, t) - eps_b(x_t, t)||^2."""
    from .diffusion_math import forward_diffuse

    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = rng.integers(0, x0.shape[0], size=n)
    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=n)).long()
    eps = torch.from_numpy(rng.standard_normal((n, *x0.shape[1:]), dtype=np.float32))
    xt = forward_diffuse(x0[torch.from_numpy(idx)], t, eps, sched)
    total = 0.0
    for i in range(0, n, batch_size):
        d = net_a(xt[i:i + batch_size], t[i:i + batch_size]) - net_b(xt[i:i + batch_size], t[i:i + batch_size])
        total += float(d.pow(2).flatten(1).sum(1).double().sum())
    return total / n


def audit(original: StegoCheckpoint, stego: StegoCheckpoint, seeds=(0,), n: int = 32, *,
          sampler: SamplerConfig | None = None, residual_n: int = 256, keep_samples: bool = True) -> AuditReport:
    """Shared-seed sample comparison plus mean score residual between two models."""
    if original.net.config != stego.net.config:
        raise ValueError("architecture mismatch between original and stego models")
    if original.sched.to_dict() != stego.sched.to_dict():
        raise ValueError("schedule mismatch between original and stego models")
    base = sampler or SamplerConfig("ancestral", original.sched.T, 0)
    report = MetricReport()
    orig_all, stego_all = [], []
    for s in seeds:
        cfg = SamplerConfig(base.kind, base.num_steps, int(s))
        a = sample(original.net, original.sched, cfg, n)
        b = sample(stego.net, stego.sched, cfg, n)
        for xa, xb in zip(a, b):
            report.add(to_metric(xa), to_metric(xb))
        orig_all.append(a)
        stego_all.append(b)
    orig = torch.cat(orig_all)
    residual = score_residual(stego.net, original.net, orig, original.sched, residual_n, seed=int(seeds[0]))
    return AuditReport(report, residual, residual_n, {"kind": base.kind, "num_steps": base.num_steps,
                                                      "seeds": [int(s) for s in seeds], "n": n},
                       orig if keep_samples else None, torch.cat(stego_all) if keep_samples else None)
