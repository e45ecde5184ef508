"""Run configuration: one TOML file with flat sections, overridable by CLI flags.

Only IO paths may be overridden from the environment
(``STEGODIFF_OUT_DIR``, ``STEGODIFF_CACHE_DIR``).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .diffusion_math import make_linear_schedule
from .peft import PeftConfig
from .score_net import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 16
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4])
    num_res_blocks: int = 1
    temb_dim: int = 64
    groups: int = 8

    def unet(self) -> UNetConfig:
        return UNetConfig(self.image_size, self.in_channels, self.base_channels, tuple(self.channel_mults),
                          self.num_res_blocks, self.temb_dim, self.groups)

    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainSection:
    steps: int = 10000
    batch_size: int = 64
    lr: float = 2e-4
    toy_dataset_size: int = 4000
    ema_decay: float = 0.0  # 0 keeps the raw last-iterate weights


@dataclass
class EmbedSection:
    timestep: int = 500
    steps: int = 2000
    lam: float = 1.0
    fidelity_batch: int = 64
    fidelity_source: str = "model_generated"
    surrogate_folder: str = ""
    pool_size: int = 256
    pool_steps: int = 50
    noisy_payload_variance: float = 0.0
    min_psnr: float = 0.0


@dataclass
class PeftSection:
    n_iters: int = 50
    sparsity: float = 0.01
    eta: int = 15
    rank: int = 64
    rank_ref_width: int = 128
    alpha: float = 0.0  # 0 -> alpha = rank
    lr: float = 1e-4
    lr_ratio: float = 16.0
    clamp_rank: bool = True
    max_grad_norm: float = 0.0  # 0 -> no clipping
    lr_decay: str = "cosine"

    def peft(self) -> PeftConfig:
        return PeftConfig(self.n_iters, self.sparsity, self.eta, self.rank, self.rank_ref_width or None,
                          self.alpha or None, self.lr, self.lr_ratio, self.clamp_rank, self.max_grad_norm or None,
                          self.lr_decay)


@dataclass
class IoSection:
    out_dir: str = "out"
    cache_dir: str = ".stegodiff_cache"
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    peft: PeftSection = field(default_factory=PeftSection)
    io: IoSection = field(default_factory=IoSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}
_ALIASES = {"embed": {"lambda": "lam"}}


def _build(section: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        name = _ALIASES.get(section, {}).get(k, k)
        if name not in known:
            raise ConfigError(f"unknown key {k!r} in [{section}]")
        kwargs[name] = v
    return cls(**kwargs)


def load_config(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    raw = {}
    if path:
        try:
            raw = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = RunConfig(
        model=_build("model", ModelSection, raw.get("model", {})),
        train=_build("train", TrainSection, raw.get("train", {})),
        embed=_build("embed", EmbedSection, raw.get("embed", {})),
        peft=_build("peft", PeftSection, raw.get("peft", {})),
        io=_build("io", IoSection, raw.get("io", {})),
    )
    if env.get("STEGODIFF_OUT_DIR"):
        cfg.io.out_dir = env["STEGODIFF_OUT_DIR"]
    if env.get("STEGODIFF_CACHE_DIR"):
        cfg.io.cache_dir = env["STEGODIFF_CACHE_DIR"]
    return cfg
