"""Command-line interface.

Exit codes: 0 success, 1 usage / bad input, 2 integrity (checksum) failure,
3 numerical failure (non-finite loss, self-check below threshold).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import secrets
import sys
from pathlib import Path


from . import __version__
from .checkpoint import CheckpointError, StegoCheckpoint
from .config import ConfigError, RunConfig, load_config
from .images import (add_payload_noise, load_dataset, load_png, save_grid, save_png, toy_shapes_dataset)
from .metrics import format_db, psnr, ssim, to_metric
from .objectives import EmbedConfig, FidelitySource
from .peft import accumulate_sensitivity, layer_kinds, select_layers
from .pipeline import ChecksumMismatch, audit, embed, extract, extraction_metrics
from .sampler import SamplerConfig, sample
from .score_net import build_net, clone_frozen, train_toy_ddpm
from .stego_keys import KeyFile, KeyFileError, SecretKey, SecretPayload, atomic_write_text, validate_key_set

log = logging.getLogger("stegodiff")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def write_json(path: Path, obj) -> Path:
    def fix(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        return v
    return atomic_write_text(path, json.dumps(fix(obj), indent=2, default=_json_default) + "\n")


def _load_ckpt(path) -> StegoCheckpoint:
    if not path or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return StegoCheckpoint.load(path)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out_dir or cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_train(args, cfg: RunConfig) -> int:
    if args.toy is None and not args.data:
        raise UsageError("train needs --data PATH or --toy N")
    if args.data and not Path(args.data).exists():
        raise UsageError(f"dataset path does not exist: {args.data}")
    seed = cfg.io.seed if args.seed is None else args.seed
    steps = cfg.train.steps if args.steps is None else args.steps
    unet = cfg.model.unet()
    if args.data:
        data = load_dataset(args.data, unet.image_size)
    else:
        data = toy_shapes_dataset(args.toy or cfg.train.toy_dataset_size, unet.image_size, seed=seed)
    sched = cfg.model.schedule()
    out = _out_dir(args, cfg)
    lines = []
    net, curve = train_toy_ddpm(data, sched, steps, net=build_net(unet, seed), batch_size=cfg.train.batch_size,
                                lr=cfg.train.lr, seed=seed, ema_decay=cfg.train.ema_decay or None,
                                callback=lambda s, l: lines.append(json.dumps({"step": s, "loss": l})))
    weights = "ema" if cfg.train.ema_decay and steps > 0 else "raw"
    ckpt = StegoCheckpoint(net, sched, {"kind": "trained", "weights": weights, "ema_decay": cfg.train.ema_decay,
                                        "train_steps": steps, "seed": seed})
    path = ckpt.save(out / (args.name or "model.ckpt"))
    atomic_write_text(out / "train_log.jsonl", "".join(line + "\n" for line in lines))
    print(f"wrote {path} (checksum {ckpt.checksum[:16]})")
    return EXIT_OK


def _payloads(args, cfg: RunConfig, image_size: int) -> tuple[list[SecretPayload], dict]:
    images = args.secret or []
    if not images:
        raise UsageError("embed needs at least one --secret image")
    if args.num_payloads is not None and args.num_payloads != len(images):
        raise UsageError(f"--num-payloads {args.num_payloads} but {len(images)} --secret images given")
    for p in images:
        if not Path(p).exists():
            raise UsageError(f"secret image not found: {p}")
    seeds = args.key_seed or []
    if seeds and len(seeds) != len(images):
        raise UsageError("--key-seed must be given once per secret image")
    if not seeds:
        seeds = [secrets.randbits(64) for _ in images]
    timesteps = args.timestep or [cfg.embed.timestep]
    if len(timesteps) == 1:
        timesteps = timesteps * len(images)
    if len(timesteps) != len(images):
        raise UsageError("--timestep must be given once or once per secret image")
    variance = cfg.embed.noisy_payload_variance if args.noisy_payload_variance is None else args.noisy_payload_variance
    payloads = []
    for i, (img, s, t) in enumerate(zip(images, seeds, timesteps)):
        x = load_png(img)
        if x.shape[-1] != image_size or x.shape[-2] != image_size:
            raise UsageError(f"secret {img} is {tuple(x.shape[-2:])}, model expects {image_size}x{image_size}")
        if variance > 0:
            x = add_payload_noise(x, variance, seed=i)
        payloads.append(SecretPayload(x, SecretKey(int(s), int(t)), Path(img).stem))
    pre = {"noisy_payload_variance": variance, "applied": variance > 0}
    return payloads, pre


def cmd_embed(args, cfg: RunConfig) -> int:
    original = _load_ckpt(args.model)
    payloads, pre = _payloads(args, cfg, original.net.config.image_size)
    conflicts = validate_key_set([p.key for p in payloads])
    if conflicts:
        raise UsageError("key conflict: " + "; ".join(conflicts))
    e = cfg.embed
    lam = e.lam if args.lam is None else args.lam
    steps = e.steps if args.steps is None else args.steps
    seed = cfg.io.seed if args.seed is None else args.seed
    config = EmbedConfig(payloads, lam=lam, fidelity_batch=e.fidelity_batch, fidelity_source=e.fidelity_source)
    peft_cfg = cfg.peft.peft()
    if args.n_iters is not None:
        peft_cfg.n_iters = args.n_iters
    if args.eta is not None:
        peft_cfg.eta = args.eta
    source = None
    if e.fidelity_source == "surrogate_folder" and lam > 0:
        source = FidelitySource.from_folder(e.surrogate_folder, original.net.config.image_size)
    out = _out_dir(args, cfg)
    curve_path = out / "loss_curve.jsonl"
    curve_lines = []
    stego, report = embed(original, config, peft_cfg, steps, source=source, seed=seed, pool_size=e.pool_size,
                          pool_steps=e.pool_steps, cache_dir=cfg.io.cache_dir,
                          on_log=lambda rec: curve_lines.append(json.dumps(rec)))
    atomic_write_text(curve_path, "".join(line + "\n" for line in curve_lines))
    ck_path = stego.save(out / "stego.ckpt")
    for p in payloads:
        KeyFile(p.key, tuple(p.image.shape), stego.checksum, p.label).save(out / f"key_{p.label}.json")
        if pre["applied"]:
            save_png(p.image, out / f"payload_{p.label}.png")
    rep = report.to_dict()
    rep["preprocessing"] = pre
    rep["checkpoint"] = {"path": str(ck_path), "checksum": stego.checksum}
    write_json(out / "embed_report.json", rep)
    threshold = e.min_psnr if args.min_psnr is None else args.min_psnr
    for row in report.self_check:
        print(f"{row['label']:>20s}  t={row['timestep']:<5d} PSNR {format_db(row['psnr'])} dB  SSIM {row['ssim']:.4f}")
    if any(row["psnr"] < threshold for row in report.self_check):
        print(f"self-check PSNR below threshold {threshold} dB", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig) -> int:
    stego = _load_ckpt(args.model)
    kf = KeyFile.load(args.key)
    if tuple(kf.image_shape) != tuple(stego.image_shape):
        raise UsageError(f"key image shape {kf.image_shape} does not match model {stego.image_shape}")
    x = extract(stego, kf.key, expected_checksum=kf.checkpoint_checksum, force=args.force)
    out = Path(args.out)
    save_png(x, out)
    print(f"wrote {out}")
    if args.reference:
        ref = load_png(args.reference)
        p, s = extraction_metrics(x, ref)
        print(f"PSNR {format_db(p)} dB  SSIM {s:.4f}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(args.model)
    num_steps = args.num_steps or (ckpt.sched.T if args.kind == "ancestral" else 50)
    scfg = SamplerConfig(args.kind, num_steps, args.seed)
    imgs = sample(ckpt.net, ckpt.sched, scfg, args.n)
    out = _out_dir(args, cfg)
    grid = save_grid(imgs, out / "samples.png")
    write_json(out / "samples_manifest.json", {"seed": args.seed, "sampler": args.kind, "num_steps": num_steps,
                                               "n": args.n, "checkpoint_checksum": ckpt.checksum})
    print(f"wrote {grid}")
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    original, stego = _load_ckpt(args.original), _load_ckpt(args.stego)
    num_steps = args.num_steps or (original.sched.T if args.kind == "ancestral" else 50)
    rep = audit(original, stego, seeds=args.seeds, n=args.n, sampler=SamplerConfig(args.kind, num_steps, 0),
                residual_n=args.residual_n)
    out = _out_dir(args, cfg)
    save_grid(rep.original_samples, out / "audit_original.png")
    save_grid(rep.stego_samples, out / "audit_stego.png")
    d = rep.to_dict()
    d["original_checksum"], d["stego_checksum"] = original.checksum, stego.checksum
    write_json(out / "audit_report.json", d)
    print(f"shared-seed PSNR mean {format_db(rep.pairs.psnr_mean)} dB  SSIM mean {rep.pairs.ssim_mean:.4f}  "
          f"score residual {rep.residual:.6g}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    pairs = []
    a, b = Path(args.a), Path(args.b)
    if a.is_dir() and b.is_dir():
        names = sorted(p.name for p in a.iterdir() if p.suffix.lower() == ".png")
        pairs = [(a / n, b / n) for n in names if (b / n).exists()]
    else:
        pairs = [(a, b)]
    if not pairs:
        raise UsageError("no image pairs to evaluate")
    print(f"{'image':<30s} {'PSNR (dB)':>10s} {'SSIM':>8s}")
    for pa, pb in pairs:
        if not pa.exists() or not pb.exists():
            raise UsageError(f"missing image {pa if not pa.exists() else pb}")
        xa, xb = to_metric(load_png(pa)), to_metric(load_png(pb))
        print(f"{pa.name:<30s} {format_db(psnr(xa, xb)):>10s} {ssim(xa, xb, shrink=True):8.4f}")
    return EXIT_OK


def cmd_sensitivity_report(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(args.model)
    if not Path(args.secret).exists():
        raise UsageError(f"secret image not found: {args.secret}")
    x = load_png(args.secret, ckpt.net.config.image_size)
    key = SecretKey(args.key_seed, args.timestep or cfg.embed.timestep)
    lam = cfg.embed.lam if args.lam is None else args.lam
    config = EmbedConfig([SecretPayload(x, key, Path(args.secret).stem)], lam=lam,
                         fidelity_batch=cfg.embed.fidelity_batch).validate(ckpt.sched)
    frozen = clone_frozen(ckpt.net)
    seed = cfg.io.seed
    source = None
    if lam > 0:
        source = FidelitySource.model_generated(frozen, ckpt.sched, checksum=ckpt.checksum,
                                                pool_size=cfg.embed.pool_size, num_steps=cfg.embed.pool_steps,
                                                seed=seed, cache_dir=cfg.io.cache_dir)
    n_iters = args.n_iters or cfg.peft.n_iters
    smap = accumulate_sensitivity(ckpt.net, frozen, config, ckpt.sched, n_iters, source=source, seed=seed)
    sel = select_layers(smap, args.sparsity or cfg.peft.sparsity, args.eta or cfg.peft.eta, layer_kinds(ckpt.net))
    out = _out_dir(args, cfg)
    d = sel.to_dict()
    d["n_iters"] = n_iters
    d["checkpoint_checksum"] = ckpt.checksum
    path = write_json(out / "sensitivity_report.json", d)
    print(f"tau={sel.tau:.4g}  sensitive {sel.n_sensitive}/{sel.n_total} "
          f"({sel.n_sensitive / sel.n_total:.4%})  selected {len(sel.selected)} layers -> {path}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stegodiff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--config", help="TOML run configuration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy DDPM")
    p.add_argument("--data", help="folder of PNGs or .npy array in [-1, 1]")
    p.add_argument("--toy", type=int, nargs="?", const=0, help="use N procedural toy images instead of --data")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--name", help="checkpoint file name (default model.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="hide secret images in a model")
    p.add_argument("--model", required=True)
    p.add_argument("--secret", action="append", help="secret PNG (repeat for multiple recipients)")
    p.add_argument("--num-payloads", type=int)
    p.add_argument("--key-seed", type=int, action="append", help="key seed per secret (default: random)")
    p.add_argument("--timestep", type=int, action="append", help="secret timestep, once or per secret")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--n-iters", type=int, help="sensitivity accumulation iterations")
    p.add_argument("--eta", type=int, help="number of adapted layers")
    p.add_argument("--noisy-payload-variance", type=float, help="Gaussian noise variance on the 0-255 scale")
    p.add_argument("--min-psnr", type=float, help="exit 3 if any self-check PSNR is below this")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover a secret image with a key file")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    p.add_argument("--force", action="store_true", help="continue on checkpoint checksum mismatch")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sample", help="generate images")
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=["ancestral", "skip_step"], default="ancestral")
    p.add_argument("--num-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("audit", help="compare a stego model against its original")
    p.add_argument("--original", required=True)
    p.add_argument("--stego", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--kind", choices=["ancestral", "skip_step"], default="ancestral")
    p.add_argument("--num-steps", type=int)
    p.add_argument("--residual-n", type=int, default=256)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("evaluate", help="PSNR/SSIM between two images or two folders")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sensitivity-report", help="rank layers by sensitive-parameter count")
    p.add_argument("--model", required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--key-seed", type=int, default=0)
    p.add_argument("--timestep", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--n-iters", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--eta", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sensitivity_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ChecksumMismatch, CheckpointError, KeyFileError) as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
