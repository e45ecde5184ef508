"""PNG ingest/export, the synthetic toy training set, and bundled natural secret images."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .stego_keys import atomic_write_bytes

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def load_png(path: str | Path, image_size: int | None = None) -> torch.Tensor:
    """Read an RGB image as a (3, H, W) float tensor in model range [-1, 1]."""
    img = Image.open(path).convert("RGB")
    if image_size is not None and img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Model-range (C, H, W) tensor -> (H, W, C) uint8, rounding to nearest."""
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def save_png(x: torch.Tensor, path: str | Path) -> Path:
    return atomic_write_bytes(path, png_bytes(to_uint8(x)))


def make_grid(images: torch.Tensor, nrow: int = 8, pad: int = 2) -> torch.Tensor:
    n, c, h, w = images.shape
    ncol = min(nrow, n)
    rows = (n + ncol - 1) // ncol
    grid = torch.full((c, rows * (h + pad) + pad, ncol * (w + pad) + pad), -1.0)
    for i in range(n):
        r, q = divmod(i, ncol)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i]
    return grid


def save_grid(images: torch.Tensor, path: str | Path, nrow: int = 8) -> Path:
    return save_png(make_grid(images, nrow), path)


def load_folder(folder: str | Path, image_size: int | None = None) -> list[torch.Tensor]:
    files = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [load_png(p, image_size) for p in files]


def load_dataset(path: str | Path, image_size: int | None = None) -> torch.Tensor:
    """Images from a folder of PNGs or a ``.npy`` array (N, C, H, W) already in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    if path.suffix == ".npy":
        return torch.from_numpy(np.load(path)).float()
    imgs = load_folder(path, image_size)
    if not imgs:
        raise ValueError(f"no images in {path}")
    return torch.stack(imgs)


def toy_shapes_dataset(n: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    """Procedural images: smooth two-colour background gradient plus one or two filled shapes.

    Returns (n, 3, size, size) in [-1, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        c0, c1 = rng.uniform(0.0, 1.0, (2, 3, 1, 1)).astype(np.float32)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-6)
        img = c0 * (1 - ramp) + c1 * ramp
        for _ in range(rng.integers(1, 3)):
            color = rng.uniform(0.0, 1.0, (3, 1, 1)).astype(np.float32)
            cy, cx = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.1, 0.3)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
            else:
                mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.5))
            img = np.where(mask[None], color, img)
        out[i] = img
    return torch.from_numpy(out * 2.0 - 1.0)


SECRET_IMAGE_NAMES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "colorwheel")


def natural_secret(name: str, size: int = 32) -> torch.Tensor:
    """A bundled natural photograph (from scikit-image's sample data), centre-cropped and resized."""
    from skimage import data

    arr = getattr(data, name)()
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    arr = arr[..., :3]
    h, w = arr.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = Image.fromarray(arr[top:top + s, left:left + s]).resize((size, size), Image.LANCZOS)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1) * 2.0 - 1.0


def add_payload_noise(x: torch.Tensor, variance: float, seed: int) -> torch.Tensor:
    """Add N(0, variance) noise on the 0-255 scale to a model-range image and re-quantize."""
    rng = np.random.default_rng(seed)
    pix = (x.numpy().astype(np.float64) + 1.0) * 127.5
    pix = pix + rng.normal(0.0, np.sqrt(variance), size=pix.shape)
    pix = np.clip(np.round(pix), 0, 255)
    return torch.from_numpy((pix / 127.5 - 1.0).astype(np.float32))
