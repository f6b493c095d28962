"""HR image sources, PNG I/O, patch sampling and batch synthesis."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .degradation import check_image, degrade


def synthetic_hr(size, rng, channels=3):
    """Procedural HR image: smooth gradient, random rectangles/discs/stripes and fine texture.

    Sharp edges and high-frequency content are what blur kernels act on, so the
    generator is biased towards them.
    """
    h, w = (size, size) if np.isscalar(size) else size
    rows, cols = np.mgrid[0:h, 0:w]
    yy, xx = rows / max(h, w), cols / max(h, w)
    img = np.empty((h, w, channels))
    for c in range(channels):
        a, b, d = rng.uniform(-0.5, 0.5, size=3)
        img[:, :, c] = 0.5 + a * xx + b * yy + d * xx * yy
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0, 1, size=channels)
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(h // 8 + 1, h // 2 + 2), x0 + rng.integers(w // 8 + 1, w // 2 + 2)
            img[y0:y1, x0:x1] = color
        elif kind == 1:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.05, 0.3) * max(h, w)
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 < r * r
            img[mask] = color
        else:
            period = rng.uniform(2.0, 8.0)
            angle = rng.uniform(0, np.pi)
            phase = (np.cos(angle) * cols + np.sin(angle) * rows) / period
            mask = (np.floor(phase) % 2 == 0)
            y0, x0 = rng.integers(0, h // 2 + 1), rng.integers(0, w // 2 + 1)
            region = np.zeros((h, w), dtype=bool)
            region[y0:y0 + h // 2, x0:x0 + w // 2] = True
            img[mask & region] = color
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(count, size, seed):
    """``count`` synthetic HR images; image ``i`` depends only on ``(seed, i)``."""
    return [synthetic_hr(size, np.random.default_rng([seed, i])) for i in range(count)]


def load_png(path):
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def save_png(path, img):
    img = check_image(img)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(u8[:, :, 0], mode="L") if u8.shape[2] == 1 else Image.fromarray(u8, mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def load_png_dir(directory):
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images found in {directory}")
    return [load_png(p) for p in paths]


def random_crop(img, size, rng):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}×{w} smaller than crop {size}")
    y = rng.integers(0, h - size + 1)
    x = rng.integers(0, w - size + 1)
    return img[y:y + size, x:x + size]


def augment(img, rng):
    """Random horizontal/vertical flip and 90° rotation."""
    if rng.uniform() < 0.5:
        img = img[:, ::-1]
    if rng.uniform() < 0.5:
        img = img[::-1]
    return np.ascontiguousarray(np.rot90(img, rng.integers(4)))


def to_tensor(imgs, dtype=torch.float32):
    """List of H×W×C arrays (or one array) to an N×C×H×W tensor."""
    if isinstance(imgs, np.ndarray) and imgs.ndim == 3:
        imgs = [imgs]
    return torch.from_numpy(np.stack([np.transpose(i, (2, 0, 1)) for i in imgs])).to(dtype)


def to_image(t):
    """C×H×W (or 1×C×H×W) tensor to an H×W×C float64 array."""
    arr = t.detach().cpu().double().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return np.transpose(arr, (1, 2, 0))


def make_pairs(hr_images, spec, patch_size, rng, *, augment_patches=True):
    """Crop HR patches of ``patch_size * scale`` and degrade each under ``spec``.

    Every patch gets its own noise seed drawn from ``rng`` so noise differs
    across the batch while the degradation stays shared.
    """
    hr_size = patch_size * spec.scale
    hrs, lrs = [], []
    for img in hr_images:
        patch = random_crop(img, hr_size, rng)
        if augment_patches:
            patch = augment(patch, rng)
        item_spec = replace(spec, rng_seed=int(rng.integers(2**31 - 1)))
        hrs.append(patch)
        lrs.append(degrade(patch, item_spec))
    return lrs, hrs


def sample_images(dataset, count, rng):
    idx = rng.choice(len(dataset), size=count, replace=len(dataset) < count)
    return [dataset[i] for i in idx]
