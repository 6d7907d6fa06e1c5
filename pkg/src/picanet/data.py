"""Samples, the synthetic saliency corpus, directory ingestion and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError

AUG_RESIZE = 72
AUG_CROP = 64
MIN_AREA, MAX_AREA = 0.05, 0.5


@dataclass
class Sample:
    """``image``: 3 x S x S float32 in [0, 1]; ``mask``: 1 x S x S binary float32."""

    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DataError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"mask of {self.name or 'sample'} is not binary")


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel bilinear resize of a C x H x W array (edges clamped)."""
    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(arr.dtype)

    r0, r1, wr = axis(arr.shape[-2], height)
    c0, c1, wc = axis(arr.shape[-1], width)
    rows = arr[..., r0, :] * (1 - wr)[:, None] + arr[..., r1, :] * wr[:, None]
    return rows[..., c0] * (1 - wc) + rows[..., c1] * wc


# ----------------------------------------------------------------------------
# synthetic corpus


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = rng.uniform(0.2, 0.8, size=2) * size
    radius = rng.uniform(0.12, 0.3) * size
    if rng.random() < 0.5:
        rx, ry = radius * rng.uniform(0.6, 1.4, size=2)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        k = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = radius * rng.uniform(0.7, 1.3, size=k)
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(angles, radii)]
        draw.polygon(pts, fill=255)
    return np.asarray(canvas, dtype=np.float32) / 255.0 >= 0.5


def _synth_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            mask |= _shape_mask(rng, size)
        frac = mask.mean()
        if MIN_AREA <= frac <= MAX_AREA:
            break
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    base = rng.uniform(0.25, 0.75, size=3)
    tilt = rng.uniform(-0.12, 0.12, size=(3, 2))
    bg = base[:, None, None] + tilt[:, 0, None, None] * (yy - 0.5) + tilt[:, 1, None, None] * (xx - 0.5)
    # faint distractor blobs: texture, not salient
    for _ in range(int(rng.integers(1, 4))):
        blob = _shape_mask(rng, size)
        bg = bg + rng.uniform(-0.08, 0.08, size=3)[:, None, None] * blob
    direction = np.where(base > 0.5, -1.0, 1.0) * (rng.random(3) < 0.8)
    if not direction.any():
        direction[int(rng.integers(0, 3))] = 1.0
    fg = np.clip(base + direction * rng.uniform(0.35, 0.5, size=3), 0.0, 1.0)
    image = np.where(mask[None], fg[:, None, None], bg)
    image = image + rng.normal(0.0, 0.04, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask[None].astype(np.float32)


def synth_dataset(seed: int, n: int, size: int = 64) -> list[Sample]:
    """Deterministic corpus of ``n`` images with 1-2 high-contrast salient shapes."""
    if n < 1:
        raise DataError("synthetic dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, mask = _synth_one(rng, size)
        out.append(Sample(image, mask, f"synth{seed}_{i:04d}"))
    return out


def foreground_contrast(sample: Sample) -> float:
    """L2 distance between mean foreground and mean background colour."""
    m = sample.mask[0] > 0.5
    fg = sample.image[:, m].mean(axis=1)
    bg = sample.image[:, ~m].mean(axis=1)
    return float(np.linalg.norm(fg - bg))


# ----------------------------------------------------------------------------
# directory ingestion


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)[None]


def load_dataset_dir(directory: str, size: int | None = None) -> list[Sample]:
    """Read ``<name>.png`` / ``<name>_mask.png`` pairs, sorted by name.

    With ``size`` set, images are resized bilinearly and masks re-binarised
    at 0.5 after the same resize.
    """
    if not os.path.isdir(directory):
        raise DataError(f"dataset directory {directory!r} does not exist")
    files = sorted(os.listdir(directory))
    names = [f[:-4] for f in files if f.endswith(".png") and not f.endswith("_mask.png")]
    samples = []
    missing = []
    for name in names:
        mpath = os.path.join(directory, f"{name}_mask.png")
        if not os.path.exists(mpath):
            missing.append(name)
            continue
        image = load_image(os.path.join(directory, f"{name}.png"))
        mask = load_mask(mpath)
        if mask.shape[1:] != image.shape[1:]:
            raise DataError(f"{name}: mask size {mask.shape[1:]} != image size {image.shape[1:]}")
        if size is not None and image.shape[1:] != (size, size):
            image = resize_bilinear(image, size, size).astype(np.float32)
            mask = (resize_bilinear(mask, size, size) >= 0.5).astype(np.float32)
        samples.append(Sample(image, mask, name))
    if missing:
        raise DataError(f"images without masks: {', '.join(missing)}")
    if not samples:
        raise DataError(f"no <name>.png/<name>_mask.png pairs in {directory!r}")
    return samples


def save_dataset_dir(samples: list[Sample], directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(os.path.join(directory, f"{s.name}.png"))
        Image.fromarray((s.mask[0] * 255).astype(np.uint8), "L").save(
            os.path.join(directory, f"{s.name}_mask.png"))


def resolve_dataset(source: str, size: int | None = None) -> list[Sample]:
    """``synthetic:<seed>:<n>`` or a directory of PNG pairs."""
    if source.startswith("synthetic:"):
        try:
            _, seed, n = source.split(":")
            seed, n = int(seed), int(n)
        except ValueError:
            raise DataError(f"bad synthetic dataset spec {source!r}; use synthetic:<seed>:<n>") from None
        return synth_dataset(seed, n, size or 64)
    return load_dataset_dir(source, size)


# ----------------------------------------------------------------------------
# augmentation


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.mask[:, :, ::-1].copy(), sample.name)


def augment(sample: Sample, rng: np.random.Generator, resize: int = AUG_RESIZE,
            crop: int = AUG_CROP, flip: bool | None = None) -> Sample:
    """Resize to ``resize``, mirror with p = 0.5 (or as forced), random ``crop`` window."""
    image = resize_bilinear(sample.image, resize, resize).astype(np.float32)
    mask = (resize_bilinear(sample.mask, resize, resize) >= 0.5).astype(np.float32)
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    r0, c0 = (int(v) for v in rng.integers(0, resize - crop + 1, size=2))
    out = Sample(image[:, r0:r0 + crop, c0:c0 + crop].copy(),
                 mask[:, r0:r0 + crop, c0:c0 + crop].copy(), sample.name)
    return hflip(out) if do_flip else out
