"""Augmentation pipeline for single-image textual inversion.

Per augmented copy: horizontal flip with probability 0.5, a random crop
covering 50-100% of the image area (resized back), Gaussian blur with a 5x5
kernel and sigma drawn in [0.1, 2], and hue/saturation/contrast/brightness
jitter with per-property magnitudes drawn in [0, 0.1]. Each draw is recorded
so range conformance is testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    crop_fraction: tuple[float, float] = (0.5, 1.0)
    blur_kernel: int = 5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter_magnitude: tuple[float, float] = (0.0, 0.1)
    sample_count: int = 16


@dataclass
class AugmentationDraw:
    flipped: bool
    crop_fraction: float
    blur_sigma: float
    jitter: dict = field(default_factory=dict)  # property -> drawn magnitude


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    cols = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    c1 = np.clip(c0 + 1, 0, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[:, None, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def _gaussian_blur(img: np.ndarray, sigma: float, kernel: int = 5) -> np.ndarray:
    half = kernel // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, ((half, half), (0, 0), (0, 0)), mode="edge")
    out = sum(k[i] * padded[i : i + img.shape[0]] for i in range(kernel))
    padded = np.pad(out, ((0, 0), (half, half), (0, 0)), mode="edge")
    return sum(k[i] * padded[:, i : i + img.shape[1]] for i in range(kernel))


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    mx = rgb.max(-1)
    mn = rgb.min(-1)
    diff = mx - mn
    h = np.zeros_like(mx)
    safe = diff > 1e-12
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rc = np.where(safe, (mx - r) / np.where(safe, diff, 1), 0)
    gc = np.where(safe, (mx - g) / np.where(safe, diff, 1), 0)
    bc = np.where(safe, (mx - b) / np.where(safe, diff, 1), 0)
    h = np.where(mx == r, bc - gc, h)
    h = np.where(mx == g, 2.0 + rc - bc, h)
    h = np.where(mx == b, 4.0 + gc - rc, h)
    h = (h / 6.0) % 1.0
    h = np.where(safe, h, 0.0)
    s = np.where(mx > 1e-12, diff / np.where(mx > 1e-12, mx, 1), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    choices = [
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ]
    out = np.zeros_like(hsv)
    for idx, choice in enumerate(choices):
        out = np.where((i == idx)[..., None], choice, out)
    return out


def augment_image(image: np.ndarray, rng: np.random.Generator,
                  config: AugmentationConfig | None = None):
    """One augmented copy plus the record of every random draw."""
    cfg = config or AugmentationConfig()
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        img = img[:, ::-1]

    area_frac = float(rng.uniform(*cfg.crop_fraction))
    scale = np.sqrt(area_frac)
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img = _bilinear_resize(img[top : top + ch, left : left + cw], h, w)

    sigma = float(rng.uniform(*cfg.blur_sigma))
    img = _gaussian_blur(img, sigma, cfg.blur_kernel)

    jitter = {}
    for prop in ("brightness", "contrast", "saturation", "hue"):
        jitter[prop] = float(rng.uniform(*cfg.jitter_magnitude))
    sign = lambda: 1.0 if rng.random() < 0.5 else -1.0
    img = np.clip(img * (1.0 + sign() * jitter["brightness"]), 0, 1)
    mean = img.mean()
    img = np.clip(mean + (img - mean) * (1.0 + sign() * jitter["contrast"]), 0, 1)
    hsv = _rgb_to_hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + sign() * jitter["saturation"]), 0, 1)
    hsv[..., 0] = (hsv[..., 0] + sign() * jitter["hue"]) % 1.0
    img = np.clip(_hsv_to_rgb(hsv), 0, 1)

    draw = AugmentationDraw(flipped=flipped, crop_fraction=area_frac,
                            blur_sigma=sigma, jitter=jitter)
    return img.astype(np.float32), draw


def augment_batch(image: np.ndarray, seed: int, config: AugmentationConfig | None = None):
    """Deterministic batch of augmented copies for an inversion job."""
    cfg = config or AugmentationConfig()
    rng = np.random.default_rng(seed)
    images, draws = [], []
    for _ in range(cfg.sample_count):
        out, draw = augment_image(image, rng, cfg)
        images.append(out)
        draws.append(draw)
    return images, draws
