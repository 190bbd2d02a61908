"""Seeded synthetic image data: colored shapes on textured backgrounds.

Ten shape classes, one shape per image, with jittered position, size, color,
and background texture so the classes are learnable while leaving headroom
between good and bad encoders. Generation is per-image seeded, so a given
(seed, index) pair always yields the same pixels regardless of batch order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

SHAPE_NAMES = ("disk", "ring", "square", "frame", "diamond",
               "cross", "saltire", "hbar", "vbar", "triangle")


def _shape_mask(kind: int, size: int, cx: float, cy: float, s: float,
                thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r2 = dx * dx + dy * dy
    if kind == 0:  # disk
        return r2 <= s * s
    if kind == 1:  # ring
        inner = max(s - thickness, 1.0)
        return (r2 <= s * s) & (r2 >= inner * inner)
    if kind == 2:  # square
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == 3:  # frame
        outer = (np.abs(dx) <= s) & (np.abs(dy) <= s)
        inner_s = max(s - thickness, 1.0)
        inner = (np.abs(dx) <= inner_s) & (np.abs(dy) <= inner_s)
        return outer & ~inner
    if kind == 4:  # diamond
        return np.abs(dx) + np.abs(dy) <= s
    if kind == 5:  # cross
        return ((np.abs(dx) <= thickness) & (np.abs(dy) <= s)) \
            | ((np.abs(dy) <= thickness) & (np.abs(dx) <= s))
    if kind == 6:  # saltire (diagonal cross)
        near_diag = np.abs(np.abs(dx) - np.abs(dy)) <= thickness
        return near_diag & (np.maximum(np.abs(dx), np.abs(dy)) <= s)
    if kind == 7:  # horizontal bar
        return (np.abs(dy) <= thickness) & (np.abs(dx) <= s)
    if kind == 8:  # vertical bar
        return (np.abs(dx) <= thickness) & (np.abs(dy) <= s)
    if kind == 9:  # upward triangle
        inside_y = (dy >= -s) & (dy <= s)
        halfwidth = (dy + s) / 2.0
        return inside_y & (np.abs(dx) <= halfwidth)
    raise ValueError(f"unknown shape kind {kind}")


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, size=3)
    coarse = rng.normal(0.0, 0.18, size=(4, 4, 3))
    rep = size // 4
    texture = np.kron(coarse, np.ones((rep, rep, 1)))
    grain = rng.normal(0.0, 0.06, size=(size, size, 3))
    return np.clip(base[None, None, :] + texture + grain, 0.0, 1.0)


def _pick_contrasting_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    bg_mean = background.mean(axis=(0, 1))
    for _ in range(20):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - bg_mean).max() >= 0.35:
            return color
    return 1.0 - bg_mean  # fallback: exact complement


def _render_one(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    img = _texture(rng, size)
    jitter = 0.15 * size
    cx = size / 2.0 + rng.uniform(-jitter, jitter)
    cy = size / 2.0 + rng.uniform(-jitter, jitter)
    s = rng.uniform(0.22, 0.38) * size
    thickness = rng.uniform(0.08, 0.14) * size
    mask = _shape_mask(label, size, cx, cy, s, thickness)
    color = _pick_contrasting_color(rng, img)
    img[mask] = np.clip(color[None, :] + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3)),
                        0.0, 1.0)
    if rng.uniform() < 0.3:  # occasional occluding stripe
        row = rng.integers(0, size)
        width = int(rng.integers(1, 3))
        stripe_color = rng.uniform(0.0, 1.0, size=3)
        if rng.uniform() < 0.5:
            img[row:row + width, :, :] = stripe_color
        else:
            img[:, row:row + width, :] = stripe_color
    return img.astype(np.float32)


def synthetic_shapes(n: int, size: int = 32, classes: int = 10,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Generate n images [n, size, size, 3] in [0,1] and labels [n]."""
    if not (1 <= classes <= len(SHAPE_NAMES)):
        raise ValueError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    if size % 4:
        raise ValueError("size must be divisible by 4")
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        label = i % classes  # balanced classes by construction
        images[i] = _render_one(rng, label, size)
        labels[i] = label
    return images, labels


def load_image_dir(path, size: int = 32) -> np.ndarray:
    """Decode every image under a directory to [N, size, size, 3] in [0,1]."""
    from skimage import io as skio
    from skimage.transform import resize

    files = sorted(p for p in Path(path).iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise ValueError(f"no images under {path}")
    out = np.empty((len(files), size, size, 3), dtype=np.float32)
    for i, f in enumerate(files):
        img = skio.imread(f)
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        img = img[..., :3].astype(np.float64)
        if img.max() > 1.0:
            img = img / 255.0
        out[i] = resize(img, (size, size, 3), anti_aliasing=True)
    return np.clip(out, 0.0, 1.0)
