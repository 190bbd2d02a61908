"""Pretext target generation and the per-task training losses.

Four self-supervised tasks share one encoder: image reconstruction ("r"),
reconstruction through a soft region-map bottleneck ("s"), chroma prediction
from grayscale ("c"), and patch-permutation classification ("j").

Images are [H, W, 3] float arrays in [0, 1], channels last. Losses accept
numpy or torch; torch inputs keep autograd.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from skimage import color as skcolor

from .archs import TaskHeader, encoder_from_parameter_set, to_chw, to_hwc
from .params import ParameterSet

TASK_IDS = ("r", "s", "c", "j")

# Chroma planes of the Lab gamut for sRGB inputs stay inside +/-110.
LIGHTNESS_SCALE = 100.0
CHROMA_SCALE = 110.0

LOG_FLOOR = 1e-12
SMOOTHING = 1e-8


@dataclass(frozen=True)
class PermutationSet:
    """Distinct patch orderings; entry 0 is always the identity."""

    grid: tuple[int, int]
    permutations: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        cells = self.grid[0] * self.grid[1]
        ident = tuple(range(cells))
        if not self.permutations or self.permutations[0] != ident:
            raise ValueError("entry 0 must be the identity permutation")
        if len(set(self.permutations)) != len(self.permutations):
            raise ValueError("permutations must be distinct")
        for p in self.permutations:
            if sorted(p) != list(range(cells)):
                raise ValueError(f"not a bijection on {cells} cells: {p}")

    @property
    def count(self) -> int:
        return len(self.permutations)


@dataclass(frozen=True)
class PretextSample:
    """Model input, training target, and the task that paired them."""

    x: np.ndarray
    y: np.ndarray | int
    task: str


def _hamming_to(pool: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return (pool != perm[None, :]).sum(axis=1)


def build_permutation_set(grid: tuple[int, int], count: int, seed: int) -> PermutationSet:
    """Pick `count` orderings, greedily maximizing the minimum pairwise
    Hamming distance, starting from the identity. Deterministic per seed."""
    rows, cols = grid
    cells = rows * cols
    total = math.factorial(cells)
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > total:
        raise ValueError(f"count {count} exceeds {cells}! = {total}")

    if total <= math.factorial(9):
        pool = np.array(list(itertools.permutations(range(cells))), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        draw = max(1000, 50 * count)
        cand = rng.permuted(np.tile(np.arange(cells, dtype=np.int64), (draw, 1)), axis=1)
        cand = np.unique(cand, axis=0)
        ident = np.arange(cells, dtype=np.int64)
        if not (cand == ident).all(axis=1).any():
            cand = np.vstack([ident[None, :], cand])
        pool = cand

    ident_idx = int(np.nonzero((pool == np.arange(cells)).all(axis=1))[0][0])
    chosen = [ident_idx]
    min_dist = _hamming_to(pool, pool[ident_idx]).astype(np.int64)
    min_dist[ident_idx] = -1
    while len(chosen) < count:
        nxt = int(np.argmax(min_dist))  # first index wins ties
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, _hamming_to(pool, pool[nxt]))
        min_dist[nxt] = -1
    perms = tuple(tuple(int(v) for v in pool[i]) for i in chosen)
    return PermutationSet(grid=grid, permutations=perms)


def split_patches(image: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """[H, W, 3] -> [rows*cols, H/rows, W/cols, 3], row-major cell order."""
    rows, cols = grid
    h, w = image.shape[:2]
    if h % rows or w % cols:
        raise ValueError(f"image {h}x{w} not divisible by grid {grid}")
    ph, pw = h // rows, w // cols
    patches = [image[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
               for r in range(rows) for c in range(cols)]
    return np.stack(patches)


def join_patches(patches: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Inverse of split_patches, bit-exact."""
    rows, cols = grid
    strips = [np.concatenate(list(patches[r * cols:(r + 1) * cols]), axis=1)
              for r in range(rows)]
    return np.concatenate(strips, axis=0)


def invert_permutation(perm: tuple[int, ...]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def grayscale_chroma_pair(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an RGB image into (lightness replicated to 3 planes, chroma).

    Lightness is scaled to [0,1]; the two chroma planes to [-1,1].
    """
    lab = skcolor.rgb2lab(image)
    light = (lab[..., 0:1] / LIGHTNESS_SCALE).astype(np.float32)
    x = np.repeat(light, 3, axis=-1)
    y = (lab[..., 1:3] / CHROMA_SCALE).astype(np.float32)
    return x, y


def chroma_to_rgb(gray3: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """Rebuild RGB from the grayscale_chroma_pair representation."""
    lab = np.concatenate([
        gray3[..., 0:1].astype(np.float64) * LIGHTNESS_SCALE,
        chroma.astype(np.float64) * CHROMA_SCALE,
    ], axis=-1)
    return skcolor.lab2rgb(lab).astype(np.float32)


def make_pretext(image: np.ndarray, task: str, perms: PermutationSet | None = None,
                 rng_seed: int = 0) -> PretextSample:
    """Build one (input, target) pair for a task. Pure given its arguments."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected [H,W,3] image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("non-finite pixel values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values out of [0,1]")

    if task in ("r", "s"):
        return PretextSample(x=img.copy(), y=img.copy(), task=task)
    if task == "c":
        x, y = grayscale_chroma_pair(img)
        return PretextSample(x=x, y=y, task=task)
    if task == "j":
        if perms is None:
            raise ValueError("task 'j' needs a PermutationSet")
        rng = np.random.default_rng(rng_seed)
        label = int(rng.integers(perms.count))
        patches = split_patches(img, perms.grid)
        order = np.asarray(perms.permutations[label])
        return PretextSample(x=patches[order].copy(), y=label, task=task)
    raise ValueError(f"unknown task {task!r}")


def forward_task(encoder_weights: ParameterSet, header: TaskHeader, x):
    """Run encoder + task head on a batch; returns channels-last predictions.

    r, s -> [B,H,W,3] in (0,1); c -> [B,H,W,2] in (-1,1); j -> [B, classes]
    probabilities. A single sample (no batch axis) comes back without one.
    """
    if encoder_weights.arch_id != header.expects_arch:
        raise ValueError(f"encoder arch {encoder_weights.arch_id!r} does not match "
                         f"header expectation {header.expects_arch!r}")
    encoder = encoder_from_parameter_set(encoder_weights)
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == (4 if header.task == "j" else 3)
    if single:
        arr = arr[None]
    with torch.no_grad():
        if header.task == "j":
            b, p = arr.shape[:2]
            flat = to_chw(arr.reshape((b * p,) + arr.shape[2:]))
            z = encoder(flat)
            out = header.module(z.reshape((b, p) + z.shape[1:]))
        else:
            z = encoder(to_chw(arr))
            out = to_hwc(header.module(z))
    result = out.numpy()
    return result[0] if single else result


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    d = pred - target
    return (d * d).mean()


def pixel_kld(pred: torch.Tensor, target: torch.Tensor,
              eps: float = SMOOTHING) -> torch.Tensor:
    """Mean per-element binary KLD treating each value as a Bernoulli rate."""
    p, t = pred, target
    term = p * torch.log((p + eps) / (t + eps)) \
        + (1.0 - p) * torch.log((1.0 - p + eps) / (1.0 - t + eps))
    return term.mean()


def pixel_entropy_term(pred: torch.Tensor, eps: float = SMOOTHING) -> torch.Tensor:
    """Mean of -pred*log(pred); added to the loss it penalizes hedged pixels."""
    return (-pred * torch.log(pred + eps)).mean()


def task_loss(task: str, pred, target, entropy_weight: float = 1e-3,
              kld_order: str = "pred-target"):
    """Per-task training loss.

    r: MSE plus binary KLD plus entropy_weight times the prediction entropy.
    s, c: MSE. j: cross-entropy of predicted probabilities against the label.
    """
    if task not in TASK_IDS:
        raise ValueError(f"unknown task {task!r}")
    p = _to_tensor(pred)
    if not torch.isfinite(p.detach()).all():
        raise ValueError("non-finite predictions")

    if task == "j":
        labels = _to_tensor(target).long().reshape(-1)
        probs = p.reshape(labels.shape[0], -1)
        picked = probs[torch.arange(labels.shape[0]), labels]
        out = -torch.log(picked.clamp_min(LOG_FLOOR)).mean()
    else:
        t = _to_tensor(target).to(p.dtype)
        if p.shape != t.shape:
            raise ValueError(f"prediction shape {tuple(p.shape)} does not match "
                             f"target shape {tuple(t.shape)}")
        if task == "r":
            if entropy_weight <= 0:
                raise ValueError("entropy_weight must be positive")
            if kld_order == "pred-target":
                kld = pixel_kld(p, t)
            elif kld_order == "target-pred":
                kld = pixel_kld(t, p)
            else:
                raise ValueError(f"unknown kld_order {kld_order!r}")
            out = _mse(p, t) + kld + entropy_weight * pixel_entropy_term(p)
        else:
            out = _mse(p, t)

    if isinstance(pred, torch.Tensor):
        return out
    return float(out)


def total_loss(per_task, enabled=None) -> float:
    """Sum of per-task losses over the enabled task set."""
    tasks = tuple(enabled) if enabled is not None else tuple(per_task)
    missing = [k for k in tasks if k not in per_task]
    if missing:
        raise ValueError(f"missing enabled tasks: {missing}")
    return float(sum(float(per_task[k]) for k in tasks))
