"""Knowledge transfer from a frozen encoder into a separate classifier.

Two routes: soft-target distillation (a small adapter turns frozen encoder
latents into class distributions; a student matches them under a softened
cross-entropy) and flow transfer (channel-by-channel inner-product matrices
between consecutive feature maps, matched between teacher and student).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .archs import AdapterNetwork, Encoder

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TransferConfig:
    method: str = "soft-targets"
    temperature: float = 4.0
    fsp_pair_count: int = 5
    distill_weight: float = 1.0
    adapter_dims: tuple[int, ...] = (128, 256, 10)
    adapter_epochs: int = 5
    student_epochs: int = 5
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.method not in ("soft-targets", "fsp"):
            raise ValueError(f"unknown transfer method {self.method!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.distill_weight <= 0:
            raise ValueError("distill_weight must be positive")
        if self.adapter_epochs < 1 or self.student_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class FspMatrix:
    """Flow matrix between two feature maps; shape [channels1, channels2]."""

    values: np.ndarray
    source_layer_pair: tuple[str, str] = ("", "")


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def soft_target_probs(encoder: Encoder, adapter: AdapterNetwork, x: torch.Tensor) -> torch.Tensor:
    """Class distribution of the frozen encoder + adapter for a batch.

    The encoder runs without gradients, so its weights cannot drift no matter
    what trains on the output.
    """
    with torch.no_grad():
        latent = encoder(x)
    logits = adapter(latent.detach())
    return torch.softmax(logits, dim=1)


def soften(probs: torch.Tensor, temperature: float) -> torch.Tensor:
    """Raise a distribution to the 1/T power and renormalize."""
    return torch.softmax(torch.log(probs.clamp_min(LOG_FLOOR)) / temperature, dim=-1)


def distill_loss(teacher_probs, student_logits, temperature: float = 4.0):
    """Temperature-softened cross-entropy, scaled by temperature squared.

    At temperature 1 this is the plain cross-entropy between the teacher
    distribution and the student softmax.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = _to_tensor(teacher_probs)
    s = _to_tensor(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(t.shape)} vs "
                         f"student {tuple(s.shape)}")
    soft_teacher = soften(t, temperature)
    log_student = torch.log_softmax(s / temperature, dim=-1)
    out = -(temperature ** 2) * (soft_teacher * log_student).sum(dim=-1).mean()
    if isinstance(teacher_probs, torch.Tensor) or isinstance(student_logits, torch.Tensor):
        return out
    return float(out)


def softened_entropy(teacher_probs, temperature: float = 4.0):
    """The floor of distill_loss: entropy of the softened teacher, T^2-scaled."""
    t = _to_tensor(teacher_probs)
    q = soften(t, temperature)
    ent = -(q * torch.log(q.clamp_min(LOG_FLOOR))).sum(dim=-1).mean()
    out = (temperature ** 2) * ent
    if isinstance(teacher_probs, torch.Tensor):
        return out
    return float(out)


def fsp_matrix(f1, f2, layer_pair: tuple[str, str] = ("", "")):
    """Spatially averaged channel inner products between two maps.

    f1: [h, w, m], f2: [h, w, n] (same spatial extent) -> values [m, n] with
    values[i, j] = mean over positions of f1[..., i] * f2[..., j].
    Torch inputs return a raw tensor (for training); numpy returns FspMatrix.
    """
    a, b = _to_tensor(f1), _to_tensor(f2)
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("expected [h, w, channels] feature maps")
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"spatial mismatch: {tuple(a.shape[:2])} vs {tuple(b.shape[:2])}")
    h, w = a.shape[:2]
    g = torch.einsum("hwm,hwn->mn", a, b.to(a.dtype)) / float(h * w)
    if isinstance(f1, torch.Tensor) or isinstance(f2, torch.Tensor):
        return g
    return FspMatrix(values=g.numpy(), source_layer_pair=layer_pair)


def fsp_matrix_batch(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Per-sample flow matrices for batched channels-first maps [B,C,H,W]."""
    if f1.shape[-2:] != f2.shape[-2:]:
        raise ValueError(f"spatial mismatch: {tuple(f1.shape[-2:])} vs "
                         f"{tuple(f2.shape[-2:])}")
    h, w = f1.shape[-2:]
    return torch.einsum("bmhw,bnhw->bmn", f1, f2) / float(h * w)


def _values(m) -> torch.Tensor:
    if isinstance(m, FspMatrix):
        return _to_tensor(m.values)
    return _to_tensor(m)


def fsp_transfer_loss(source, target):
    """Mean over matrix pairs of the mean squared element difference."""
    if len(source) != len(target):
        raise ValueError(f"pair count mismatch: {len(source)} vs {len(target)}")
    if not source:
        raise ValueError("no matrix pairs")
    any_torch = any(isinstance(_unwrap(m), torch.Tensor) for m in list(source) + list(target))
    terms = []
    for i, (s, t) in enumerate(zip(source, target)):
        sv, tv = _values(s), _values(t)
        if sv.shape != tv.shape:
            raise ValueError(f"pair {i} shape mismatch: {tuple(sv.shape)} vs {tuple(tv.shape)}")
        d = sv - tv.to(sv.dtype)
        terms.append((d * d).mean())
    out = torch.stack(terms).mean()
    return out if any_torch else float(out)


def _unwrap(m):
    return m.values if isinstance(m, FspMatrix) else m


def align_spatial(f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Average-pool the spatially larger of two [B,C,H,W] maps onto the smaller."""
    h1, h2 = f1.shape[-1], f2.shape[-1]
    if h1 == h2:
        return f1, f2
    big, small = (f1, f2) if h1 > h2 else (f2, f1)
    factor = big.shape[-1] // small.shape[-1]
    if big.shape[-1] != factor * small.shape[-1]:
        raise ValueError(f"spatial sizes {h1} and {h2} have no integer pooling factor")
    pooled = torch.nn.functional.avg_pool2d(big, factor)
    return (pooled, f2) if h1 > h2 else (f1, pooled)


def channel_change_pairs(maps: list[torch.Tensor]) -> list[tuple[int, int]]:
    """Indices of consecutive maps whose channel counts differ ([B,C,H,W])."""
    pairs = []
    for i in range(len(maps) - 1):
        if maps[i].shape[1] != maps[i + 1].shape[1]:
            pairs.append((i, i + 1))
    return pairs


def flow_matrices(maps: list[torch.Tensor], pair_count: int) -> list[torch.Tensor]:
    """Per-sample flow matrices at every channel-count change, oldest first.

    Truncates (with a warning) when the network offers fewer change points
    than requested.
    """
    pairs = channel_change_pairs(maps)
    if len(pairs) > pair_count:
        pairs = pairs[:pair_count]
    elif len(pairs) < pair_count:
        warnings.warn(f"only {len(pairs)} channel-change pairs available, "
                      f"requested {pair_count}", stacklevel=2)
    out = []
    for i, j in pairs:
        a, b = align_spatial(maps[i], maps[j])
        out.append(fsp_matrix_batch(a, b))
    return out
