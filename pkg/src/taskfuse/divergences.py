"""Distribution distances over channel profiles, and the latent regularizer.

Feature maps are reduced to one probability vector per sample (spatial mean
per channel, then tempered softmax); the regularizer penalizes the distance
between that vector and a reference prior. All distances work on smoothed
entries so zero-mass channels stay finite, and all logs are natural.

Functions accept numpy arrays or torch tensors. Torch in, torch out (with
autograd intact); numpy in, plain numpy/float out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_EPSILON = 1e-8

VALID_KINDS = (
    "kld",
    "reverse-kld",
    "jsd",
    "hellinger",
    "jeffrey",
    "chi-squared",
    "wasserstein",
)

SYMMETRIC_KINDS = ("jsd", "hellinger", "jeffrey", "wasserstein")


@dataclass(frozen=True)
class DivergenceKind:
    """A metric choice plus its smoothing constant."""

    name: str
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.name not in VALID_KINDS:
            raise ValueError(f"unknown divergence kind {self.name!r}; "
                             f"expected one of {', '.join(VALID_KINDS)}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class TransformFilterConfig:
    """How feature maps become probability vectors."""

    pooling: str = "uniform-spatial-mean"
    normalization: str = "softmax"
    temperature: float = 1.0

    def __post_init__(self):
        if self.pooling != "uniform-spatial-mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.normalization != "softmax":
            raise ValueError(f"unsupported normalization {self.normalization!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _as_kind(kind) -> DivergenceKind:
    if isinstance(kind, DivergenceKind):
        return kind
    return DivergenceKind(str(kind))


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


# Core formulas. Each takes [..., C] mass tensors and reduces the last axis,
# so the same code serves single vectors and per-sample batches.

def _kld(p, q, eps):
    return (p * torch.log((p + eps) / (q + eps))).sum(dim=-1)


def _reverse_kld(p, q, eps):
    return _kld(q, p, eps)


def _jsd(p, q, eps):
    m = 0.5 * (p + q)
    return 0.5 * _kld(p, m, eps) + 0.5 * _kld(q, m, eps)


def _hellinger(p, q, eps):
    diff = torch.sqrt(p + eps) - torch.sqrt(q + eps)
    return torch.sqrt(0.5 * (diff * diff).sum(dim=-1))


def _jeffrey(p, q, eps):
    return _kld(p, q, eps) + _kld(q, p, eps)


def _chi_squared(p, q, eps):
    diff = p - q
    return (diff * diff / (q + eps)).sum(dim=-1)


def _wasserstein(p, q, eps):
    # 1-D transport over ordered indices with unit ground distance.
    return torch.cumsum(p - q, dim=-1).abs().sum(dim=-1)


_REGISTRY = {
    "kld": _kld,
    "reverse-kld": _reverse_kld,
    "jsd": _jsd,
    "hellinger": _hellinger,
    "jeffrey": _jeffrey,
    "chi-squared": _chi_squared,
    "wasserstein": _wasserstein,
}


def divergence_kinds() -> tuple[str, ...]:
    return VALID_KINDS


def require_distribution(v, name: str = "input", tol: float = 1e-6) -> None:
    """Check non-negativity and unit mass; raises ValueError otherwise."""
    t = _to_tensor(v).detach()
    if t.ndim != 1:
        raise ValueError(f"{name} must be a 1-D probability vector, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    if (t < 0).any():
        raise ValueError(f"{name} has negative entries")
    total = float(t.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} sums to {total:.8f}, expected 1 within {tol}")


def divergence(kind, p, q):
    """Distance from p to q under the named metric. Zero iff p == q."""
    k = _as_kind(kind)
    tp, tq = _to_tensor(p), _to_tensor(q)
    if tp.shape != tq.shape:
        raise ValueError(f"dimension mismatch: {tuple(tp.shape)} vs {tuple(tq.shape)}")
    require_distribution(tp, "p")
    require_distribution(tq, "q")
    out = _REGISTRY[k.name](tp, tq, k.epsilon)
    if isinstance(p, torch.Tensor) or isinstance(q, torch.Tensor):
        return out
    return float(out)


def normalize_features(z, cfg: TransformFilterConfig = TransformFilterConfig()):
    """Collapse feature maps to channel distributions.

    Accepts [H, W, C] for one map (returns [C]) or [B, H, W, C] for a batch
    (returns [B, C]). Channels are last in both layouts.
    """
    t = _to_tensor(z)
    if t.ndim not in (3, 4):
        raise ValueError(f"expected [H,W,C] or [B,H,W,C], got shape {tuple(t.shape)}")
    if t.shape[-3] == 0 or t.shape[-2] == 0:
        raise ValueError("empty spatial extent")
    if not torch.isfinite(t.detach()).all():
        raise ValueError("non-finite values in feature maps")
    pooled = t.mean(dim=(-3, -2))
    out = torch.softmax(pooled / cfg.temperature, dim=-1)
    if isinstance(z, torch.Tensor):
        return out
    return out.numpy()


def prior_divergence(z, prior, kind="kld",
                     cfg: TransformFilterConfig = TransformFilterConfig()):
    """Distance between the channel profile of z and a reference prior.

    Batched inputs give the mean over samples. Differentiable in z when z is
    a torch tensor.
    """
    k = _as_kind(kind)
    t = _to_tensor(z)
    tp = _to_tensor(prior).to(t.dtype)
    if tp.ndim != 1 or tp.shape[0] != t.shape[-1]:
        raise ValueError(f"prior length {tuple(tp.shape)} does not match "
                         f"channel count {t.shape[-1]}")
    require_distribution(tp, "prior")
    v = normalize_features(t, cfg)
    out = _REGISTRY[k.name](v, tp, k.epsilon)
    if out.ndim > 0:
        out = out.mean()
    if isinstance(z, torch.Tensor):
        return out
    return float(out)


def uniform_prior(channels: int, like=None):
    """Maximum-entropy reference distribution over channel indices."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if isinstance(like, torch.Tensor):
        return torch.full((channels,), 1.0 / channels, dtype=like.dtype)
    return np.full(channels, 1.0 / channels)
