"""Weight-space fusion of per-task encoders across epochs.

Each epoch every task trains its own clone of the previous fused weights.
The engine measures how far each clone moved (temporal deltas), how far the
first and last task of the epoch disagree (a bounded per-element ratio
distance), rescales its blend coefficients from the loss history, and fuses
everything back into a single encoder. A bounded snapshot ring provides the
moving-average readout.

All fusion arithmetic runs in float64 and is cast back to the storage dtype,
which keeps the single-task identity exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .params import ParameterSet, SnapshotRing

DELTA_MODES = ("absolute", "signed")

KNOWN_LAYER_KINDS = ("conv", "pool", "fc", "norm", "act", "upsample",
                     "flatten", "dropout", "input", "output")

# Fresh-run blend coefficients: reconstruction leads, the rest share evenly.
DEFAULT_ALPHA = {"r": 0.4, "s": 0.2, "c": 0.2, "j": 0.2}
DEFAULT_BETA = 5e-3
DEFAULT_M_MAX = 0.5


@dataclass(frozen=True)
class LayerPolicy:
    """Which encoder layers take part in fusion.

    Names may be module-level ("conv1", matching "conv1.weight" and
    "conv1.bias") or full parameter entries.
    """

    selected: frozenset[str]

    def covers(self, entry_name: str) -> bool:
        return entry_name in self.selected or entry_name.split(".", 1)[0] in self.selected

    def expand(self, entry_names) -> list[str]:
        return [n for n in entry_names if self.covers(n)]


@dataclass(frozen=True)
class DeltaSet:
    """Per-layer weight movement, either magnitudes or raw differences."""

    entries: dict[str, np.ndarray]
    mode: str

    def __post_init__(self):
        if self.mode not in DELTA_MODES:
            raise ValueError(f"unknown delta mode {self.mode!r}")
        if self.mode == "absolute":
            for name, arr in self.entries.items():
                if (arr < 0).any():
                    raise ValueError(f"absolute-mode delta {name!r} has negative entries")


@dataclass(frozen=True)
class EnsembleCoefficients:
    """Blend weights for the fusion step; rescaled as losses improve."""

    alpha: dict[str, float]
    beta: float
    m_max: float = DEFAULT_M_MAX

    def __post_init__(self):
        if any(a <= 0 for a in self.alpha.values()):
            raise ValueError("alpha values must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not (0.0 < self.m_max < 1.0):
            raise ValueError("m_max must lie in (0, 1)")


def default_coefficients(tasks, m_max: float = DEFAULT_M_MAX) -> EnsembleCoefficients:
    alpha = {}
    for k in tasks:
        if k not in DEFAULT_ALPHA:
            raise ValueError(f"no default coefficient for task {k!r}")
        alpha[k] = DEFAULT_ALPHA[k]
    return EnsembleCoefficients(alpha=alpha, beta=DEFAULT_BETA, m_max=m_max)


class LossHistory:
    """Per-epoch, per-task loss table with derived totals."""

    def __init__(self):
        self._by_epoch: dict[int, dict[str, float]] = {}

    def record(self, epoch: int, task: str, loss: float) -> None:
        self._by_epoch.setdefault(epoch, {})[task] = float(loss)

    def has(self, epoch: int, tasks) -> bool:
        row = self._by_epoch.get(epoch)
        return row is not None and all(k in row for k in tasks)

    def task_loss(self, epoch: int, task: str) -> float:
        try:
            return self._by_epoch[epoch][task]
        except KeyError:
            raise ValueError(f"no loss recorded for task {task!r} at epoch {epoch}") from None

    def total_loss(self, epoch: int) -> float:
        row = self._by_epoch.get(epoch)
        if not row:
            raise ValueError(f"no losses recorded at epoch {epoch}")
        return float(sum(row.values()))

    def epochs(self) -> list[int]:
        return sorted(self._by_epoch)


def _improvement_factor(current: float, previous: float, m_max: float) -> float:
    # Only improvements count; the drop is clamped so 1+m stays >= 1-m_max.
    m = min(0.0, current - previous)
    return max(m, -m_max)


def update_coefficients(c: EnsembleCoefficients, history: LossHistory,
                        epoch: int) -> EnsembleCoefficients:
    """Grow each coefficient by how much its loss fell between epoch-1 and epoch."""
    alpha = {}
    for task, a in c.alpha.items():
        m = _improvement_factor(history.task_loss(epoch, task),
                                history.task_loss(epoch - 1, task), c.m_max)
        alpha[task] = a / (1.0 + m)
    n = _improvement_factor(history.total_loss(epoch),
                            history.total_loss(epoch - 1), c.m_max)
    beta = c.beta / (1.0 + n)
    return EnsembleCoefficients(alpha=alpha, beta=beta, m_max=c.m_max)


def temporal_gradient(task_weights: ParameterSet, prev_weights: ParameterSet,
                      policy: LayerPolicy, mode: str = "absolute") -> DeltaSet:
    """Where and how far one task's training moved the selected layers."""
    if mode not in DELTA_MODES:
        raise ValueError(f"unknown delta mode {mode!r}")
    task_weights.require_aligned(prev_weights, context="temporal_gradient")
    entries = {}
    for name in policy.expand(task_weights.names()):
        d = task_weights.entries[name].astype(np.float64) \
            - prev_weights.entries[name].astype(np.float64)
        entries[name] = np.abs(d) if mode == "absolute" else d
    return DeltaSet(entries=entries, mode=mode)


def task_gradient(first_weights: ParameterSet, last_weights: ParameterSet,
                  policy: LayerPolicy) -> DeltaSet:
    """Per-element |a-b| / (|a|+|b|) between two tasks' weights; 0/0 is 0.

    Every element lands in [0,1], so the fusion contribution stays bounded.
    """
    first_weights.require_aligned(last_weights, context="task_gradient")
    entries = {}
    for name in policy.expand(first_weights.names()):
        a = first_weights.entries[name].astype(np.float64)
        b = last_weights.entries[name].astype(np.float64)
        num = np.abs(a - b)
        den = np.abs(a) + np.abs(b)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(den == 0.0, 0.0, num / den)
        entries[name] = ratio
    return DeltaSet(entries=entries, mode="absolute")


def ensemble_step(prev_weights: ParameterSet, deltas: dict[str, DeltaSet],
                  task_delta: DeltaSet, c: EnsembleCoefficients,
                  policy: LayerPolicy,
                  last_task_weights: ParameterSet | None = None) -> ParameterSet:
    """Fuse: selected layers get prev + sum_k alpha_k*delta_k + beta*task_delta.

    Layers outside the policy are copied from last_task_weights when given
    (the last-trained task keeps them), else from prev_weights.
    """
    if set(deltas) != set(c.alpha):
        raise ValueError(f"task sets differ: deltas {sorted(deltas)} vs "
                         f"coefficients {sorted(c.alpha)}")
    selected = policy.expand(prev_weights.names())
    for label, ds in list(deltas.items()) + [("task-delta", task_delta)]:
        if set(ds.entries) != set(selected):
            raise ValueError(f"delta set {label!r} does not cover exactly the "
                             f"policy layers")
    if last_task_weights is not None:
        prev_weights.require_aligned(last_task_weights, context="ensemble_step")

    out = {}
    for name, arr in prev_weights.entries.items():
        if name in task_delta.entries:
            acc = arr.astype(np.float64)
            for task, ds in deltas.items():
                acc = acc + c.alpha[task] * ds.entries[name]
            acc = acc + c.beta * task_delta.entries[name]
            out[name] = acc.astype(arr.dtype)
        else:
            src = last_task_weights if last_task_weights is not None else prev_weights
            out[name] = src.entries[name].copy()
    return ParameterSet(out, prev_weights.arch_id)


def moving_average(ring: SnapshotRing) -> ParameterSet:
    """Element-wise mean over whatever the ring currently holds."""
    if len(ring) == 0:
        raise ValueError("ring is empty")
    snaps = ring.snapshots()
    newest = snaps[-1]
    out = {}
    for name, arr in newest.entries.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for s in snaps:
            acc += s.entries[name].astype(np.float64)
        out[name] = (acc / len(snaps)).astype(arr.dtype)
    return ParameterSet(out, newest.arch_id)


def impact_trace(deltas: dict[str, DeltaSet]) -> dict[str, float]:
    """Mean absolute delta magnitude per task, over all selected layers."""
    out = {}
    for task, ds in deltas.items():
        if not ds.entries:
            raise ValueError(f"empty delta set for task {task!r}")
        total = sum(float(np.abs(a).sum()) for a in ds.entries.values())
        count = sum(a.size for a in ds.entries.values())
        out[task] = total / count
    return out


def select_tte_layers(arch_description) -> LayerPolicy:
    """Pick the convolution layers that sit immediately before a pooling layer."""
    names = []
    kinds = []
    for name, kind in arch_description:
        if kind not in KNOWN_LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r} for layer {name!r}")
        names.append(name)
        kinds.append(kind)
    selected = {names[i] for i in range(len(names) - 1)
                if kinds[i] == "conv" and kinds[i + 1] == "pool"}
    if not selected:
        warnings.warn("no conv layer precedes a pooling layer; fusion policy is empty",
                      stacklevel=2)
    return LayerPolicy(selected=frozenset(selected))
