"""Named weight sets, bounded snapshot history, and checkpoint I/O.

A checkpoint is a directory holding a YAML ``manifest`` plus one raw binary
blob per tensor (little-endian float32/float64, row-major). The manifest is
written last so a crashed writer never leaves a loadable-looking snapshot.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Raised for any snapshot save/load failure."""


class AlignmentError(ValueError):
    """Raised when two parameter sets disagree on arch, names, or shapes."""


@dataclass(frozen=True)
class ParameterSet:
    """Ordered map of layer name -> weight array, tagged by architecture.

    Treated as an immutable value after construction: operations that
    modify weights return a new instance.
    """

    entries: dict[str, np.ndarray]
    arch_id: str

    def __post_init__(self):
        for name, arr in self.entries.items():
            if not isinstance(arr, np.ndarray):
                raise TypeError(f"entry {name!r} is not an ndarray")

    def names(self) -> list[str]:
        return list(self.entries)

    def aligned_with(self, other: "ParameterSet") -> bool:
        """Same arch-id, same name set, same per-name shapes."""
        if self.arch_id != other.arch_id:
            return False
        if set(self.entries) != set(other.entries):
            return False
        return all(self.entries[n].shape == other.entries[n].shape for n in self.entries)

    def require_aligned(self, other: "ParameterSet", context: str = "") -> None:
        if not self.aligned_with(other):
            where = f" in {context}" if context else ""
            raise AlignmentError(f"parameter sets are not aligned{where} "
                                 f"(arch {self.arch_id!r} vs {other.arch_id!r})")

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            {n: np.ascontiguousarray(a, dtype=dtype) for n, a in self.entries.items()},
            self.arch_id,
        )

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: a.copy() for n, a in self.entries.items()}, self.arch_id)

    def element_count(self) -> int:
        return sum(a.size for a in self.entries.values())

    def allclose(self, other: "ParameterSet", atol: float = 0.0) -> bool:
        self.require_aligned(other)
        return all(
            np.allclose(self.entries[n], other.entries[n], rtol=0.0, atol=atol)
            for n in self.entries
        )

    def equal_bits(self, other: "ParameterSet") -> bool:
        """Bit-exact equality of every entry (NaNs compare equal)."""
        self.require_aligned(other)
        return all(
            np.array_equal(
                self.entries[n].view(np.uint8), other.entries[n].view(np.uint8)
            )
            for n in self.entries
        )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class SnapshotMeta:
    """Bookkeeping attached to a saved snapshot."""

    epoch: int
    task_order: list[str]
    seed: int
    created_at: str = field(default_factory=_utc_now)

    def __post_init__(self):
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")
        if not self.task_order:
            raise ValueError("task_order must be non-empty")


class SnapshotRing:
    """Bounded history of the most recent aligned snapshots, newest last."""

    def __init__(self, capacity: int = 5):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[tuple[int, ParameterSet]] = []

    def __len__(self) -> int:
        return len(self.items)

    def epochs(self) -> list[int]:
        return [e for e, _ in self.items]

    def snapshots(self) -> list[ParameterSet]:
        return [s for _, s in self.items]

    def newest(self) -> tuple[int, ParameterSet]:
        if not self.items:
            raise ValueError("ring is empty")
        return self.items[-1]

    def push(self, epoch: int, snapshot: ParameterSet) -> "SnapshotRing":
        """Append (epoch, snapshot); evict the oldest beyond capacity.

        Epochs must be strictly increasing and all snapshots pairwise
        aligned with what the ring already holds.
        """
        if self.items:
            last_epoch, last_snap = self.items[-1]
            if epoch <= last_epoch:
                raise ValueError(f"epoch {epoch} not greater than newest epoch {last_epoch}")
            snapshot.require_aligned(last_snap, context="ring push")
        self.items.append((epoch, snapshot))
        if len(self.items) > self.capacity:
            del self.items[0]
        return self


def _blob_filename(layer_name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.\-]", "_", layer_name) + ".bin"


def _validate_entries(params: ParameterSet) -> None:
    if not params.entries:
        raise CheckpointError("no entries: refusing to save an empty parameter set")
    for name, arr in params.entries.items():
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"entry {name!r} contains non-finite values")


def save_snapshot(params: ParameterSet, meta: SnapshotMeta, directory, name: str | None = None) -> str:
    """Write ``params`` + ``meta`` under ``directory`` and return the snapshot id.

    The id doubles as the subdirectory name; by default it is derived from
    the epoch tag. Saving twice under the same id is an error.
    """
    _validate_entries(params)
    snap_id = name if name is not None else f"ep{meta.epoch:05d}"
    root = Path(directory) / snap_id
    if root.exists():
        raise CheckpointError(f"snapshot {snap_id!r} already exists under {directory}")
    tensors_dir = root / "tensors"
    try:
        tensors_dir.mkdir(parents=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create snapshot dir {root}: {exc}") from exc

    tensor_records: dict[str, dict] = {}
    seen_files: dict[str, str] = {}
    for layer, arr in params.entries.items():
        fname = _blob_filename(layer)
        if fname in seen_files:
            raise CheckpointError(
                f"blob filename collision between {seen_files[fname]!r} and {layer!r}")
        seen_files[fname] = layer
        dtype_name = "float32" if arr.dtype == np.float32 else "float64"
        blob = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[dtype_name]).tobytes(order="C")
        try:
            (tensors_dir / fname).write_bytes(blob)
        except OSError as exc:
            raise CheckpointError(f"failed writing {tensors_dir / fname}: {exc}") from exc
        tensor_records[layer] = {
            "file": f"tensors/{fname}",
            "shape": [int(s) for s in arr.shape],
            "dtype": dtype_name,
            "bytes": len(blob),
        }

    manifest = {
        "format_version": FORMAT_VERSION,
        "arch_id": params.arch_id,
        "epoch": meta.epoch,
        "seed": meta.seed,
        "task_order": list(meta.task_order),
        "created_at": meta.created_at,
        "tensors": tensor_records,
    }
    try:
        (root / "manifest").write_text(yaml.safe_dump(manifest, sort_keys=True))
    except OSError as exc:
        raise CheckpointError(f"failed writing manifest under {root}: {exc}") from exc
    return snap_id


def load_snapshot(snapshot_id: str, directory) -> tuple[ParameterSet, SnapshotMeta]:
    """Read back exactly what :func:`save_snapshot` wrote (bit-exact)."""
    root = Path(directory) / snapshot_id
    manifest_path = root / "manifest"
    if not manifest_path.is_file():
        raise CheckpointError(f"snapshot {snapshot_id!r} not found under {directory}")
    manifest = yaml.safe_load(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported manifest format_version in {manifest_path}")

    entries: dict[str, np.ndarray] = {}
    for layer, rec in manifest["tensors"].items():
        blob_path = root / rec["file"]
        try:
            blob = blob_path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"missing tensor blob {blob_path}: {exc}") from exc
        if len(blob) != rec["bytes"]:
            raise CheckpointError(
                f"corrupt blob for {layer!r}: expected {rec['bytes']} bytes, "
                f"found {len(blob)}")
        dtype = _DTYPE_CODES[rec["dtype"]]
        shape = tuple(rec["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        if len(blob) != expected:
            raise CheckpointError(f"manifest/blob shape mismatch for {layer!r}")
        entries[layer] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()

    params = ParameterSet(entries, manifest["arch_id"])
    meta = SnapshotMeta(
        epoch=manifest["epoch"],
        task_order=list(manifest["task_order"]),
        seed=manifest["seed"],
        created_at=manifest["created_at"],
    )
    return params, meta


def list_snapshots(directory) -> list[str]:
    """Snapshot ids under a checkpoint directory, sorted."""
    root = Path(directory)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "manifest").is_file())


@dataclass(frozen=True)
class LossRecord:
    """One logged training step: per-task loss plus the blend coefficients."""

    epoch: int
    task: str
    loss: float
    total_loss: float
    alpha: float
    beta: float


class LossLedger:
    """Append-only loss log, one JSON record per line."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, rec: LossRecord) -> None:
        line = json.dumps(
            {
                "epoch": rec.epoch,
                "task": rec.task,
                "loss": rec.loss,
                "total_loss": rec.total_loss,
                "alpha": rec.alpha,
                "beta": rec.beta,
            },
            sort_keys=True,
        )
        with self.path.open("a") as fh:
            fh.write(line + "\n")

    def records(self) -> list[LossRecord]:
        if not self.path.is_file():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(LossRecord(
                epoch=d["epoch"], task=d["task"], loss=d["loss"],
                total_loss=d["total_loss"], alpha=d["alpha"], beta=d["beta"]))
        return out

    def task_series(self, task: str) -> list[LossRecord]:
        return [r for r in self.records() if r.task == task]
