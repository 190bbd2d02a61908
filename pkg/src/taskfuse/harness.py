"""Pipeline orchestration: pretrain, transfer, evaluate, plot.

Every random choice is drawn from a stream keyed by (seed, purpose, ...) so
a config+seed pair fully determines every artifact. Task branches within an
epoch are independent given the previous fused weights; fusion happens after
all branches finish.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archs import (AdapterNetwork, Encoder, EncoderConfig, TargetNetwork, TaskHeader,
                    encoder_from_parameter_set, init_parameters, load_parameter_set,
                    make_header, parameter_set, to_chw)
from .config import ExperimentConfig, run_dir_name, save_config
from .data import load_image_dir, synthetic_shapes
from .divergences import (DivergenceKind, TransformFilterConfig, prior_divergence,
                          uniform_prior)
from .evalsuite import ClusterReport, cluster_metrics, dec_fit, linear_probe
from .params import (CheckpointError, LossLedger, LossRecord, ParameterSet,
                     SnapshotMeta, SnapshotRing, load_snapshot, save_snapshot)
from .pretext import (PermutationSet, build_permutation_set, grayscale_chroma_pair,
                      split_patches, task_loss)
from .transfer import (distill_loss, flow_matrices, fsp_transfer_loss,
                       soft_target_probs)
from .tte import (LossHistory, default_coefficients, ensemble_step, impact_trace,
                  moving_average, select_tte_layers, task_gradient,
                  temporal_gradient, update_coefficients, LayerPolicy)


def seed_int(*parts) -> int:
    """Stable 63-bit integer from a tuple of seed-stream tags."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def seed_stream(*parts) -> np.random.Generator:
    return np.random.default_rng(seed_int(*parts))


@dataclass
class RunArtifacts:
    """Everything a pipeline stage wrote, by path or checkpoint id."""

    run_dir: Path
    checkpoint_dir: Path
    checkpoint_ids: list[str] = field(default_factory=list)
    ledger_path: Path | None = None
    impact_path: Path | None = None
    fused_id: str | None = None
    head_ids: dict[str, str] = field(default_factory=dict)
    report_paths: dict[str, Path] = field(default_factory=dict)


def prepare_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray | None]:
    if cfg.data.kind == "synthetic":
        return synthetic_shapes(cfg.data.n_images, cfg.data.image_size,
                                cfg.data.classes, cfg.seed)
    images = load_image_dir(cfg.data.path, cfg.data.image_size)
    return images, None


def _ensure_run_dir(cfg: ExperimentConfig, overwrite: bool) -> Path:
    run_dir = Path(cfg.out_root) / run_dir_name(cfg)
    if run_dir.exists():
        if not overwrite:
            raise CheckpointError(f"run directory {run_dir} already exists "
                                  f"(pass overwrite to replace it)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    return run_dir


def _split_patch_batch(images: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """[N,H,W,3] -> [N, rows*cols, ph, pw, 3] in row-major cell order."""
    n, h, w, c = images.shape
    rows, cols = grid
    ph, pw = h // rows, w // cols
    out = images.reshape(n, rows, ph, cols, pw, c).transpose(0, 1, 3, 2, 4, 5)
    return out.reshape(n, rows * cols, ph, pw, c)


class _PretextBank:
    """Per-task model inputs/targets, precomputed once per run."""

    def __init__(self, cfg: ExperimentConfig, images: np.ndarray,
                 perms: PermutationSet | None):
        self.images = images
        self.perms = perms
        self.gray = None
        self.chroma = None
        self.patches = None
        if "c" in cfg.tasks:
            self.gray, self.chroma = grayscale_chroma_pair(images)
        if "j" in cfg.tasks:
            if perms is None:
                raise ValueError("jigsaw enabled but no permutation set built")
            self.patches = _split_patch_batch(images, perms.grid)
            self.perm_rows = np.asarray(perms.permutations, dtype=np.int64)

    def batch(self, task: str, idx: np.ndarray, jig_labels: np.ndarray | None):
        if task in ("r", "s"):
            x = to_chw(self.images[idx])
            return x, x
        if task == "c":
            return to_chw(self.gray[idx]), to_chw(self.chroma[idx])
        if task == "j":
            lbl = jig_labels[idx]
            scrambled = self.patches[idx[:, None], self.perm_rows[lbl]]
            return scrambled, torch.as_tensor(lbl)
        raise ValueError(f"unknown task {task!r}")


def _forward_branch(encoder: Encoder, header: TaskHeader, task: str, x):
    """Returns (prediction, latent) with autograd intact."""
    if task == "j":
        b, p = x.shape[:2]
        flat = to_chw(x.reshape((b * p,) + x.shape[2:]))
        z = encoder(flat)
        pred = header.module(z.reshape((b, p) + z.shape[1:]))
        return pred, z
    z = encoder(x)
    return header.module(z), z


def _latent_penalty(z: torch.Tensor, prior: torch.Tensor, kind: DivergenceKind,
                    tf_cfg: TransformFilterConfig) -> torch.Tensor:
    return prior_divergence(z.movedim(1, -1), prior, kind, tf_cfg)


def _branch_train(cfg: ExperimentConfig, enc_cfg: EncoderConfig,
                  start_weights: ParameterSet, header: TaskHeader, task: str,
                  epoch: int, bank: _PretextBank) -> tuple[ParameterSet, float]:
    """One full pass of one task over the data; returns (weights, mean task loss)."""
    encoder = Encoder(enc_cfg)
    load_parameter_set(encoder, start_weights)
    opt = torch.optim.SGD(list(encoder.parameters()) + list(header.module.parameters()),
                          lr=cfg.learning_rate, momentum=cfg.momentum)

    reg = cfg.regularizer
    use_reg = reg.scale > 0
    kind = DivergenceKind(reg.kind, reg.epsilon)
    tf_cfg = TransformFilterConfig(temperature=reg.temperature)
    prior = torch.as_tensor(uniform_prior(enc_cfg.latent_channels), dtype=torch.float32)

    n = len(bank.images)
    order = seed_stream(cfg.seed, "order", epoch, task).permutation(n)
    jig_labels = None
    if task == "j":
        jig_labels = seed_stream(cfg.seed, "jigsaw-draw", epoch).integers(
            bank.perms.count, size=n)

    loss_sum, batches = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x, y = bank.batch(task, idx, jig_labels)
        pred, latent = _forward_branch(encoder, header, task, x)
        branch_loss = task_loss(task, pred, y, cfg.entropy_weight)
        loss_sum += float(branch_loss.detach())
        batches += 1
        if use_reg:
            branch_loss = branch_loss + reg.scale * _latent_penalty(
                latent, prior, kind, tf_cfg)
        opt.zero_grad()
        branch_loss.backward()
        opt.step()
    return parameter_set(encoder, enc_cfg.arch_id), loss_sum / batches


def _mean_weights(sets: list[ParameterSet]) -> ParameterSet:
    first = sets[0]
    out = {}
    for name, arr in first.entries.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for s in sets:
            acc += s.entries[name].astype(np.float64)
        out[name] = (acc / len(sets)).astype(arr.dtype)
    return ParameterSet(out, first.arch_id)


def _resolve_policy(cfg: ExperimentConfig, encoder: Encoder) -> LayerPolicy:
    if cfg.tte.layers is not None:
        return LayerPolicy(selected=frozenset(cfg.tte.layers))
    return select_tte_layers(encoder.layer_sequence())


def run_pretrain(cfg: ExperimentConfig, overwrite: bool = False) -> RunArtifacts:
    """Multi-task pretraining with per-epoch branch-and-merge fusion."""
    torch.set_num_threads(1)
    run_dir = _ensure_run_dir(cfg, overwrite)
    ckpt_dir = run_dir / "checkpoints"
    save_config(cfg, run_dir / "config.yaml")

    images, _ = prepare_data(cfg)
    enc_cfg = EncoderConfig(widths=cfg.encoder_widths)
    encoder = Encoder(enc_cfg)
    init_parameters(encoder, seed_int(cfg.seed, "init", "encoder"))
    current = parameter_set(encoder, enc_cfg.arch_id)

    perms = None
    if "j" in cfg.tasks:
        perms = build_permutation_set(cfg.jigsaw.grid, cfg.jigsaw.count,
                                      cfg.jigsaw.seed)
    headers: dict[str, TaskHeader] = {}
    for k in cfg.tasks:
        header = make_header(k, enc_cfg, cfg.data.image_size, cfg.region_classes,
                             cfg.jigsaw.grid, cfg.jigsaw.count)
        init_parameters(header.module, seed_int(cfg.seed, "init", "head", k))
        headers[k] = header
    bank = _PretextBank(cfg, images, perms)

    fusion = cfg.tte.fusion if cfg.tte.enabled else "none"
    policy = _resolve_policy(cfg, encoder)
    ring = SnapshotRing(cfg.tte.window)
    ring.push(0, current)
    artifacts = RunArtifacts(run_dir=run_dir, checkpoint_dir=ckpt_dir)
    meta0 = SnapshotMeta(epoch=0, task_order=list(cfg.tasks), seed=cfg.seed)
    artifacts.checkpoint_ids.append(save_snapshot(current, meta0, ckpt_dir))

    ledger = LossLedger(run_dir / "ledger.jsonl")
    artifacts.ledger_path = ledger.path
    history = LossHistory()
    coeffs = default_coefficients(cfg.tasks, cfg.tte.m_max)
    lineages = {k: current for k in cfg.tasks}
    impact_rows: list[tuple[int, str, float]] = []
    fused = current

    for epoch in range(1, cfg.epochs + 1):
        order_rng = seed_stream(cfg.seed, "task-order", epoch)
        task_order = [cfg.tasks[i] for i in order_rng.permutation(len(cfg.tasks))]

        trained: dict[str, ParameterSet] = {}
        bases: dict[str, ParameterSet] = {}
        for k in task_order:
            bases[k] = current if fusion != "none" else lineages[k]
            trained[k], mean_loss = _branch_train(cfg, enc_cfg, bases[k],
                                                  headers[k], k, epoch, bank)
            history.record(epoch, k, mean_loss)

        if fusion == "tte":
            if epoch >= 2:
                coeffs = update_coefficients(coeffs, history, epoch)
            deltas = {k: temporal_gradient(trained[k], current, policy, cfg.tte.mode)
                      for k in task_order}
            spread = task_gradient(trained[task_order[0]], trained[task_order[-1]],
                                   policy)
            new_current = ensemble_step(current, deltas, spread, coeffs, policy,
                                        last_task_weights=trained[task_order[-1]])
            alpha_map, beta = coeffs.alpha, coeffs.beta
        elif fusion == "mean":
            new_current = _mean_weights([trained[k] for k in task_order])
            deltas = {k: temporal_gradient(trained[k], current, policy, "absolute")
                      for k in task_order}
            alpha_map = {k: 1.0 / len(task_order) for k in task_order}
            beta = 0.0
        else:
            lineages = trained
            new_current = trained[task_order[-1]]
            deltas = {k: temporal_gradient(trained[k], bases[k], policy, "absolute")
                      for k in task_order}
            alpha_map = {k: 0.0 for k in task_order}
            beta = 0.0

        mus = impact_trace(deltas) if deltas[task_order[0]].entries else {}
        for k in task_order:
            ledger.append(LossRecord(epoch=epoch, task=k,
                                     loss=history.task_loss(epoch, k),
                                     total_loss=history.total_loss(epoch),
                                     alpha=alpha_map.get(k, 0.0), beta=beta))
            if k in mus:
                impact_rows.append((epoch, k, mus[k]))

        current = new_current
        ring.push(epoch, current)
        fused = moving_average(ring)
        meta = SnapshotMeta(epoch=epoch, task_order=task_order, seed=cfg.seed)
        artifacts.checkpoint_ids.append(save_snapshot(current, meta, ckpt_dir))

    impact_path = run_dir / "impact.tsv"
    with impact_path.open("w") as fh:
        fh.write("epoch\ttask\tmu\n")
        for epoch, k, mu in impact_rows:
            fh.write(f"{epoch}\t{k}\t{mu:.17g}\n")
    artifacts.impact_path = impact_path

    final_meta = SnapshotMeta(epoch=cfg.epochs, task_order=list(cfg.tasks),
                              seed=cfg.seed)
    artifacts.fused_id = save_snapshot(fused, final_meta, ckpt_dir, name="fused")
    for k, header in headers.items():
        artifacts.head_ids[k] = save_snapshot(header.weights(), final_meta, ckpt_dir,
                                              name=f"head-{k}")
    if fusion == "none":
        for k in cfg.tasks:
            artifacts.checkpoint_ids.append(
                save_snapshot(lineages[k], final_meta, ckpt_dir, name=f"task-{k}"))
    return artifacts


def load_fused_encoder(run_dir) -> tuple[Encoder, ParameterSet]:
    params, _ = load_snapshot("fused", Path(run_dir) / "checkpoints")
    return encoder_from_parameter_set(params), params


def _latent_features(encoder: Encoder, images: np.ndarray,
                     batch: int = 256) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            z = encoder(to_chw(images[start:start + batch]))
            feats.append(z.reshape(z.shape[0], -1).numpy())
    return np.concatenate(feats)


def run_transfer(cfg: ExperimentConfig, run_dir=None) -> RunArtifacts:
    """Train the student network from the fused encoder; save it plus a report."""
    torch.set_num_threads(1)
    run_dir = Path(run_dir) if run_dir is not None \
        else Path(cfg.out_root) / run_dir_name(cfg)
    ckpt_dir = run_dir / "checkpoints"
    if not (ckpt_dir / "fused").is_dir():
        raise CheckpointError(f"no fused checkpoint under {ckpt_dir}")
    encoder, encoder_params = load_fused_encoder(run_dir)
    images, labels = prepare_data(cfg)
    if labels is None:
        raise ValueError("transfer needs labeled data (synthetic provides labels)")

    tc = cfg.transfer
    if tc.method == "soft-targets":
        student_widths = (16, 48, 96, 64, 64)
    else:
        w = cfg.encoder_widths
        student_widths = tuple(w) + (w[-1],) * (5 - len(w))
    student = TargetNetwork(cfg.data.classes, cfg.data.image_size,
                            conv_widths=student_widths)
    init_parameters(student, seed_int(cfg.seed, "transfer", "student-init"))

    report: dict = {"method": tc.method}
    artifacts = RunArtifacts(run_dir=run_dir, checkpoint_dir=ckpt_dir)

    if tc.method == "soft-targets":
        latent_dim = int(np.prod(encoder.cfg.latent_shape(cfg.data.image_size)))
        # Output layer always matches the class count; hidden sizes from config.
        adapter = AdapterNetwork(latent_dim, tc.adapter_dims[:-1] + (cfg.data.classes,))
        init_parameters(adapter, seed_int(cfg.seed, "transfer", "adapter-init"))
        _fit_adapter(cfg, encoder, adapter, images, labels)
        teacher = _teacher_probs(encoder, adapter, images)
        report["initial_distill_loss"] = _mean_distill(student, images, teacher,
                                                       tc.temperature, cfg.batch_size)
        _train_student_soft(cfg, student, images, teacher)
        report["final_distill_loss"] = _mean_distill(student, images, teacher,
                                                     tc.temperature, cfg.batch_size)
    else:
        report["initial_flow_loss"] = _mean_flow_loss(cfg, encoder, student, images)
        _train_student_fsp(cfg, encoder, student, images)
        report["final_flow_loss"] = _mean_flow_loss(cfg, encoder, student, images)
        _finetune_student(cfg, student, images, labels)

    report["encoder_unchanged"] = parameter_set(
        encoder, encoder_params.arch_id).equal_bits(encoder_params)

    meta = SnapshotMeta(epoch=0, task_order=list(cfg.tasks), seed=cfg.seed)
    student_params = parameter_set(student, f"target{cfg.data.classes}")
    if (ckpt_dir / "target").is_dir():
        shutil.rmtree(ckpt_dir / "target")
    artifacts.checkpoint_ids.append(save_snapshot(student_params, meta, ckpt_dir,
                                                  name="target"))
    report_path = run_dir / "transfer_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    artifacts.report_paths["transfer"] = report_path
    return artifacts


def _fit_adapter(cfg, encoder, adapter, images, labels) -> None:
    tc = cfg.transfer
    opt = torch.optim.SGD(adapter.parameters(), lr=tc.learning_rate,
                          momentum=cfg.momentum)
    ce = torch.nn.CrossEntropyLoss()
    for epoch in range(tc.adapter_epochs):
        order = seed_stream(cfg.seed, "transfer", "adapter-order", epoch).permutation(
            len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with torch.no_grad():
                latent = encoder(to_chw(images[idx]))
            logits = adapter(latent)
            loss = ce(logits, torch.as_tensor(labels[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()


def _teacher_probs(encoder, adapter, images, batch: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            x = to_chw(images[start:start + batch])
            out.append(soft_target_probs(encoder, adapter, x).numpy())
    return np.concatenate(out)


def _mean_distill(student, images, teacher, temperature, batch) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(images), batch):
            x = to_chw(images[start:start + batch])
            t = torch.as_tensor(teacher[start:start + batch])
            total += float(distill_loss(t, student(x), temperature))
            count += 1
    return total / count


def _train_student_soft(cfg, student, images, teacher) -> None:
    tc = cfg.transfer
    opt = torch.optim.SGD(student.parameters(), lr=tc.learning_rate,
                          momentum=cfg.momentum)
    for epoch in range(tc.student_epochs):
        order = seed_stream(cfg.seed, "transfer", "student-order", epoch).permutation(
            len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = to_chw(images[idx])
            t = torch.as_tensor(teacher[idx])
            loss = tc.distill_weight * distill_loss(t, student(x), tc.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()


def _flow_pair_lists(cfg, encoder, student, x):
    with torch.no_grad():
        teacher_maps = encoder.stage_maps(x)
        teacher_flow = [m.detach() for m in
                        flow_matrices(teacher_maps, cfg.transfer.fsp_pair_count)]
    student_flow = flow_matrices(student.stage_maps(x), cfg.transfer.fsp_pair_count)
    return teacher_flow, student_flow


def _mean_flow_loss(cfg, encoder, student, images) -> float:
    total, count = 0.0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with torch.no_grad():
            for start in range(0, len(images), cfg.batch_size):
                x = to_chw(images[start:start + cfg.batch_size])
                t_flow, s_flow = _flow_pair_lists(cfg, encoder, student, x)
                total += float(fsp_transfer_loss(t_flow, s_flow))
                count += 1
    return total / count


def _train_student_fsp(cfg, encoder, student, images) -> None:
    tc = cfg.transfer
    opt = torch.optim.SGD(student.parameters(), lr=tc.learning_rate,
                          momentum=cfg.momentum)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for epoch in range(tc.student_epochs):
            order = seed_stream(cfg.seed, "transfer", "fsp-order", epoch).permutation(
                len(images))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = to_chw(images[idx])
                t_flow, s_flow = _flow_pair_lists(cfg, encoder, student, x)
                loss = fsp_transfer_loss(t_flow, s_flow)
                opt.zero_grad()
                loss.backward()
                opt.step()


def _finetune_student(cfg, student, images, labels) -> None:
    tc = cfg.transfer
    opt = torch.optim.SGD(student.parameters(), lr=tc.learning_rate / 10.0,
                          momentum=cfg.momentum)
    ce = torch.nn.CrossEntropyLoss()
    for epoch in range(tc.student_epochs):
        order = seed_stream(cfg.seed, "transfer", "finetune-order", epoch).permutation(
            len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = ce(student(to_chw(images[idx])), torch.as_tensor(labels[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()


def run_eval(cfg: ExperimentConfig, run_dir=None, with_dec: bool = True,
             retrieval_grid: bool = False) -> tuple[float, ClusterReport | None]:
    """Probe accuracy on frozen fused-encoder features, plus clustering."""
    torch.set_num_threads(1)
    run_dir = Path(run_dir) if run_dir is not None \
        else Path(cfg.out_root) / run_dir_name(cfg)
    encoder, _ = load_fused_encoder(run_dir)
    images, labels = prepare_data(cfg)
    if labels is None:
        raise ValueError("evaluation needs labeled data")
    feats = _latent_features(encoder, images)

    probe_acc = probe_on_features(cfg, feats, labels)

    cluster_report = None
    if with_dec:
        m = min(len(images), 2000)
        sub = seed_stream(cfg.seed, "eval", "dec-subset").permutation(len(images))[:m]
        state = dec_fit(feats[sub], cfg.eval.dec_clusters,
                        seed_int(cfg.seed, "eval", "dec"), iters=cfg.eval.dec_iters)
        predicted = state.q.argmax(axis=1)
        cluster_report = cluster_metrics(labels[sub], predicted, feats[sub],
                                         cfg.eval.recall_k)

    report = {"probe_accuracy": probe_acc}
    if cluster_report is not None:
        report.update(nmi=cluster_report.nmi, ari=cluster_report.ari,
                      recall_at_k=cluster_report.recall_at_k)
    report_path = run_dir / "eval_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if retrieval_grid:
        _save_retrieval_grid(images, feats, run_dir / "retrieval.png",
                             cfg.eval.recall_k, seed_int(cfg.seed, "eval", "grid"))
    return probe_acc, cluster_report


def probe_on_features(cfg: ExperimentConfig, feats: np.ndarray,
                      labels: np.ndarray) -> float:
    """Linear-probe accuracy with a seeded train/test split."""
    n = len(feats)
    want = cfg.eval.probe_train + cfg.eval.probe_test
    if n < want:
        raise ValueError(f"need {want} samples for the probe split, have {n}")
    order = seed_stream(cfg.seed, "probe-split").permutation(n)
    tr = order[:cfg.eval.probe_train]
    te = order[cfg.eval.probe_train:want]
    return linear_probe(feats[tr], labels[tr], feats[te], labels[te],
                        seed=cfg.seed)


def _save_retrieval_grid(images, feats, out_path, k, seed, queries: int = 6):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(images))[:queries]
    d2 = ((feats[picks][:, None, :] - feats[None, :, :]) ** 2).sum(axis=2)
    for row, q in enumerate(picks):
        d2[row, q] = np.inf
    fig, axes = plt.subplots(queries, k + 1, figsize=(1.2 * (k + 1), 1.2 * queries))
    for row, q in enumerate(picks):
        nn = np.argsort(d2[row])[:k]
        panels = [q] + list(nn)
        for col, idx in enumerate(panels):
            ax = axes[row, col]
            ax.imshow(images[idx])
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title("query" if col == 0 else f"nn{col}", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def read_impact_trace(trace_path) -> list[tuple[int, str, float]]:
    rows = []
    lines = Path(trace_path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["epoch", "task", "mu"]:
        raise ValueError(f"malformed impact trace {trace_path}")
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ValueError(f"malformed impact trace line: {ln!r}")
        rows.append((int(parts[0]), parts[1], float(parts[2])))
    return rows


def impact_variation(trace_path) -> dict[int, float]:
    """Per-epoch coefficient of variation of the impact across tasks."""
    rows = read_impact_trace(trace_path)
    by_epoch: dict[int, list[float]] = {}
    for epoch, _, mu in rows:
        by_epoch.setdefault(epoch, []).append(mu)
    out = {}
    for epoch, mus in sorted(by_epoch.items()):
        if len(mus) < 2:
            warnings.warn(f"epoch {epoch} has a single task; reporting cv=0",
                          stacklevel=2)
            out[epoch] = 0.0
            continue
        arr = np.asarray(mus)
        mean = arr.mean()
        out[epoch] = float(arr.std() / mean) if mean > 0 else 0.0
    return out


def plot_impact(trace_path, out_path=None) -> dict[int, float]:
    """Draw one impact curve per task; returns the per-epoch variation."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_impact_trace(trace_path)
    series: dict[str, list[tuple[int, float]]] = {}
    for epoch, task, mu in rows:
        series.setdefault(task, []).append((epoch, mu))
    fig, ax = plt.subplots(figsize=(6, 4))
    for task, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=task)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean |weight delta|")
    ax.legend(title="task")
    fig.tight_layout()
    out_path = Path(out_path) if out_path is not None \
        else Path(trace_path).with_suffix(".png")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return impact_variation(trace_path)
