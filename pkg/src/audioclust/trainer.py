"""Pretraining loop.

Each epoch makes two passes over the dataset: pass 1 embeds every clip
(inference mode, no augmentation), reduces and clusters the projection
outputs into pseudo-labels, and reinitializes the prediction head; pass 2
walks a label-balanced batch plan, masking each spectrogram before
predicting its pseudo-label with SGD updates. Training stops when the
consecutive-epoch NMI between assignments stops setting new running
maxima for ``patience`` epochs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import clustering, model as model_lib, sampler
from .config import RunConfig, derive_seed
from .data import DatasetManifest, load_clip
from .frontend import MelCache, logmel_cached, policy_for, spec_augment, MelSpectrogram


class TrainingError(RuntimeError):
    """Raised when a run aborts (for example on a non-finite loss)."""


@dataclass
class MelDataset:
    """All log-mels for one manifest split, held in memory in manifest order."""

    clip_ids: list[str]
    labels: Optional[np.ndarray]  # None when any entry lacks a label
    mels: np.ndarray  # (N, T, F) float32
    num_classes: Optional[int]

    def __len__(self) -> int:
        return self.mels.shape[0]


def build_mel_dataset(
    manifest: DatasetManifest, split: str, cfg: RunConfig, use: str = "training"
) -> MelDataset:
    entries = manifest.require_split(split, use)
    frontend_cfg = cfg.frontend_config()
    cache = MelCache(cfg.data.cache_dir, frontend_cfg) if cfg.data.cache_dir else None
    root = cfg.data.root or None
    ids: list[str] = []
    labels: list[Optional[int]] = []
    mels: list[np.ndarray] = []
    for entry in entries:
        clip = load_clip(entry, cfg.data.target_rate, cfg.data.duration, root=root)
        mel = logmel_cached(clip, frontend_cfg, cache)
        ids.append(clip.clip_id)
        labels.append(entry.label)
        mels.append(mel.values.astype(np.float32))
    label_arr = (
        np.array(labels, dtype=np.int64) if all(l is not None for l in labels) else None
    )
    return MelDataset(
        clip_ids=ids,
        labels=label_arr,
        mels=np.stack(mels),
        num_classes=manifest.num_classes,
    )


@dataclass
class EpochRecord:
    epoch: int
    nmi_vs_prev: Optional[float]
    mean_loss: float
    cluster_size_histogram: list[int]
    wall_time: float

    def metrics_line(self) -> str:
        # wall_time stays out of metrics.jsonl so identical configs produce
        # bit-identical metrics files; timings land in timings.jsonl
        return json.dumps(
            {
                "epoch": self.epoch,
                "nmi_vs_prev": self.nmi_vs_prev,
                "mean_loss": self.mean_loss,
                "cluster_size_histogram": self.cluster_size_histogram,
            },
            sort_keys=True,
        )


@dataclass
class PretrainState:
    model: model_lib.PretrainModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # last completed epoch


def init_state(cfg: RunConfig) -> PretrainState:
    net = model_lib.init_model(cfg.encoder_config(), cfg.head_config(), cfg.seed_for("model"))
    opt = torch.optim.SGD(
        net.parameters(),
        lr=cfg.pretrain.lr,
        momentum=cfg.pretrain.momentum,
        weight_decay=cfg.pretrain.weight_decay,
    )
    return PretrainState(model=net, optimizer=opt)


def extract_embeddings(
    net: model_lib.PretrainModel,
    dataset: MelDataset,
    batch_size: int,
    standardize: bool,
    projected: bool = False,
) -> np.ndarray:
    """Encoder outputs h (or projection outputs z) for every clip, in order."""
    net.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = model_lib.prepare_batch(
                dataset.mels[start : start + batch_size], standardize
            )
            h = net.encode(batch)
            chunks.append((net.project(h) if projected else h).numpy())
    return np.concatenate(chunks, axis=0)


def cluster_epoch(
    Z: np.ndarray, cfg: RunConfig, epoch: int
) -> tuple[clustering.ClusterModel, clustering.PseudoLabelAssignment]:
    """Reduce/whiten/l2 the projection outputs and cluster them.

    All-identical embeddings (no variance anywhere, e.g. a dataset of one
    repeated clip) cannot be reduced; they fall back to clustering the raw
    matrix, which the empty-cluster repair handles. Any other clustering
    failure propagates.
    """
    try:
        reduced = clustering.preprocess(Z, cfg.pretrain.pca_dim)
    except clustering.DegenerateEmbeddingsError:
        reduced = np.asarray(Z, dtype=np.float64)
    seed = derive_seed(cfg.seed_for("clustering"), f"epoch{epoch}")
    if cfg.pretrain.algorithm == "kmeans":
        return clustering.kmeans_fit(
            reduced,
            cfg.pretrain.num_clusters,
            seed=seed,
            max_iter=cfg.pretrain.kmeans_max_iter,
            epoch=epoch,
        )
    params = clustering.PicParams(
        top_m=cfg.pic.top_m,
        epsilon=cfg.pic.epsilon,
        max_iter=cfg.pic.max_iter,
        epsilon_loop=cfg.pic.epsilon_loop,
    )
    return clustering.pic_fit(
        reduced, cfg.pretrain.num_clusters, params=params, seed=seed, epoch=epoch
    )


def augmented_batch(
    dataset: MelDataset, indices: np.ndarray, cfg: RunConfig, epoch: int, batch_idx: int
) -> torch.Tensor:
    """Masked, standardized model input for one planned batch.

    Per-slot mask draws derive from (augment seed, epoch, batch, slot), so a
    loss probe can rebuild the identical batch outside the training loop.
    """
    base_policy = cfg.augment_policy()
    batch_rng = np.random.default_rng(
        [cfg.seed_for("augment"), epoch, batch_idx]
    )
    slot_seeds = batch_rng.integers(0, 2**31, size=indices.shape[0])
    out = np.empty((indices.shape[0],) + dataset.mels.shape[1:], dtype=np.float32)
    for i, (clip_idx, slot_seed) in enumerate(zip(indices, slot_seeds)):
        mel = MelSpectrogram(
            values=dataset.mels[clip_idx].astype(np.float64),
            clip_id=dataset.clip_ids[clip_idx],
        )
        out[i] = spec_augment(mel, policy_for(base_policy, int(slot_seed))).values
    return model_lib.prepare_batch(out, cfg.model.standardize_input)


def evaluate_plan_loss(
    state: PretrainState,
    dataset: MelDataset,
    assignment: clustering.PseudoLabelAssignment,
    plan: sampler.BalancedBatchPlan,
    cfg: RunConfig,
    epoch: int,
) -> float:
    """Mean loss over a batch plan without touching the parameters."""
    state.model.eval()
    losses = []
    with torch.no_grad():
        for b, indices in enumerate(plan.batches):
            x = augmented_batch(dataset, indices, cfg, epoch, b)
            labels = torch.as_tensor(assignment.labels[indices])
            losses.append(float(model_lib.cross_entropy(state.model(x), labels)))
    return float(np.mean(losses))


def pretrain_epoch(
    state: PretrainState,
    dataset: MelDataset,
    cfg: RunConfig,
    prev_assignment: Optional[clustering.PseudoLabelAssignment] = None,
) -> tuple[clustering.PseudoLabelAssignment, EpochRecord]:
    """One two-pass epoch; mutates the model parameters in place (pass 2 only)."""
    epoch = state.epoch + 1
    t0 = time.monotonic()

    # pass 1: embed and cluster; no gradients, no augmentation, no updates
    Z = extract_embeddings(
        state.model, dataset, cfg.pretrain.batch_size, cfg.model.standardize_input,
        projected=True,
    )
    _, assignment = cluster_epoch(Z, cfg, epoch)
    nmi_vs_prev = (
        clustering.nmi(assignment.labels, prev_assignment.labels)
        if prev_assignment is not None
        else None
    )

    # stale head weights would fit the previous epoch's arbitrary indexing
    model_lib.reinit_prediction_head(
        state.model, derive_seed(cfg.seed_for("model"), f"head{epoch}")
    )
    head_params = {id(state.model.head.weight), id(state.model.head.bias)}
    for param in state.model.parameters():
        if id(param) in head_params and param in state.optimizer.state:
            del state.optimizer.state[param]

    # pass 2: predict pseudo-labels on masked inputs
    plan = sampler.build_epoch(
        assignment, cfg.pretrain.batch_size, derive_seed(cfg.seed_for("sampler"), f"epoch{epoch}")
    )
    state.model.train()
    losses = []
    for b, indices in enumerate(plan.batches):
        x = augmented_batch(dataset, indices, cfg, epoch, b)
        labels = torch.as_tensor(assignment.labels[indices])
        state.optimizer.zero_grad()
        loss = model_lib.cross_entropy(state.model(x), labels)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
        loss.backward()
        state.optimizer.step()
        losses.append(float(loss.detach()))
    state.epoch = epoch
    record = EpochRecord(
        epoch=epoch,
        nmi_vs_prev=nmi_vs_prev,
        mean_loss=float(np.mean(losses)),
        cluster_size_histogram=assignment.cluster_sizes.tolist(),
        wall_time=time.monotonic() - t0,
    )
    return assignment, record


def pretrain(
    dataset: MelDataset,
    cfg: RunConfig,
    out_dir: str | Path,
    resume: Optional[str | Path] = None,
    dump_plans: bool = False,
) -> tuple[Path, list[EpochRecord]]:
    """Full pretraining run: loops epochs with NMI-patience early stopping,
    appends metrics.jsonl/timings.jsonl, and writes ckpt_best.bin (highest
    consecutive-epoch NMI) plus ckpt_last.bin under ``out_dir``.

    ``dump_plans`` additionally writes each epoch's balanced batch plan to
    plans/epoch_<n>.json for debugging (plans are deterministic, so the dump
    is a rebuild, not a tap on the training loop)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    state = init_state(cfg)
    prev_assignment: Optional[clustering.PseudoLabelAssignment] = None
    best_nmi = -np.inf
    stall = 0
    records: list[EpochRecord] = []
    if resume is not None:
        payload = model_lib.load_checkpoint(resume)
        state.model.load_state_dict(payload["model_state"])
        if payload["optimizer_state"] is not None:
            state.optimizer.load_state_dict(payload["optimizer_state"])
        state.epoch = payload["epoch"]
        if payload.get("last_labels") is not None:
            labels = np.asarray(payload["last_labels"])
            prev_assignment = clustering.PseudoLabelAssignment(
                labels=labels,
                epoch=state.epoch,
                cluster_sizes=np.bincount(labels, minlength=cfg.pretrain.num_clusters),
            )
        metrics_path = out / "metrics.jsonl"
        if metrics_path.exists():
            for line in metrics_path.read_text().splitlines():
                rec = json.loads(line)
                if rec["nmi_vs_prev"] is not None:
                    if rec["nmi_vs_prev"] > best_nmi:
                        best_nmi = rec["nmi_vs_prev"]
                        stall = 0
                    else:
                        stall += 1

    file_mode = "a" if resume is not None else "w"
    metrics_fh = open(out / "metrics.jsonl", file_mode, encoding="utf-8")
    timings_fh = open(out / "timings.jsonl", file_mode, encoding="utf-8")
    try:
        while state.epoch < cfg.pretrain.max_epochs:
            try:
                assignment, record = pretrain_epoch(state, dataset, cfg, prev_assignment)
            except TrainingError:
                model_lib.save_checkpoint(
                    out / "ckpt_diagnostic.bin", state.model, state.epoch, cfg_hash,
                    optimizer=state.optimizer,
                )
                raise
            records.append(record)
            metrics_fh.write(record.metrics_line() + "\n")
            metrics_fh.flush()
            timings_fh.write(
                json.dumps({"epoch": record.epoch, "wall_time": record.wall_time}) + "\n"
            )
            timings_fh.flush()
            if dump_plans:
                plan = sampler.build_epoch(
                    assignment,
                    cfg.pretrain.batch_size,
                    derive_seed(cfg.seed_for("sampler"), f"epoch{record.epoch}"),
                )
                plans_dir = out / "plans"
                plans_dir.mkdir(exist_ok=True)
                (plans_dir / f"epoch_{record.epoch}.json").write_text(
                    json.dumps(plan.to_jsonable())
                )
            prev_assignment = assignment
            model_lib.save_checkpoint(
                out / "ckpt_last.bin", state.model, state.epoch, cfg_hash,
                optimizer=state.optimizer, last_labels=assignment.labels,
            )
            if record.nmi_vs_prev is not None:
                if record.nmi_vs_prev > best_nmi:
                    best_nmi = record.nmi_vs_prev
                    stall = 0
                    model_lib.save_checkpoint(
                        out / "ckpt_best.bin", state.model, state.epoch, cfg_hash,
                        optimizer=state.optimizer, last_labels=assignment.labels,
                    )
                else:
                    stall += 1
                    if stall >= cfg.pretrain.patience:
                        break
    finally:
        metrics_fh.close()
        timings_fh.close()
    if not (out / "ckpt_best.bin").exists():
        model_lib.save_checkpoint(
            out / "ckpt_best.bin", state.model, state.epoch, cfg_hash,
            optimizer=state.optimizer,
        )
    return out / "ckpt_last.bin", records
