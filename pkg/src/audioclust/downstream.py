"""Downstream evaluation: frozen linear probes and end-to-end fine-tuning.

The projection and prediction head from pretraining are discarded; a fresh
affine classifier sits directly on the encoder embedding. ``frozen`` mode
trains only that classifier on precomputed embeddings, ``finetune`` trains
the encoder jointly with it. Reported test accuracy comes from the epoch
with the lowest training loss; the full training curve is kept alongside.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import model as model_lib
from .config import RunConfig, derive_seed
from .trainer import MelDataset, extract_embeddings


class EvalError(ValueError):
    """Raised for downstream runs that cannot be evaluated as requested."""


@dataclass
class EvalReport:
    task_name: str
    mode: str  # "frozen" | "finetune"
    init: str  # "pretrained" | "random"
    test_accuracy: float  # percent
    train_curve: list[tuple[int, float, float]]  # (epoch, loss, train_acc)
    num_classes: int
    num_samples: int
    selected_epoch: int

    def to_jsonable(self) -> dict:
        return {
            "task_name": self.task_name,
            "mode": self.mode,
            "init": self.init,
            "test_accuracy": self.test_accuracy,
            "train_curve": [list(point) for point in self.train_curve],
            "num_classes": self.num_classes,
            "num_samples": self.num_samples,
            "selected_epoch": self.selected_epoch,
        }

    @staticmethod
    def from_jsonable(raw: dict) -> "EvalReport":
        return EvalReport(
            task_name=raw["task_name"],
            mode=raw["mode"],
            init=raw["init"],
            test_accuracy=raw["test_accuracy"],
            train_curve=[tuple(point) for point in raw["train_curve"]],
            num_classes=raw["num_classes"],
            num_samples=raw["num_samples"],
            selected_epoch=raw["selected_epoch"],
        )


def _require_labels(dataset: MelDataset, split: str) -> np.ndarray:
    if dataset.labels is None:
        raise EvalError(f"{split} split is missing labels")
    return dataset.labels


def _check_label_coverage(train_labels: np.ndarray, test_labels: np.ndarray) -> None:
    missing = sorted(set(test_labels.tolist()) - set(train_labels.tolist()))
    if missing:
        warnings.warn(
            f"classes {missing} appear in the test split but not in train; "
            "they are counted as errors",
            stacklevel=3,
        )


def _build_model(
    cfg: RunConfig, checkpoint: Optional[str | Path]
) -> model_lib.PretrainModel:
    if cfg.eval.init == "pretrained":
        if checkpoint is None:
            raise EvalError("pretrained init requires a checkpoint path")
        return model_lib.model_from_checkpoint(model_lib.load_checkpoint(checkpoint))
    return model_lib.init_model(
        cfg.encoder_config(), cfg.head_config(), cfg.seed_for("eval")
    )


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).double().mean()) * 100.0


def _classifier(n_features: int, num_classes: int, seed: int) -> nn.Linear:
    clf = nn.Linear(n_features, num_classes)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        std = (2.0 / n_features) ** 0.5
        clf.weight.normal_(0.0, std, generator=gen)
        clf.bias.zero_()
    return clf


def _run_eval(
    checkpoint: Optional[str | Path],
    train: MelDataset,
    test: MelDataset,
    cfg: RunConfig,
    task_name: str,
) -> EvalReport:
    train_labels = _require_labels(train, "train")
    test_labels = _require_labels(test, "test")
    _check_label_coverage(train_labels, test_labels)
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    net = _build_model(cfg, checkpoint)
    frozen = cfg.eval.mode == "frozen"
    clf = _classifier(
        net.encoder_config.embedding_dim, num_classes, derive_seed(cfg.seed_for("eval"), "clf")
    )
    y_train = torch.as_tensor(train_labels)
    y_test = torch.as_tensor(test_labels)
    standardize = cfg.model.standardize_input
    batch_size = cfg.eval.batch_size

    if frozen:
        feats_train = torch.as_tensor(
            extract_embeddings(net, train, batch_size, standardize)
        )
        feats_test = torch.as_tensor(
            extract_embeddings(net, test, batch_size, standardize)
        )
        params = list(clf.parameters())
    else:
        net.train()
        params = list(net.encoder.parameters()) + list(clf.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.eval.lr)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed_for("eval"), "shuffle"))
    n = len(train)

    def batch_logits(indices: torch.Tensor) -> torch.Tensor:
        if frozen:
            return clf(feats_train[indices])
        x = model_lib.prepare_batch(train.mels[indices.numpy()], standardize)
        return clf(net.encode(x))

    def test_accuracy() -> float:
        with torch.no_grad():
            if frozen:
                return _accuracy(clf(feats_test), y_test)
            net.eval()
            logits = []
            for start in range(0, len(test), batch_size):
                x = model_lib.prepare_batch(
                    test.mels[start : start + batch_size], standardize
                )
                logits.append(clf(net.encode(x)))
            acc = _accuracy(torch.cat(logits), y_test)
            net.train()
            return acc

    curve: list[tuple[int, float, float]] = []
    test_accs: list[float] = []
    for epoch in range(1, cfg.eval.max_epochs + 1):
        perm = torch.randperm(n, generator=gen)
        losses = []
        correct = 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            optimizer.zero_grad()
            logits = batch_logits(idx)
            loss = model_lib.cross_entropy(logits, y_train[idx])
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            correct += int((logits.argmax(dim=1) == y_train[idx]).sum())
        curve.append((epoch, float(np.mean(losses)), 100.0 * correct / n))
        test_accs.append(test_accuracy())
    best = int(np.argmin([loss for _, loss, _ in curve]))
    return EvalReport(
        task_name=task_name,
        mode=cfg.eval.mode,
        init=cfg.eval.init,
        test_accuracy=test_accs[best],
        train_curve=curve,
        num_classes=num_classes,
        num_samples=len(train) + len(test),
        selected_epoch=best + 1,
    )


def linear_probe(
    checkpoint: Optional[str | Path],
    train: MelDataset,
    test: MelDataset,
    cfg: RunConfig,
    task_name: str = "task",
) -> EvalReport:
    """Train a fresh affine classifier on frozen encoder embeddings."""
    if cfg.eval.mode != "frozen":
        raise EvalError("linear_probe requires eval.mode == 'frozen'")
    return _run_eval(checkpoint, train, test, cfg, task_name)


def finetune(
    checkpoint: Optional[str | Path],
    train: MelDataset,
    test: MelDataset,
    cfg: RunConfig,
    task_name: str = "task",
) -> EvalReport:
    """Train encoder plus classifier end to end."""
    if cfg.eval.mode != "finetune":
        raise EvalError("finetune requires eval.mode == 'finetune'")
    return _run_eval(checkpoint, train, test, cfg, task_name)


GRID_COLUMNS = [
    ("random", "frozen"),
    ("random", "finetune"),
    ("pretrained", "frozen"),
    ("pretrained", "finetune"),
]


def report_grid(reports: list[EvalReport]) -> tuple[str, dict]:
    """Per-task 4-column (init x mode) accuracy grid as text and JSON."""
    cells: dict[str, dict[tuple[str, str], float]] = {}
    for rep in reports:
        cells.setdefault(rep.task_name, {})[(rep.init, rep.mode)] = rep.test_accuracy
    header = ["task"] + [f"{init}/{mode}" for init, mode in GRID_COLUMNS]
    rows = []
    grid_json: dict[str, dict[str, Optional[float]]] = {}
    for task in sorted(cells):
        row = [task]
        grid_json[task] = {}
        for key in GRID_COLUMNS:
            value = cells[task].get(key)
            row.append("—" if value is None else f"{value:.1f}")
            grid_json[task][f"{key[0]}/{key[1]}"] = value
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines), grid_json
