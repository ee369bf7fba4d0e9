"""Command-line entry point.

Subcommands: pretrain, cluster, extract, probe, finetune, report. Every
command validates its config up front, writes the fully-resolved effective
config into the run directory, and keeps all artifacts under ``--out`` (plus
the declared mel cache directory). Failures print a single machine-parseable
``error: <field-or-stage>: <message>`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import downstream, model as model_lib, trainer
from .clustering import ClusteringError
from .config import ConfigError, RunConfig, load_config, write_resolved
from .data import DecodeError, ManifestError, load_manifest
from .frontend import FrontendError


def _fail(stage: str, message: str, code: int = 1) -> int:
    print(f"error: {stage}: {message}", file=sys.stderr)
    return code


def _load_run_config(path: str) -> RunConfig:
    cfg = load_config(path)
    cache_override = os.environ.get("AUDIOCLUST_CACHE_DIR")
    if cache_override is not None:
        cfg.data.cache_dir = cache_override
    return cfg


def _cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    write_resolved(cfg, args.out)
    dataset = trainer.build_mel_dataset(manifest, "train", cfg, use="pretraining")
    trainer.pretrain(dataset, cfg, args.out, resume=args.resume, dump_plans=args.dump_plans)
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    write_resolved(cfg, out)
    split = args.split
    dataset = trainer.build_mel_dataset(manifest, split, cfg, use="extraction")
    if args.ckpt == "random":
        net = model_lib.init_model(cfg.encoder_config(), cfg.head_config(), cfg.seed_for("model"))
    else:
        net = model_lib.model_from_checkpoint(model_lib.load_checkpoint(args.ckpt))
    H = trainer.extract_embeddings(
        net, dataset, cfg.pretrain.batch_size, cfg.model.standardize_input,
        projected=args.projected,
    )
    np.save(out / "embeddings.npy", H)
    (out / "clip_ids.json").write_text(json.dumps(dataset.clip_ids))
    return 0


def _cmd_cluster(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    out = Path(args.out)
    write_resolved(cfg, out)
    Z = np.load(args.embeddings)
    clip_ids = json.loads(Path(args.ids).read_text())
    if len(clip_ids) != Z.shape[0]:
        return _fail("cluster", "clip id count does not match the embedding rows")
    model, assignment = trainer.cluster_epoch(Z, cfg, epoch=0)
    with open(out / "labels.jsonl", "w", encoding="utf-8") as fh:
        for clip_id, label in zip(clip_ids, assignment.labels.tolist()):
            fh.write(json.dumps({"clip_id": clip_id, "label": label}) + "\n")
    np.savez(
        out / "cluster_model.npz",
        centroids=model.centroids,
        algorithm=model.algorithm,
        num_clusters=model.num_clusters,
        inertia=model.inertia,
        seed=model.seed,
    )
    return 0


def _eval_common(args: argparse.Namespace, mode: str) -> int:
    cfg = _load_run_config(args.config)
    cfg.eval.mode = mode
    ckpt = None if args.ckpt == "random" else args.ckpt
    cfg.eval.init = "random" if ckpt is None else "pretrained"
    out = Path(args.out)
    write_resolved(cfg, out)
    manifest = load_manifest(args.manifest)
    train = trainer.build_mel_dataset(manifest, "train", cfg, use="evaluation")
    test = trainer.build_mel_dataset(manifest, "test", cfg, use="evaluation")
    run = downstream.linear_probe if mode == "frozen" else downstream.finetune
    report = run(ckpt, train, test, cfg, task_name=args.task)
    (out / "report.json").write_text(json.dumps(report.to_jsonable(), indent=2) + "\n")
    return 0


def _cmd_probe(args: argparse.Namespace) -> int:
    return _eval_common(args, "frozen")


def _cmd_finetune(args: argparse.Namespace) -> int:
    return _eval_common(args, "finetune")


def _cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            return _fail("report", f"{path} not found")
        reports.append(downstream.EvalReport.from_jsonable(json.loads(path.read_text())))
    text, grid = downstream.report_grid(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n")
    (out / "grid.txt").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audioclust",
        description="Cluster-and-predict self-supervised audio pretraining",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--dump-plans", action="store_true",
                   help="write each epoch's batch plan to plans/ for debugging")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("extract", help="emit encoder embeddings for a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint path or 'random'")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--projected", action="store_true", help="emit projection outputs")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("cluster", help="cluster a saved embedding matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--embeddings", required=True, help=".npy embedding matrix")
    p.add_argument("--ids", required=True, help="clip id JSON list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    for name, helptext in (
        ("probe", "frozen linear probe on a labeled task"),
        ("finetune", "end-to-end fine-tune on a labeled task"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--ckpt", required=True, help="checkpoint path or 'random'")
        p.add_argument("--out", required=True)
        p.add_argument("--task", default="task")
        p.set_defaults(func=_cmd_probe if name == "probe" else _cmd_finetune)

    p = sub.add_parser("report", help="aggregate eval runs into a comparison grid")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc.path, str(exc).split(": ", 1)[-1])
    except (
        ManifestError,
        DecodeError,
        FrontendError,
        ClusteringError,
        downstream.EvalError,
        trainer.TrainingError,
    ) as exc:
        return _fail(args.command, str(exc))
    except FileNotFoundError as exc:
        return _fail(args.command, f"file not found: {exc.filename}")


if __name__ == "__main__":
    sys.exit(main())
