import json

import numpy as np
import pytest

from audioclust.cli import main
from synthdata import make_dataset

TOML_TEMPLATE = """
run_name = "cli-test"
seed = 11

[data]
target_rate = 4000
duration = 1.0
root = "{root}"

[frontend]
mel_bins = 16
fmax = 1900.0

[model]
conv_blocks = [[8, 3, 2], [16, 3, 2]]
embedding_dim = 16
projection_width = 16

[pretrain]
algorithm = "kmeans"
num_clusters = 2
batch_size = 4
max_epochs = 2
patience = 2
pca_dim = 8

[eval]
max_epochs = 3
"""


@pytest.fixture
def workdir(tmp_path):
    manifest = make_dataset(
        tmp_path / "data", n_clips=8, n_classes=2, sample_rate=4000, duration=1.0,
        seed=2, train_frac=0.5,
    )
    config = tmp_path / "config.toml"
    config.write_text(TOML_TEMPLATE.format(root=tmp_path / "data"))
    return tmp_path, config, manifest


def test_pretrain_cli_contract(workdir):
    tmp_path, config, manifest = workdir
    out = tmp_path / "run1"
    code = main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--out", str(out)])
    assert code == 0
    assert (out / "metrics.jsonl").exists()
    assert (out / "ckpt_last.bin").exists()
    assert (out / "config.resolved.json").exists()


def test_unknown_flag_exits_2(workdir):
    _, config, manifest = workdir
    code = main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--banana"])
    assert code == 2


def test_unknown_subcommand_exits_2():
    assert main(["frobnicate"]) == 2


def test_config_validation_failure_exit_1(workdir, capsys):
    tmp_path, config, manifest = workdir
    bad = tmp_path / "bad.toml"
    bad.write_text(config.read_text().replace('algorithm = "kmeans"', 'algorithm = "dbscan"'))
    code = main(["pretrain", "--config", str(bad), "--manifest", str(manifest),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: pretrain.algorithm:")


def test_unknown_config_key_exit_1(workdir, capsys):
    tmp_path, config, manifest = workdir
    bad = tmp_path / "bad2.toml"
    bad.write_text(config.read_text() + "\n[pretrain2]\nx = 1\n")
    code = main(["pretrain", "--config", str(bad), "--manifest", str(manifest),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "pretrain2" in capsys.readouterr().err


def test_extract_and_cluster_pipeline(workdir):
    tmp_path, config, manifest = workdir
    out = tmp_path / "emb"
    code = main(["extract", "--config", str(config), "--manifest", str(manifest),
                 "--ckpt", "random", "--out", str(out), "--projected"])
    assert code == 0
    Z = np.load(out / "embeddings.npy")
    ids = json.loads((out / "clip_ids.json").read_text())
    assert Z.shape == (4, 16)  # train split, projection width
    assert len(ids) == 4

    cl_out = tmp_path / "clusters"
    code = main(["cluster", "--config", str(config), "--embeddings",
                 str(out / "embeddings.npy"), "--ids", str(out / "clip_ids.json"),
                 "--out", str(cl_out)])
    assert code == 0
    lines = (cl_out / "labels.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) == {"clip_id", "label"}
    model = np.load(cl_out / "cluster_model.npz")
    assert model["centroids"].shape[0] == 2
    assert str(model["algorithm"]) == "kmeans"


def test_probe_finetune_report_grid(workdir):
    tmp_path, config, manifest = workdir
    pre = tmp_path / "pre"
    assert main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--out", str(pre)]) == 0
    runs = []
    for name, cmd, ckpt in (
        ("probe_rand", "probe", "random"),
        ("probe_pre", "probe", str(pre / "ckpt_best.bin")),
        ("ft_rand", "finetune", "random"),
    ):
        out = tmp_path / name
        assert main([cmd, "--config", str(config), "--manifest", str(manifest),
                     "--ckpt", ckpt, "--out", str(out), "--task", "demo"]) == 0
        assert (out / "report.json").exists()
        runs.append(str(out))
    grid_out = tmp_path / "grid"
    assert main(["report", "--runs", *runs, "--out", str(grid_out)]) == 0
    grid = json.loads((grid_out / "grid.json").read_text())
    assert grid["demo"]["random/frozen"] is not None
    assert grid["demo"]["pretrained/finetune"] is None
    assert "—" in (grid_out / "grid.txt").read_text()


def test_resolved_config_roundtrip(workdir):
    tmp_path, config, manifest = workdir
    out1 = tmp_path / "orig"
    assert main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--out", str(out1)]) == 0
    resolved = out1 / "config.resolved.json"
    out2 = tmp_path / "rerun"
    assert main(["pretrain", "--config", str(resolved), "--manifest", str(manifest),
                 "--out", str(out2)]) == 0
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()


def test_missing_manifest_fails_cleanly(workdir, capsys):
    tmp_path, config, _ = workdir
    code = main(["pretrain", "--config", str(config), "--manifest",
                 str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cache_dir_env_override(workdir, monkeypatch):
    tmp_path, config, manifest = workdir
    cache = tmp_path / "env_cache"
    monkeypatch.setenv("AUDIOCLUST_CACHE_DIR", str(cache))
    out = tmp_path / "cached_run"
    assert main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--out", str(out)]) == 0
    assert len(list(cache.glob("*.npy"))) == 4  # one mel per train clip
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["data"]["cache_dir"] == str(cache)


def test_dump_plans_flag(workdir):
    tmp_path, config, manifest = workdir
    out = tmp_path / "plans_run"
    assert main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                 "--out", str(out), "--dump-plans"]) == 0
    plans = sorted((out / "plans").glob("epoch_*.json"))
    assert len(plans) == 2  # max_epochs in the test config
    plan = json.loads(plans[0].read_text())
    assert plan["batch_size"] == 4
    assert len(plan["batches"]) == plan["epoch_length"]
    flat = [i for batch in plan["batches"] for i in batch]
    assert all(0 <= i < 4 for i in flat)
