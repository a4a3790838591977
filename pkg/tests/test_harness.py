"""Run orchestration: dataset resolution, pre-training, artifacts, sweeps."""

from __future__ import annotations

import csv
import json
import struct

import numpy as np
import pytest

from fedlps import harness
from fedlps.config import ExperimentConfig, TaskSpec, default_tasks
from fedlps.data import PartitionPlan
from fedlps.errors import ConfigurationError, ProtocolError, UsageError
from fedlps.harness import (
    build_partitions,
    build_profiles,
    pretrain_backbone,
    pretrain_pool,
    resolve_dataset,
    resolve_datasets,
    run_experiment,
    run_one,
    sweep,
)
from fedlps.model import BackboneModel
from fedlps.serialize import load_checkpoint
from fedlps.util import rng_for

ARTIFACTS = ["checkpoint.bin", "ledger.csv", "partitions.json", "summary.json"]


def idx_bytes(array: np.ndarray) -> bytes:
    header = bytes([0, 0, 0x08, array.ndim])
    for dim in array.shape:
        header += struct.pack(">I", dim)
    return header + array.astype(np.uint8).tobytes()


def tiny_config(**changes) -> ExperimentConfig:
    """One round, two clients, two tasks: finishes in well under a second."""
    base = dict(rounds=1, clients=2, epochs=1, pretrain_epochs=1, batch_size=32,
                lr=0.1, tasks=default_tasks(2), seeds=(0,))
    base.update(changes)
    return ExperimentConfig(**base)


class TestDatasetResolution:
    def test_synthetic_data_is_reproducible(self):
        spec = default_tasks(1)[0]
        first, second = resolve_dataset(spec), resolve_dataset(spec)
        assert first.images.tobytes() == second.images.tobytes()
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_different_tasks_get_different_data(self):
        a, b = (resolve_dataset(TaskSpec(name, classes=6)) for name in ("u", "v"))
        assert a.images.tobytes() != b.images.tobytes()

    def test_relative_idx_paths_use_data_dir(self, tmp_path, monkeypatch):
        images = np.zeros((4, 6, 6), dtype=np.uint8)
        labels = np.array([0, 1, 0, 1], dtype=np.uint8)
        (tmp_path / "img.idx").write_bytes(idx_bytes(images))
        (tmp_path / "lab.idx").write_bytes(idx_bytes(labels))
        monkeypatch.setenv(harness.DATA_DIR_ENV, str(tmp_path))
        ds = resolve_dataset(TaskSpec("digits", kind="idx", images="img.idx",
                                      labels="lab.idx"))
        assert ds.images.shape == (4, 1, 6, 6)

    def test_tasks_must_share_sample_shape(self, tmp_path, monkeypatch):
        (tmp_path / "img.idx").write_bytes(idx_bytes(np.zeros((4, 6, 6), np.uint8)))
        (tmp_path / "lab.idx").write_bytes(idx_bytes(np.array([0, 1, 0, 1], np.uint8)))
        monkeypatch.setenv(harness.DATA_DIR_ENV, str(tmp_path))
        config = tiny_config(tasks=(
            TaskSpec("blobs", classes=6),
            TaskSpec("digits", kind="idx", images="img.idx", labels="lab.idx")))
        with pytest.raises(ConfigurationError, match="sample shape"):
            resolve_datasets(config)

    def test_dataset_classes_must_fit_head_slice(self, tmp_path, monkeypatch):
        (tmp_path / "img.idx").write_bytes(idx_bytes(np.zeros((6, 28, 28), np.uint8)))
        (tmp_path / "lab.idx").write_bytes(idx_bytes(np.arange(6, dtype=np.uint8)))
        monkeypatch.setenv(harness.DATA_DIR_ENV, str(tmp_path))
        config = tiny_config(tasks=(
            TaskSpec("digits", kind="idx", classes=4, images="img.idx",
                     labels="lab.idx"),))
        with pytest.raises(ConfigurationError, match="reserves only 4"):
            resolve_datasets(config)


class TestPretrainPool:
    def test_pools_public_splits_with_offset_labels(self):
        config = tiny_config()
        datasets = resolve_datasets(config)
        pool_x, pool_y = pretrain_pool(config, datasets)
        publics = sum(datasets[t].public_idx.size for t in datasets)
        assert pool_x.shape[0] == publics == pool_y.shape[0]
        first = datasets[0].public_idx.size
        assert set(np.unique(pool_y[:first])) <= set(range(0, 6))
        assert set(np.unique(pool_y[first:])) <= set(range(6, 14))

    def test_dedicated_pretrain_tasks_use_train_splits(self):
        config = tiny_config(
            tasks=(TaskSpec("main", classes=4),),
            pretrain_tasks=(TaskSpec("p1", classes=2, per_class=10),
                            TaskSpec("p2", classes=2, per_class=10)))
        datasets = resolve_datasets(config)
        pool_x, pool_y = pretrain_pool(config, datasets)
        per_task_train = 2 * (10 - 2 - 2)  # per class: 10 minus test 2, public 2
        assert pool_x.shape[0] == 2 * per_task_train
        assert set(np.unique(pool_y[:per_task_train])) == {0, 1}
        assert set(np.unique(pool_y[per_task_train:])) == {2, 3}


class TestPretrainBackbone:
    def test_deterministic_for_seed(self):
        config = tiny_config(pretrain_epochs=2)
        datasets = resolve_datasets(config)
        one = pretrain_backbone(config, datasets, seed=3)
        two = pretrain_backbone(config, datasets, seed=3)
        assert one.provenance == "pretrained"
        assert one.weights.keys() == two.weights.keys()
        for key in one.weights:
            assert one.weights[key].tobytes() == two.weights[key].tobytes()

    def test_zero_epochs_returns_fresh_initialization(self):
        config = tiny_config(pretrain_epochs=0)
        datasets = resolve_datasets(config)
        trained = pretrain_backbone(config, datasets, seed=5)
        fresh = BackboneModel.fresh(config.build_backbone_layers(), (1, 28, 28),
                                    rng_for(5, "backbone-init"))
        for key in fresh.weights:
            assert trained.weights[key].tobytes() == fresh.weights[key].tobytes()

    def test_pool_shape_must_match_tasks(self):
        config = tiny_config(
            tasks=(TaskSpec("main", classes=4),),
            pretrain_tasks=(TaskSpec("aux", classes=4, image_shape=(1, 14, 14)),))
        datasets = resolve_datasets(config)
        with pytest.raises(ConfigurationError, match="shape"):
            pretrain_backbone(config, datasets, seed=0)


class TestPartitionsAndProfiles:
    def test_iid_shards_cover_train_split(self):
        config = tiny_config()
        datasets = resolve_datasets(config)
        plans = build_partitions(config, datasets, seed=0)
        for t, ds in datasets.items():
            merged = np.sort(np.concatenate(plans[t].shards))
            np.testing.assert_array_equal(merged, np.sort(ds.train_idx))

    def test_alpha_selects_partition_method(self):
        config = tiny_config()
        datasets = resolve_datasets(config)
        assert build_partitions(config, datasets, 0)[0].method == "lda"
        iid = tiny_config(alpha=None)
        assert build_partitions(iid, datasets, 0)[0].method == "iid"

    def test_profiles_offset_labels_and_assign_levels(self):
        config = tiny_config(alpha=None)
        datasets = resolve_datasets(config)
        plans = build_partitions(config, datasets, seed=0)
        profiles = build_profiles(config, datasets, plans)
        assert [p.level for p in profiles] == [1, 2]
        for profile in profiles:
            assert set(np.unique(profile.shards[0].labels)) <= set(range(0, 6))
            assert set(np.unique(profile.shards[1].labels)) <= set(range(6, 14))

    def test_empty_shard_is_skipped(self):
        config = tiny_config()
        datasets = resolve_datasets(config)
        empty = PartitionPlan(datasets[0].name, "iid", 0.0, 0,
                              (np.array([], dtype=np.int64), np.arange(5)))
        full = build_partitions(config, datasets, seed=0)[1]
        profiles = build_profiles(config, datasets, {0: empty, 1: full})
        assert 0 not in profiles[0].shards
        assert 1 in profiles[0].shards


class TestRunOne:
    def test_writes_all_artifacts(self, tmp_path):
        config = tiny_config()
        result = run_one(config, 0, tmp_path)
        assert result["status"] == "ok"
        for name in ARTIFACTS + ["manifest.json"]:
            assert (tmp_path / name).exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["framework"] == "fedlps"
        assert manifest["config_digest"] == config.digest()
        assert manifest["artifacts"] == ARTIFACTS
        assert len(manifest["round_wall_clock"]) == config.rounds
        assert manifest["elapsed_seconds"] > 0

    @pytest.mark.parametrize("framework", ["fedavg", "feddrop", "overlap"])
    def test_every_baseline_framework_completes(self, framework, tmp_path):
        result = run_one(tiny_config(framework=framework), 0, tmp_path)
        assert result["status"] == "ok"
        assert framework in result["summary"]["final_accuracy"]

    def test_ledger_bytes_reproduce_for_same_seed(self, tmp_path):
        config = tiny_config(rounds=2)
        run_one(config, 0, tmp_path / "a")
        run_one(config, 0, tmp_path / "b")
        assert ((tmp_path / "a" / "ledger.csv").read_bytes()
                == (tmp_path / "b" / "ledger.csv").read_bytes())
        assert ((tmp_path / "a" / "summary.json").read_bytes()
                == (tmp_path / "b" / "summary.json").read_bytes())

    def test_checkpoint_round_trips(self, tmp_path):
        run_one(tiny_config(rounds=2), 0, tmp_path)
        state = load_checkpoint(tmp_path / "checkpoint.bin")
        assert state.round_idx == 2
        assert state.split_fraction == 0.25
        assert sorted(state.predictors) == [0, 1]
        assert set(state.masks) == {(c, t) for c in range(2) for t in range(2)}

    def test_baseline_checkpoint_stores_full_network(self, tmp_path):
        run_one(tiny_config(framework="fedavg"), 0, tmp_path)
        state = load_checkpoint(tmp_path / "checkpoint.bin")
        assert state.split_fraction == 0.0
        head = {k for k in state.predictors[0] if k.startswith("conv1")}
        assert head  # predictors span the whole network, encoder included

    def test_midrun_failure_marks_manifest_and_reraises(self, tmp_path, monkeypatch):
        real = harness.run_round
        boom = ProtocolError("upload rejected")

        def flaky(round_idx, *args, **kwargs):
            if round_idx >= 2:
                raise boom
            return real(round_idx, *args, **kwargs)

        monkeypatch.setattr(harness, "run_round", flaky)
        with pytest.raises(ProtocolError) as excinfo:
            run_one(tiny_config(rounds=3), 0, tmp_path)
        assert excinfo.value is boom
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert "upload rejected" in manifest["error"]
        with open(tmp_path / "ledger.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["round"] for r in rows} == {"1"}  # partial ledger flushed


class TestRunExperiment:
    def test_single_seed_writes_in_place(self, tmp_path):
        config = tiny_config(output_dir=str(tmp_path / "solo"))
        run_experiment(config)
        assert (tmp_path / "solo" / "manifest.json").exists()

    def test_multiple_seeds_get_subdirectories(self, tmp_path):
        config = tiny_config(seeds=(0, 1), output_dir=str(tmp_path / "multi"))
        results = run_experiment(config)
        assert [r["seed"] for r in results] == [0, 1]
        for seed in (0, 1):
            assert (tmp_path / "multi" / f"seed{seed}" / "manifest.json").exists()


class TestSweep:
    def test_full_grid_writes_cells_and_comparison(self, tmp_path):
        manifest = sweep(tiny_config(), ["fedlps", "fedavg"], [0.5, None], [0],
                         tmp_path)
        assert len(manifest["cells"]) == 4
        names = {c["name"] for c in manifest["cells"]}
        assert names == {"fedlps-alpha0.5-s0", "fedlps-iid-s0",
                         "fedavg-alpha0.5-s0", "fedavg-iid-s0"}
        for name in names:
            assert (tmp_path / name / "manifest.json").exists()
        with open(tmp_path / "comparison.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 * 2  # framework x partition cells, two tasks each
        assert json.loads((tmp_path / "sweep.json").read_text())["grid"]["seeds"] == [0]

    def test_mean_matches_recomputation_from_ledgers(self, tmp_path):
        seeds = [0, 1, 2]
        sweep(tiny_config(rounds=2), ["fedlps"], [None], seeds, tmp_path)
        finals: dict[str, list[float]] = {}
        for seed in seeds:
            with open(tmp_path / f"fedlps-iid-s{seed}" / "ledger.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    if row["round"] == "2":
                        finals.setdefault(row["task"], []).append(float(row["accuracy"]))
        with open(tmp_path / "comparison.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                values = finals[row["task"]]
                assert int(row["seed_count"]) == len(seeds)
                assert float(row["mean_final_accuracy"]) == sum(values) / len(values)

    def test_empty_grid_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="empty"):
            sweep(tiny_config(), [], [0.5], [0], tmp_path)

    def test_duplicate_frameworks_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="duplicate"):
            sweep(tiny_config(), ["fedlps", "fedlps"], [0.5], [0], tmp_path)

    def test_failed_cell_is_marked_and_others_proceed(self, tmp_path, monkeypatch):
        def always_fails(round_idx, *args, **kwargs):
            raise ProtocolError("poison")

        monkeypatch.setattr(harness, "run_round", always_fails)
        manifest = sweep(tiny_config(), ["fedlps", "fedavg"], [None], [0], tmp_path)
        by_fw = {c["framework"]: c for c in manifest["cells"]}
        assert by_fw["fedlps"]["status"] == "failed"
        assert "poison" in by_fw["fedlps"]["error"]
        assert by_fw["fedavg"]["status"] == "ok"
        content = (tmp_path / "comparison.csv").read_text()
        assert "fedavg" in content and "fedlps" not in content
