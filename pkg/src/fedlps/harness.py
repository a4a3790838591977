"""Experiment orchestration: data, pre-training, federated rounds, artifacts.

A run proceeds dataset resolution → backbone pre-training on the pooled
public splits → per-task client partitioning → federated rounds → artifact
export. Every artifact that feeds comparisons (the round ledger CSV) is
byte-deterministic for a given (config, seed); wall-clock timings go to the
manifest only.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import RoundLedger
from .config import ExperimentConfig, TaskSpec
from .data import Dataset, PartitionPlan, export_plans, load_idx, partition_iid, partition_lda, synth_dataset
from .engine import backward, cross_entropy, forward, sgd_step
from .errors import ConfigurationError, FedLPSError, UsageError
from .federation import (
    ClientProfile,
    TaskShard,
    TrainSettings,
    assign_level,
    baseline_fedavg_round,
    baseline_feddrop_round,
    baseline_overlap_round,
    run_round,
)
from .model import BackboneModel, split_backbone
from .serialize import CheckpointState, save_checkpoint
from .util import rng_for

DATA_DIR_ENV = "FEDLPS_DATA_DIR"

LEDGER_NAME = "ledger.csv"
SUMMARY_NAME = "summary.json"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.bin"
PARTITIONS_NAME = "partitions.json"


def _resolve_path(path_str: str) -> Path:
    path = Path(path_str)
    if not path.is_absolute():
        base = os.environ.get(DATA_DIR_ENV)
        if base:
            path = Path(base) / path
    return path


def resolve_dataset(spec: TaskSpec) -> Dataset:
    """Materialize one task's dataset from its spec.

    Synthetic data is generated from the task name alone, so the same roster
    yields the same datasets run after run and seed after seed — replicate
    seeds vary partitioning and training, not the data, mirroring how fixed
    benchmark datasets are reused across repeats.
    """
    if spec.kind == "synthetic":
        return synth_dataset(spec.name, spec.classes, spec.per_class, spec.image_shape,
                             seed=0, margin=spec.margin, noise=spec.noise,
                             upsample=spec.upsample,
                             test_fraction=spec.test_fraction,
                             public_fraction=spec.public_fraction)
    return load_idx(_resolve_path(spec.images), _resolve_path(spec.labels), spec.name,
                    seed=0, test_fraction=spec.test_fraction,
                    public_fraction=spec.public_fraction)


def resolve_datasets(config: ExperimentConfig) -> dict[int, Dataset]:
    datasets = {t: resolve_dataset(spec) for t, spec in enumerate(config.tasks)}
    shapes = {ds.sample_shape for ds in datasets.values()}
    if len(shapes) > 1:
        raise ConfigurationError(f"tasks disagree on sample shape: {sorted(shapes)}")
    for t, spec in enumerate(config.tasks):
        if datasets[t].class_count > spec.classes:
            raise ConfigurationError(
                f"task {spec.name!r}: dataset has {datasets[t].class_count} classes "
                f"but its task spec reserves only {spec.classes} head outputs")
    return datasets


def pretrain_pool(config: ExperimentConfig, datasets: dict[int, Dataset]):
    """Assemble the pre-training pool (images, shifted labels).

    Without dedicated pretrain tasks, this pools every task's public split,
    each shifted into its head slice. With dedicated specs, their train
    splits are pooled instead and the slices are dealt out in spec order.
    """
    xs, ys = [], []
    if config.pretrain_tasks is None:
        offsets = config.label_offsets()
        for t, spec in enumerate(config.tasks):
            ds = datasets[t]
            images, labels = ds.subset(ds.public_idx)
            xs.append(images)
            ys.append(labels + offsets[spec.name])
    else:
        offset = 0
        for spec in config.pretrain_tasks:
            ds = resolve_dataset(spec)
            images, labels = ds.subset(ds.train_idx)
            xs.append(images)
            ys.append(labels + offset)
            offset += spec.classes
    return np.concatenate(xs), np.concatenate(ys)


def pretrain_backbone(config: ExperimentConfig, datasets: dict[int, Dataset],
                      seed: int) -> BackboneModel:
    """Train the full backbone on the pre-training pool."""
    layers = config.build_backbone_layers()
    pool_x, pool_y = pretrain_pool(config, datasets)
    input_shape = tuple(pool_x.shape[1:])
    task_shape = datasets[min(datasets)].sample_shape
    if input_shape != task_shape:
        raise ConfigurationError(
            f"pretrain data shape {input_shape} differs from task shape {task_shape}")

    model = BackboneModel.fresh(layers, input_shape, rng_for(seed, "backbone-init"))
    params = dict(model.weights)
    n = pool_x.shape[0]
    batch = config.pretrain_batch_size
    for epoch in range(config.pretrain_epochs):
        if batch >= n:
            order = np.arange(n)
        else:
            order = rng_for(seed, "pretrain", epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits, tape = forward(layers, params, pool_x[idx])
            _, dlogits = cross_entropy(logits, pool_y[idx])
            grads = backward(tape, dlogits)
            params = sgd_step(params, grads, config.pretrain_lr, config.weight_decay)
    return BackboneModel(layers, params, input_shape, provenance="pretrained")


def build_partitions(config: ExperimentConfig, datasets: dict[int, Dataset],
                     seed: int) -> dict[int, PartitionPlan]:
    plans: dict[int, PartitionPlan] = {}
    for t, ds in datasets.items():
        if config.alpha is None:
            plans[t] = partition_iid(ds, config.clients, seed)
        else:
            plans[t] = partition_lda(ds, config.clients, config.alpha, seed)
    return plans


def build_profiles(config: ExperimentConfig, datasets: dict[int, Dataset],
                   plans: dict[int, PartitionPlan]) -> list[ClientProfile]:
    offsets = config.label_offsets()
    ratios = {int(k): float(v) for k, v in config.level_ratios.items()}
    profiles = []
    for client in range(config.clients):
        shards: dict[int, TaskShard] = {}
        for t, spec in enumerate(config.tasks):
            idx = plans[t].shards[client]
            if idx.size == 0:
                continue
            images, labels = datasets[t].subset(idx)
            shards[t] = TaskShard(t, images, labels + offsets[spec.name])
        profiles.append(ClientProfile(client, assign_level(client), shards,
                                      ratios=ratios))
    return profiles


def build_test_sets(config: ExperimentConfig,
                    datasets: dict[int, Dataset]) -> dict[int, tuple]:
    offsets = config.label_offsets()
    tests = {}
    for t, spec in enumerate(config.tasks):
        images, labels = datasets[t].subset(datasets[t].test_idx)
        tests[t] = (images, labels + offsets[spec.name])
    return tests


def _train_settings(config: ExperimentConfig) -> TrainSettings:
    return TrainSettings(epochs=config.epochs, lr=config.lr,
                         weight_decay=config.weight_decay,
                         batch_size=config.batch_size,
                         participation=config.participation,
                         recovery_source=config.recovery_source,
                         cache_embeddings=config.cache_embeddings)


def _write_manifest(out_dir: Path, config: ExperimentConfig, seed: int, status: str,
                    ledger: RoundLedger, elapsed: float, error: str | None = None) -> None:
    manifest = {
        "status": status,
        "framework": config.framework,
        "seed": seed,
        "version": __version__,
        "config_digest": config.digest(),
        "config": config.to_dict(),
        "elapsed_seconds": elapsed,
        "round_wall_clock": ledger.wall_clock_seconds(),
        "artifacts": sorted(p.name for p in out_dir.iterdir() if p.name != MANIFEST_NAME),
    }
    if error is not None:
        manifest["error"] = error
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_one(config: ExperimentConfig, seed: int, out_dir) -> dict:
    """Execute one (config, seed) cell and write its artifacts.

    Returns a small result record; on mid-run failure the partial ledger is
    flushed, the manifest is marked failed, and the error is re-raised.
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    datasets = resolve_datasets(config)
    backbone = pretrain_backbone(config, datasets, seed)
    plans = build_partitions(config, datasets, seed)
    profiles = build_profiles(config, datasets, plans)
    test_sets = build_test_sets(config, datasets)
    settings = _train_settings(config)
    tasks = sorted(test_sets)

    if config.framework == "fedlps":
        encoder, template = split_backbone(backbone, config.split_fraction)
        backbone_predictor = {k: v.copy() for k, v in template.params.items()}
        globals_ = {t: {k: v.copy() for k, v in template.params.items()} for t in tasks}
        checkpoint_fraction = config.split_fraction
    else:
        globals_ = {t: {k: v.copy() for k, v in backbone.weights.items()} for t in tasks}
        checkpoint_fraction = 0.0

    ledger = RoundLedger()
    status, error, failure = "ok", None, None
    try:
        for round_idx in range(1, config.rounds + 1):
            round_started = time.perf_counter()
            if config.framework == "fedlps":
                globals_, stats, _ = run_round(round_idx, profiles, encoder, template,
                                               globals_, backbone_predictor, test_sets,
                                               settings, seed)
            elif config.framework == "fedavg":
                globals_, stats, _ = baseline_fedavg_round(
                    round_idx, profiles, backbone.layers, backbone.input_shape,
                    globals_, test_sets, settings, seed)
            elif config.framework == "feddrop":
                globals_, stats, _ = baseline_feddrop_round(
                    round_idx, profiles, backbone.layers, backbone.input_shape,
                    globals_, test_sets, settings, seed)
            else:
                globals_, stats, _ = baseline_overlap_round(
                    round_idx, profiles, backbone.layers, backbone.input_shape,
                    globals_, test_sets, settings, seed)
            ledger.record_round(round_idx, config.framework, stats,
                                wall_clock=time.perf_counter() - round_started)
    except FedLPSError as exc:
        status, error, failure = "failed", str(exc), exc

    if ledger.rows:
        ledger.export_csv(out_path / LEDGER_NAME)
        ledger.export_summary(out_path / SUMMARY_NAME)
    export_plans({config.tasks[t].name: plans[t] for t in plans}, out_path / PARTITIONS_NAME)
    masks = {(p.client_id, t): mask for p in profiles for t, mask in p.masks.items()}
    save_checkpoint(out_path / CHECKPOINT_NAME,
                    CheckpointState(ledger.rows[-1].round if ledger.rows else 0,
                                    backbone, checkpoint_fraction, globals_, masks))
    elapsed = time.perf_counter() - started
    _write_manifest(out_path, config, seed, status, ledger, elapsed, error)
    if failure is not None:
        raise failure
    return {"status": status, "seed": seed, "out_dir": str(out_path),
            "summary": ledger.summary() if ledger.rows else None}


def run_experiment(config: ExperimentConfig) -> list[dict]:
    """Run every seed in the config; per-seed artifact directories when several."""
    results = []
    base = Path(config.output_dir)
    for seed in config.seeds:
        out_dir = base if len(config.seeds) == 1 else base / f"seed{seed}"
        results.append(run_one(config, seed, out_dir))
    return results


# ---------------------------------------------------------------------------
# Sweeps


def _partition_tag(alpha: float | None) -> str:
    return "iid" if alpha is None else f"alpha{alpha:g}"


def sweep(base: ExperimentConfig, frameworks: list[str], alphas: list[float | None],
          seeds: list[int], output_dir) -> dict:
    """One run per (framework, partition, seed) cell plus a merged comparison.

    A failing cell is marked in the sweep manifest and skipped in the means;
    remaining cells still run. The comparison CSV reports, for each
    (framework, partition, task), the mean final-round accuracy over the
    seeds that completed.
    """
    if not frameworks or not alphas or not seeds:
        raise UsageError("sweep grid is empty: needs >= 1 framework, partition, and seed")
    if len(set(frameworks)) != len(frameworks):
        raise UsageError(f"duplicate frameworks in grid: {frameworks}")
    out_root = Path(output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    cells = []
    for framework in frameworks:
        for alpha in alphas:
            for seed in seeds:
                tag = _partition_tag(alpha)
                name = f"{framework}-{tag}-s{seed}"
                cfg = base.replace(framework=framework, alpha=alpha, seeds=(seed,),
                                   output_dir=str(out_root / name))
                record = {"name": name, "framework": framework, "partition": tag,
                          "seed": seed}
                try:
                    result = run_one(cfg, seed, out_root / name)
                    record["status"] = "ok"
                    record["final_accuracy"] = result["summary"]["final_accuracy"][framework]
                except FedLPSError as exc:
                    record["status"] = "failed"
                    record["error"] = str(exc)
                cells.append(record)

    lines = ["framework,partition,task,seed_count,mean_final_accuracy"]
    groups: dict[tuple[str, str], list[dict]] = {}
    for record in cells:
        if record["status"] == "ok":
            groups.setdefault((record["framework"], record["partition"]), []).append(record)
    for (framework, tag) in sorted(groups):
        members = groups[(framework, tag)]
        task_names = sorted({task for m in members for task in m["final_accuracy"]},
                            key=int)
        for task in task_names:
            values = [m["final_accuracy"][task] for m in members if task in m["final_accuracy"]]
            mean = sum(values) / len(values)
            lines.append(f"{framework},{tag},{task},{len(values)},{mean!r}")
    comparison = "\n".join(lines) + "\n"
    with open(out_root / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(comparison)
    manifest = {"cells": cells, "version": __version__,
                "grid": {"frameworks": frameworks,
                         "partitions": [_partition_tag(a) for a in alphas],
                         "seeds": seeds}}
    with open(out_root / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
