"""Federated round execution: client training, recovery, aggregation, baselines.

Main protocol, per round: the server sends every selected client the dense
global predictor of each task; the client applies its channel mask, encodes
its whole shard through the frozen shared encoder once, runs masked SGD over
the embeddings, and uploads the sparse predictor. The server recovers each
upload to dense form — masked positions are filled from the backbone
predictor (or, behind a switch, from the previous round's global) — then
averages per task with shard-size weights normalized over this round's
participants.

Baselines train one full model per task with no encoder sharing:

* ``fedavg``:   only level-1 (full-capability) clients participate, dense.
* ``feddrop``:  every client trains the same compact model, pruned at the
                highest ratio present in the population; aggregation is the
                plain weighted average, so the global stays compact.
* ``overlap``:  every client trains under its own capability-level mask;
                each position is averaged only over the clients whose mask
                kept it (weights renormalized among the keepers), and
                positions kept by no one retain the previous global value.

Capability levels 1..5 map to pruning ratios 0.0, 0.2, 0.4, 0.6, 0.8.
Masks are built once, in the first round, from the initial (pre-trained)
model's channel scores, and reused verbatim afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting, engine
from .accounting import TaskRoundStats
from .engine import ParameterTree, Tensor
from .errors import AggregationError, ConfigurationError, FedLPSError, ProtocolError
from .model import EncoderView, Predictor, encode
from .pruning import ChannelMask, apply_mask, build_mask, channel_importance, mask_gradients
from .util import rng_for

LEVEL_RATIOS = {1: 0.0, 2: 0.2, 3: 0.4, 4: 0.6, 5: 0.8}

GlobalPredictors = dict[int, ParameterTree]


@dataclass(frozen=True)
class TaskShard:
    """One client's local data for one task."""

    task: int
    images: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


@dataclass
class ClientProfile:
    """A simulated device: capability level, per-task shards, per-task masks."""

    client_id: int
    level: int
    shards: dict[int, TaskShard]
    masks: dict[int, ChannelMask] = field(default_factory=dict)
    embedding_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    ratios: dict[int, float] | None = None  # None -> LEVEL_RATIOS

    def __post_init__(self) -> None:
        table = self.ratios if self.ratios is not None else LEVEL_RATIOS
        if self.level not in table:
            raise ConfigurationError(
                f"client {self.client_id}: capability level must be one of "
                f"{sorted(table)}, got {self.level}")

    @property
    def rho(self) -> float:
        table = self.ratios if self.ratios is not None else LEVEL_RATIOS
        return table[self.level]


def assign_level(client_id: int) -> int:
    """Round-robin capability assignment over the five levels."""
    return (client_id % 5) + 1


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 5
    lr: float = 0.001
    weight_decay: float = 0.001
    batch_size: int = 64
    participation: float = 1.0
    recovery_source: str = "backbone"  # or "previous_global"
    cache_embeddings: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("learning rate and batch size must be positive")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigurationError("participation must lie in (0, 1]")
        if self.recovery_source not in ("backbone", "previous_global"):
            raise ConfigurationError(
                f"unknown recovery source {self.recovery_source!r}")


@dataclass
class RoundState:
    """Server-side record of one round's uploads."""

    round_idx: int
    selected: tuple[int, ...]
    received: dict[tuple[int, int], ParameterTree]
    backbone_predictor: ParameterTree
    failures: dict[int, str] = field(default_factory=dict)
    skipped: tuple[tuple[int, int], ...] = ()


# ---------------------------------------------------------------------------
# Client side


def _train_one_task(layers, params: ParameterTree, mask: ChannelMask, inputs: Tensor,
                    labels: np.ndarray, settings: TrainSettings,
                    shuffle_rng_tags: tuple) -> ParameterTree:
    """Masked SGD over one shard. Full-shard batches run unshuffled."""
    m = inputs.shape[0]
    w = params
    for epoch in range(settings.epochs):
        if settings.batch_size >= m:
            order = np.arange(m)
        else:
            rng = rng_for(*shuffle_rng_tags, epoch)
            order = rng.permutation(m)
        for start in range(0, m, settings.batch_size):
            batch_idx = order[start:start + settings.batch_size]
            logits, tape = engine.forward(layers, w, inputs[batch_idx])
            _, dlogits = engine.cross_entropy(logits, labels[batch_idx])
            grads = mask_gradients(engine.backward(tape, dlogits), mask)
            w = engine.sgd_step(w, grads, settings.lr, settings.weight_decay)
    return w


def local_train(profile: ClientProfile, encoder: EncoderView, template: Predictor,
                incoming: GlobalPredictors, settings: TrainSettings, round_idx: int,
                seed: int) -> tuple[dict[int, ParameterTree], list[int]]:
    """One client's round: mask, encode shard, train; returns (updates, skipped tasks).

    In the first round the client builds its channel mask from the incoming
    (pre-trained) predictor's scores and registers it for all later rounds.
    """
    updates: dict[int, ParameterTree] = {}
    skipped: list[int] = []
    for task in sorted(incoming):
        shard = profile.shards.get(task)
        if shard is None or shard.size == 0:
            skipped.append(task)
            continue
        pred = Predictor(template.layers, {k: v.copy() for k, v in incoming[task].items()},
                         task, template.input_shape)
        if task not in profile.masks:
            profile.masks[task] = build_mask(channel_importance(pred), profile.rho,
                                             client=profile.client_id, task=task)
        mask = profile.masks[task]
        working = apply_mask(pred, mask)
        if settings.cache_embeddings and task in profile.embedding_cache:
            emb = profile.embedding_cache[task]
        else:
            emb = encode(encoder, shard.images)
            if settings.cache_embeddings:
                profile.embedding_cache[task] = emb
        updates[task] = _train_one_task(
            template.layers, working.params, mask, emb, shard.labels, settings,
            (seed, "local", round_idx, profile.client_id, task))
    return updates, skipped


# ---------------------------------------------------------------------------
# Server side


def recover(received: ParameterTree, mask: ChannelMask,
            backbone_predictor: ParameterTree) -> ParameterTree:
    """Fill masked positions from the backbone: out = received + backbone*(1 - M)."""
    out: ParameterTree = {}
    for key, backbone_value in backbone_predictor.items():
        if key not in received:
            raise ProtocolError(
                f"client {mask.client} task {mask.task}: upload missing tensor {key!r}")
        got = received[key]
        if got.shape != backbone_value.shape:
            raise ProtocolError(
                f"client {mask.client} task {mask.task}: tensor {key!r} has shape "
                f"{got.shape}, expected {backbone_value.shape}")
        m = mask.elements.get(key)
        if m is None:
            out[key] = got.copy()
            continue
        if np.any(got[m == 0.0] != 0.0):
            raise ProtocolError(
                f"client {mask.client} task {mask.task}: upload has nonzeros at "
                f"masked positions of {key!r}")
        out[key] = got + backbone_value * (1.0 - m)
    return out


def aggregate_task(recovered: dict[int, ParameterTree],
                   shard_sizes: dict[int, int]) -> ParameterTree:
    """Shard-size-weighted average over this round's participants."""
    if not recovered:
        raise AggregationError("no participants to aggregate")
    participants = sorted(recovered)
    total = sum(shard_sizes[c] for c in participants)
    if total <= 0:
        raise AggregationError("total shard size is zero; cannot form weights")
    reference = recovered[participants[0]]
    out: ParameterTree = {key: np.zeros_like(value) for key, value in reference.items()}
    for client in participants:
        tree = recovered[client]
        if tree.keys() != reference.keys():
            raise AggregationError(f"client {client}: tree structure differs from cohort")
        weight = shard_sizes[client] / total
        for key in out:
            out[key] += weight * tree[key]
    return out


def overlap_aggregate(received: dict[int, ParameterTree], masks: dict[int, ChannelMask],
                      shard_sizes: dict[int, int],
                      previous: ParameterTree) -> ParameterTree:
    """Positionwise average over only the clients whose mask kept each position.

    Weights are renormalized among the keepers of a position; positions kept
    by no participant retain the previous global value.
    """
    if not received:
        raise AggregationError("no participants to aggregate")
    participants = sorted(received)
    out: ParameterTree = {}
    for key, prev_value in previous.items():
        numerator = np.zeros_like(prev_value)
        denominator = np.zeros_like(prev_value)
        for client in participants:
            m = masks[client].elements.get(key)
            keep = m if m is not None else np.ones_like(prev_value)
            numerator += shard_sizes[client] * keep * received[client][key]
            denominator += shard_sizes[client] * keep
        covered = denominator > 0
        merged = prev_value.copy()
        merged[covered] = numerator[covered] / denominator[covered]
        out[key] = merged
    return out


def evaluate(layers, params: ParameterTree, images: np.ndarray, labels: np.ndarray,
             encoder: EncoderView | None = None) -> float:
    """Top-1 accuracy; inputs pass through the frozen encoder when given."""
    x = encode(encoder, images) if encoder is not None else images
    logits, _ = engine.forward(layers, params, x)
    return float((logits.argmax(axis=1) == labels).mean())


def select_participants(profiles: list[ClientProfile], participation: float,
                        round_idx: int, seed: int) -> list[ClientProfile]:
    if participation >= 1.0:
        return sorted(profiles, key=lambda p: p.client_id)
    k = max(1, round(participation * len(profiles)))
    rng = rng_for(seed, "participation", round_idx)
    ids = sorted(p.client_id for p in profiles)
    chosen = set(rng.choice(ids, size=k, replace=False).tolist())
    return sorted((p for p in profiles if p.client_id in chosen), key=lambda p: p.client_id)


def _verify_upload(profile: ClientProfile, task: int, tree: ParameterTree) -> None:
    mask = profile.masks[task]
    for key, m in mask.elements.items():
        if np.any(tree[key][m == 0.0] != 0.0):
            raise ProtocolError(
                f"client {profile.client_id} task {task}: upload violates its mask at {key!r}")


def run_round(round_idx: int, profiles: list[ClientProfile], encoder: EncoderView,
              template: Predictor, globals_: GlobalPredictors,
              backbone_predictor: ParameterTree, test_sets: dict[int, tuple[np.ndarray, np.ndarray]],
              settings: TrainSettings, seed: int,
              ) -> tuple[GlobalPredictors, dict[int, TaskRoundStats], RoundState]:
    """One full round of the parameter-sharing protocol."""
    if round_idx < 1:
        raise ConfigurationError("round index starts at 1")
    selected = select_participants(profiles, settings.participation, round_idx, seed)
    state = RoundState(round_idx, tuple(p.client_id for p in selected), {},
                       backbone_predictor)
    skipped: list[tuple[int, int]] = []
    for profile in selected:
        try:
            updates, missing = local_train(profile, encoder, template, globals_,
                                           settings, round_idx, seed)
        except FedLPSError as exc:
            state.failures[profile.client_id] = str(exc)
            continue
        for task in missing:
            skipped.append((profile.client_id, task))
        for task, tree in updates.items():
            _verify_upload(profile, task, tree)
            state.received[(profile.client_id, task)] = tree
    state.skipped = tuple(skipped)

    contributors = [p for p in selected if p.client_id not in state.failures]
    new_globals: GlobalPredictors = {}
    stats: dict[int, TaskRoundStats] = {}
    dense_size = accounting.count_params(template.layers)
    encoder_flops = accounting.count_flops(encoder.layers, encoder.input_shape)
    for task in sorted(globals_):
        recovered: dict[int, ParameterTree] = {}
        sizes: dict[int, int] = {}
        uplink = 0
        flops = 0
        for profile in contributors:
            key = (profile.client_id, task)
            if key not in state.received:
                continue
            mask = profile.masks[task]
            source = backbone_predictor if settings.recovery_source == "backbone" \
                else globals_[task]
            recovered[profile.client_id] = recover(state.received[key], mask, source)
            shard = profile.shards[task]
            sizes[profile.client_id] = shard.size
            uplink += mask.transmitted_params()
            flops += shard.size * encoder_flops
            flops += accounting.training_flops(template.layers, template.input_shape,
                                               shard.size, settings.epochs,
                                               channel_keep=mask.channel_keep)
        if recovered:
            new_globals[task] = aggregate_task(recovered, sizes)
        else:
            new_globals[task] = {k: v.copy() for k, v in globals_[task].items()}
        test_x, test_y = test_sets[task]
        accuracy = evaluate(template.layers, new_globals[task], test_x, test_y,
                            encoder=encoder)
        downlink = dense_size * len(selected)
        stats[task] = TaskRoundStats(accuracy, uplink, downlink, flops)
    return new_globals, stats, state


# ---------------------------------------------------------------------------
# Baselines (full model per task, no encoder sharing)


def _ensure_baseline_mask(profile: ClientProfile, task: int, layers, input_shape,
                          initial: ParameterTree, rho: float) -> ChannelMask:
    if task not in profile.masks:
        pred = Predictor(layers, {k: v.copy() for k, v in initial.items()}, task, input_shape)
        profile.masks[task] = build_mask(channel_importance(pred), rho,
                                         client=profile.client_id, task=task)
    return profile.masks[task]


def _baseline_round(round_idx: int, participants: list[ClientProfile], layers,
                    input_shape: tuple[int, ...], globals_: GlobalPredictors,
                    test_sets: dict[int, tuple[np.ndarray, np.ndarray]],
                    settings: TrainSettings, seed: int, rho_for, aggregate,
                    downlink_for) -> tuple[GlobalPredictors, dict[int, TaskRoundStats], RoundState]:
    state = RoundState(round_idx, tuple(p.client_id for p in participants), {}, {})
    skipped: list[tuple[int, int]] = []
    for profile in participants:
        for task in sorted(globals_):
            shard = profile.shards.get(task)
            if shard is None or shard.size == 0:
                skipped.append((profile.client_id, task))
                continue
            mask = _ensure_baseline_mask(profile, task, layers, input_shape,
                                         globals_[task], rho_for(profile))
            working = {k: v.copy() for k, v in globals_[task].items()}
            working = apply_mask(Predictor(layers, working, task, input_shape), mask).params
            try:
                tree = _train_one_task(layers, working, mask, shard.images, shard.labels,
                                       settings,
                                       (seed, "local", round_idx, profile.client_id, task))
            except FedLPSError as exc:
                state.failures[profile.client_id] = str(exc)
                break
            state.received[(profile.client_id, task)] = tree
    state.skipped = tuple(skipped)

    contributors = [p for p in participants if p.client_id not in state.failures]
    new_globals: GlobalPredictors = {}
    stats: dict[int, TaskRoundStats] = {}
    for task in sorted(globals_):
        received: dict[int, ParameterTree] = {}
        sizes: dict[int, int] = {}
        masks: dict[int, ChannelMask] = {}
        uplink = 0
        flops = 0
        for profile in contributors:
            key = (profile.client_id, task)
            if key not in state.received:
                continue
            mask = profile.masks[task]
            received[profile.client_id] = state.received[key]
            masks[profile.client_id] = mask
            sizes[profile.client_id] = profile.shards[task].size
            uplink += mask.transmitted_params()
            flops += accounting.training_flops(layers, input_shape,
                                               profile.shards[task].size, settings.epochs,
                                               channel_keep=mask.channel_keep)
        if received:
            new_globals[task] = aggregate(received, masks, sizes, globals_[task])
        else:
            new_globals[task] = {k: v.copy() for k, v in globals_[task].items()}
        test_x, test_y = test_sets[task]
        accuracy = evaluate(layers, new_globals[task], test_x, test_y)
        downlink = downlink_for(task, participants, masks)
        stats[task] = TaskRoundStats(accuracy, uplink, downlink, flops)
    return new_globals, stats, state


def baseline_fedavg_round(round_idx: int, profiles: list[ClientProfile], layers,
                          input_shape: tuple[int, ...], globals_: GlobalPredictors,
                          test_sets: dict[int, tuple[np.ndarray, np.ndarray]],
                          settings: TrainSettings, seed: int):
    """Dense training restricted to the full-capability (level-1) clients."""
    participants = sorted((p for p in profiles if p.level == 1), key=lambda p: p.client_id)
    if not participants:
        raise AggregationError("no level-1 clients available for dense training")
    participants = select_participants(participants, settings.participation, round_idx, seed)
    dense_size = accounting.count_params(layers)

    def aggregate(received, masks, sizes, previous):
        return aggregate_task(received, sizes)

    def downlink_for(task, selected, masks):
        return dense_size * len(selected)

    return _baseline_round(round_idx, participants, layers, input_shape, globals_,
                           test_sets, settings, seed, rho_for=lambda p: 0.0,
                           aggregate=aggregate, downlink_for=downlink_for)


def baseline_feddrop_round(round_idx: int, profiles: list[ClientProfile], layers,
                           input_shape: tuple[int, ...], globals_: GlobalPredictors,
                           test_sets: dict[int, tuple[np.ndarray, np.ndarray]],
                           settings: TrainSettings, seed: int):
    """Uniform compact model: every client prunes at the highest ratio present."""
    participants = select_participants(profiles, settings.participation, round_idx, seed)
    rho = max(p.rho for p in profiles)

    def aggregate(received, masks, sizes, previous):
        return aggregate_task(received, sizes)

    def downlink_for(task, selected, masks):
        if masks:
            compact = next(iter(masks.values())).transmitted_params()
        else:
            compact = accounting.count_params(layers)
        return compact * len(selected)

    return _baseline_round(round_idx, participants, layers, input_shape, globals_,
                           test_sets, settings, seed, rho_for=lambda p: rho,
                           aggregate=aggregate, downlink_for=downlink_for)


def baseline_overlap_round(round_idx: int, profiles: list[ClientProfile], layers,
                           input_shape: tuple[int, ...], globals_: GlobalPredictors,
                           test_sets: dict[int, tuple[np.ndarray, np.ndarray]],
                           settings: TrainSettings, seed: int):
    """Per-level masks with intersection-style aggregation over kept positions."""
    participants = select_participants(profiles, settings.participation, round_idx, seed)

    def aggregate(received, masks, sizes, previous):
        return overlap_aggregate(received, masks, sizes, previous)

    def downlink_for(task, selected, masks):
        return sum(m.transmitted_params() for m in masks.values())

    return _baseline_round(round_idx, participants, layers, input_shape, globals_,
                           test_sets, settings, seed,
                           rho_for=lambda p: p.rho,
                           aggregate=aggregate, downlink_for=downlink_for)
