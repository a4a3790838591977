"""Parameter, FLOP, and communication ledgers.

Counting conventions (per sample, forward pass):

* conv2d:     2 * k^2 * C_in * C_out * H_out * W_out   (2 FLOPs per multiply-accumulate)
* linear:     2 * d_in * d_out
* batchnorm:  4 per element (subtract mean, multiply inv-std, scale, shift)
* relu:       1 per element
* max/avgpool: k^2 per output element
* flatten:    0

A backward pass is charged as 2x the forward pass, so one local training
step costs 3x forward per sample. Under a channel-keep map (layer name ->
binary vector over that layer's output channels) all counts shrink
structurally: a dropped output channel removes its filter, bias, and
normalization entries, and the matching input slices of every later layer.
Absolute FLOP figures are convention-relative; comparisons in this package
therefore use ratios between models counted under the same convention.

The :class:`RoundLedger` collects one row per (round, task) with fixed
columns and exports byte-stable CSV/JSON; wall-clock timings are kept out
of those files so identical re-runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import LayerSpec, output_shape
from .errors import UsageError

ChannelKeep = Mapping[str, np.ndarray]

CSV_HEADER = ("round", "framework", "task", "accuracy", "uplink_params", "downlink_params", "flops")


def _kept(layer_name: str, channels: int, channel_keep: ChannelKeep | None) -> int:
    if channel_keep is None or layer_name not in channel_keep:
        return channels
    keep = np.asarray(channel_keep[layer_name])
    if keep.size != channels:
        raise UsageError(
            f"channel keep vector for {layer_name!r} has {keep.size} entries, layer has {channels}")
    return int(np.count_nonzero(keep))


def count_params(layers: Sequence[LayerSpec], channel_keep: ChannelKeep | None = None,
                 input_shape: tuple[int, ...] | None = None) -> int:
    """Trainable parameter count, structurally reduced under a channel-keep map."""
    if channel_keep is None:
        return sum(int(np.prod(shape)) for layer in layers
                   for shape in layer.param_shapes().values())
    if input_shape is None:
        raise UsageError("input_shape is required when counting under a channel-keep map")
    total = 0
    shape = tuple(input_shape)
    in_kept = shape[0]  # the input itself is never pruned
    for layer in layers:
        if layer.kind == "conv2d":
            out_kept = _kept(layer.name, layer.out_channels, channel_keep)
            total += out_kept * in_kept * layer.kernel_size ** 2
            if layer.bias:
                total += out_kept
            in_kept = out_kept
        elif layer.kind == "linear":
            out_kept = _kept(layer.name, layer.out_features, channel_keep)
            total += out_kept * in_kept
            if layer.bias:
                total += out_kept
            in_kept = out_kept
        elif layer.kind == "batchnorm":
            total += 2 * in_kept
        elif layer.kind == "flatten":
            per_channel = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            in_kept = in_kept * per_channel
        shape = output_shape(layer, shape)
    return total


def count_flops(layers: Sequence[LayerSpec], input_shape: tuple[int, ...],
                channel_keep: ChannelKeep | None = None) -> int:
    """Forward FLOPs for one sample under the documented conventions."""
    total = 0
    shape = tuple(input_shape)
    in_kept = shape[0]
    for layer in layers:
        out_shape = output_shape(layer, shape)
        if layer.kind == "conv2d":
            out_kept = _kept(layer.name, layer.out_channels, channel_keep)
            _, ho, wo = out_shape
            total += 2 * layer.kernel_size ** 2 * in_kept * out_kept * ho * wo
            in_kept = out_kept
        elif layer.kind == "linear":
            out_kept = _kept(layer.name, layer.out_features, channel_keep)
            total += 2 * in_kept * out_kept
            in_kept = out_kept
        elif layer.kind == "batchnorm":
            spatial = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            total += 4 * in_kept * spatial
        elif layer.kind == "relu":
            spatial = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            total += in_kept * spatial
        elif layer.kind in ("maxpool", "avgpool"):
            _, ho, wo = out_shape
            total += layer.kernel_size ** 2 * in_kept * ho * wo
        elif layer.kind == "flatten":
            per_channel = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            in_kept = in_kept * per_channel
        shape = out_shape
    return total


def training_flops(layers: Sequence[LayerSpec], input_shape: tuple[int, ...],
                   samples: int, epochs: int, channel_keep: ChannelKeep | None = None) -> int:
    """Local-training cost: forward + backward (2x forward) per sample per epoch."""
    return 3 * count_flops(layers, input_shape, channel_keep) * samples * epochs


@dataclass(frozen=True)
class TaskRoundStats:
    """One task's share of a round: test accuracy and traffic/compute totals."""

    accuracy: float
    uplink_params: int
    downlink_params: int
    flops: int

    def __post_init__(self) -> None:
        if self.uplink_params < 0 or self.downlink_params < 0 or self.flops < 0:
            raise UsageError("ledger quantities must be nonnegative")


@dataclass(frozen=True)
class LedgerRow:
    round: int
    framework: str
    task: int
    accuracy: float
    uplink_params: int
    downlink_params: int
    flops: int


class RoundLedger:
    """Append-only per-round, per-task record of accuracy and resource use."""

    def __init__(self) -> None:
        self._rows: list[LedgerRow] = []
        self._wall_clock: list[tuple[int, float]] = []

    @property
    def rows(self) -> tuple[LedgerRow, ...]:
        return tuple(self._rows)

    def record_round(self, round_idx: int, framework: str,
                     stats_by_task: Mapping[int, TaskRoundStats],
                     wall_clock: float = 0.0) -> None:
        if not stats_by_task:
            raise UsageError("a round must report at least one task")
        for task in sorted(stats_by_task):
            s = stats_by_task[task]
            self._rows.append(LedgerRow(round_idx, framework, task, s.accuracy,
                                        s.uplink_params, s.downlink_params, s.flops))
        self._wall_clock.append((round_idx, wall_clock))

    def to_csv_bytes(self) -> bytes:
        """Fixed-header CSV; deterministic bytes for identical recorded rows."""
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self._rows:
            writer.writerow([r.round, r.framework, r.task, repr(r.accuracy),
                             r.uplink_params, r.downlink_params, r.flops])
        return buf.getvalue().encode("utf-8")

    def export_csv(self, path) -> None:
        if not self._rows:
            raise UsageError("cannot export an empty ledger")
        with open(path, "wb") as fh:
            fh.write(self.to_csv_bytes())

    def summary(self) -> dict:
        """Final-round accuracy per (framework, task) plus traffic/compute totals."""
        if not self._rows:
            raise UsageError("cannot summarize an empty ledger")
        final_acc: dict[str, dict[str, float]] = {}
        totals: dict[str, dict[str, int]] = {}
        last_round: dict[tuple[str, int], float] = {}
        for r in self._rows:
            last_round[(r.framework, r.task)] = r.accuracy
            t = totals.setdefault(r.framework, {"uplink_params": 0, "downlink_params": 0, "flops": 0})
            t["uplink_params"] += r.uplink_params
            t["downlink_params"] += r.downlink_params
            t["flops"] += r.flops
        for (framework, task), acc in last_round.items():
            final_acc.setdefault(framework, {})[str(task)] = acc
        return {
            "rounds": max(r.round for r in self._rows),
            "row_count": len(self._rows),
            "final_accuracy": final_acc,
            "totals": totals,
        }

    def export_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def wall_clock_seconds(self) -> list[dict[str, float]]:
        """Per-round timings; reported in the run manifest, never in the CSV."""
        return [{"round": idx, "seconds": sec} for idx, sec in self._wall_clock]
