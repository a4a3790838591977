"""Channel scoring, mask construction, and element-wise mask application.

Channels are scored by the L1 norm of their filter weights. A mask at ratio
``rho`` drops the ``floor(rho * C)`` lowest-scoring output channels of each
prunable (conv/linear) layer — ties broken by pruning the lowest channel
index first — except the final prunable layer, which is never pruned so the
class count survives. The channel decision is expanded to an element mask
over every trainable tensor: a dropped output channel zeroes its filter
slice, its bias entry, its normalization scale/shift, and the matching
input slices of the next prunable layer (through flatten, one channel
becomes a contiguous block of features).

Masks are built once per client/task from the initial predictor weights and
reused verbatim every round; re-applying a mask is idempotent. During local
training, gradients are masked the same way so masked weights stay exactly
zero (see :func:`mask_gradients`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import accounting
from .engine import LayerSpec, ParameterTree, output_shape
from .errors import ConfigurationError, StructuralError, UsageError
from .model import Predictor

PRUNABLE_KINDS = ("conv2d", "linear")


def prunable_layers(layers: tuple[LayerSpec, ...]) -> list[LayerSpec]:
    return [layer for layer in layers if layer.kind in PRUNABLE_KINDS]


def _out_channels(layer: LayerSpec) -> int:
    return layer.out_channels if layer.kind == "conv2d" else layer.out_features


@dataclass(frozen=True)
class ImportanceScores:
    """Per-output-channel L1 scores for every prunable layer of a predictor."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    scores: dict[str, np.ndarray]


@dataclass(frozen=True)
class ChannelMask:
    """Binary channel decisions plus their element-level expansion.

    ``channel_keep`` maps every prunable layer to a {0,1} vector over its
    output channels (all ones for the exempt final layer); ``elements`` maps
    every trainable parameter key to a same-shaped {0,1} array ready for
    element-wise multiplication.
    """

    client: int
    task: int
    rho: float
    channel_keep: dict[str, np.ndarray]
    elements: dict[str, np.ndarray]
    exempt: tuple[str, ...]

    def transmitted_params(self) -> int:
        """Nonzero parameters a client uploads under this mask."""
        return int(sum(int(m.sum()) for m in self.elements.values()))

    def digest_equal(self, other: "ChannelMask") -> bool:
        if self.channel_keep.keys() != other.channel_keep.keys():
            return False
        return all(np.array_equal(self.channel_keep[k], other.channel_keep[k])
                   for k in self.channel_keep)


def channel_importance(predictor: Predictor) -> ImportanceScores:
    """L1 norm of each output channel's weights, per prunable layer."""
    scores: dict[str, np.ndarray] = {}
    for layer in predictor.layers:
        if layer.kind not in PRUNABLE_KINDS:
            continue
        w = predictor.params[f"{layer.name}.weight"]
        axes = tuple(range(1, w.ndim))
        scores[layer.name] = np.abs(w).sum(axis=axes)
    if not scores:
        raise StructuralError("predictor has no prunable (conv/linear) layer to score")
    return ImportanceScores(predictor.layers, predictor.input_shape, scores)


def select_channels(score_vector: np.ndarray, rho: float) -> np.ndarray:
    """Keep vector dropping the floor(rho*C) smallest scores, lowest index first."""
    if not 0.0 <= rho < 1.0:
        raise ConfigurationError(f"pruning ratio must lie in [0, 1), got {rho}")
    scores = np.asarray(score_vector, dtype=np.float64)
    c = scores.size
    drop = math.floor(rho * c)
    if drop >= c:
        raise ConfigurationError(f"pruning ratio {rho} would empty a {c}-channel layer")
    keep = np.ones(c, dtype=np.uint8)
    order = np.argsort(scores, kind="stable")  # stable sort = lowest index first on ties
    keep[order[:drop]] = 0
    return keep


def expand_elements(layers: tuple[LayerSpec, ...], input_shape: tuple[int, ...],
                    channel_keep: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Walk the layer stack turning channel decisions into per-tensor masks."""
    elements: dict[str, np.ndarray] = {}
    shape = tuple(input_shape)
    in_keep = np.ones(shape[0], dtype=np.float64)
    for layer in layers:
        if layer.kind == "conv2d":
            out_keep = _keep_for(layer, channel_keep)
            k = layer.kernel_size
            w_mask = (out_keep[:, None, None, None] * in_keep[None, :, None, None]
                      * np.ones((1, 1, k, k)))
            elements[f"{layer.name}.weight"] = w_mask
            if layer.bias:
                elements[f"{layer.name}.bias"] = out_keep.copy()
            in_keep = out_keep
        elif layer.kind == "linear":
            out_keep = _keep_for(layer, channel_keep)
            elements[f"{layer.name}.weight"] = out_keep[:, None] * in_keep[None, :]
            if layer.bias:
                elements[f"{layer.name}.bias"] = out_keep.copy()
            in_keep = out_keep
        elif layer.kind == "batchnorm":
            elements[f"{layer.name}.scale"] = in_keep.copy()
            elements[f"{layer.name}.shift"] = in_keep.copy()
        elif layer.kind == "flatten":
            per_channel = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            in_keep = np.repeat(in_keep, per_channel)
        shape = output_shape(layer, shape)
    return elements


def _keep_for(layer: LayerSpec, channel_keep: dict[str, np.ndarray]) -> np.ndarray:
    c = _out_channels(layer)
    if layer.name not in channel_keep:
        return np.ones(c, dtype=np.float64)
    keep = np.asarray(channel_keep[layer.name], dtype=np.float64)
    if keep.size != c:
        raise StructuralError(
            f"keep vector for {layer.name!r} has {keep.size} entries, layer has {c} channels")
    return keep


def build_mask(scores: ImportanceScores, rho: float, client: int = -1,
               task: int = -1) -> ChannelMask:
    """Channel mask at ratio rho; the final prunable layer is always exempt."""
    prunable = prunable_layers(scores.layers)
    exempt = (prunable[-1].name,) if prunable else ()
    channel_keep: dict[str, np.ndarray] = {}
    for layer in prunable:
        if layer.name in exempt:
            channel_keep[layer.name] = np.ones(_out_channels(layer), dtype=np.uint8)
        else:
            channel_keep[layer.name] = select_channels(scores.scores[layer.name], rho)
    elements = expand_elements(scores.layers, scores.input_shape, channel_keep)
    return ChannelMask(client=client, task=task, rho=rho,
                       channel_keep=channel_keep, elements=elements, exempt=exempt)


def apply_mask(predictor: Predictor, mask: ChannelMask) -> Predictor:
    """w' = w * M element-wise; masked positions zero, kept positions bit-unchanged."""
    if mask.task != predictor.task:
        raise UsageError(
            f"mask owned by task {mask.task} applied to predictor for task {predictor.task}")
    new_params: ParameterTree = {}
    for key, w in predictor.params.items():
        m = mask.elements.get(key)
        if m is None:
            new_params[key] = w.copy()
            continue
        if m.shape != w.shape:
            raise StructuralError(
                f"mask for {key!r} has shape {m.shape}, parameter has shape {w.shape}")
        new_params[key] = w * m
    return Predictor(predictor.layers, new_params, predictor.task, predictor.input_shape)


def mask_gradients(gradients: ParameterTree, mask: ChannelMask) -> ParameterTree:
    """Zero gradient entries at masked positions so masked weights stay frozen at 0."""
    out: ParameterTree = {}
    for key, g in gradients.items():
        m = mask.elements.get(key)
        if m is not None and m.shape != g.shape:
            raise StructuralError(
                f"mask for {key!r} has shape {m.shape}, gradient has shape {g.shape}")
        out[key] = g * m if m is not None else g
    return out


def effective_counts(predictor: Predictor, mask: ChannelMask) -> tuple[int, int]:
    """(parameter count, forward FLOPs per sample) with pruned channels removed."""
    params = accounting.count_params(predictor.layers, channel_keep=mask.channel_keep,
                                     input_shape=predictor.input_shape)
    flops = accounting.count_flops(predictor.layers, predictor.input_shape,
                                   channel_keep=mask.channel_keep)
    return params, flops
