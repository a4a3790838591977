"""Backbone models and their split into a frozen encoder plus task predictors.

A backbone is a flat layer stack with one parameter tree. Splitting at
``n = ceil(fraction * N)`` yields an :class:`EncoderView` over the first
``n`` layers — whose weights are copied once and frozen (write-protected) —
and a :class:`Predictor` template over the remaining ``N - n`` layers,
initialized from the backbone tail. One deep-copied predictor is then
instantiated per task; predictors never share storage with each other or
with the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import LayerSpec, ParameterTree, Tensor
from .errors import ConfigurationError, StructuralError
from .util import tree_digest

PROVENANCE_TAGS = ("fresh", "pretrained")


def _check_weights_cover(layers: tuple[LayerSpec, ...], weights: ParameterTree, owner: str) -> None:
    for layer in layers:
        for local, shape in layer.param_shapes().items():
            key = f"{layer.name}.{local}"
            if key not in weights:
                raise ConfigurationError(f"{owner}: missing weight {key!r}")
            if weights[key].shape != shape:
                raise ConfigurationError(
                    f"{owner}: weight {key!r} has shape {weights[key].shape}, expected {shape}")


@dataclass
class BackboneModel:
    """Full N-layer model (N >= 2) with its weights and provenance tag."""

    layers: tuple[LayerSpec, ...]
    weights: ParameterTree
    input_shape: tuple[int, ...]
    provenance: str = "fresh"

    def __post_init__(self) -> None:
        self.layers = tuple(self.layers)
        self.input_shape = tuple(self.input_shape)
        if len(self.layers) < 2:
            raise ConfigurationError(f"backbone needs at least 2 layers, got {len(self.layers)}")
        if self.provenance not in PROVENANCE_TAGS:
            raise ConfigurationError(f"unknown provenance tag {self.provenance!r}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique within a backbone")
        _check_weights_cover(self.layers, self.weights, "backbone")
        engine.model_output_shape(self.layers, self.input_shape)  # validates stack

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @classmethod
    def fresh(cls, layers: list[LayerSpec] | tuple[LayerSpec, ...],
              input_shape: tuple[int, ...], rng: np.random.Generator) -> "BackboneModel":
        weights = engine.init_params(layers, rng)
        return cls(tuple(layers), weights, tuple(input_shape), provenance="fresh")


@dataclass(frozen=True)
class EncoderView:
    """Frozen view over the first n backbone layers; weights are read-only."""

    layers: tuple[LayerSpec, ...]
    weights: ParameterTree
    input_shape: tuple[int, ...]
    digest: str

    @property
    def frozen(self) -> bool:
        return True

    @property
    def embedding_shape(self) -> tuple[int, ...]:
        return engine.model_output_shape(self.layers, self.input_shape)

    def check_unchanged(self) -> None:
        """Raise StructuralError if the frozen weights were somehow altered."""
        if tree_digest(self.weights) != self.digest:
            raise StructuralError("encoder weights changed after freezing")


@dataclass
class Predictor:
    """Task-specific head over the backbone tail, with its own weight storage."""

    layers: tuple[LayerSpec, ...]
    params: ParameterTree
    task: int
    input_shape: tuple[int, ...]

    def __post_init__(self) -> None:
        self.layers = tuple(self.layers)
        self.input_shape = tuple(self.input_shape)
        _check_weights_cover(self.layers, self.params, f"predictor for task {self.task}")

    def copy(self, task: int | None = None) -> "Predictor":
        return Predictor(self.layers, {k: v.copy() for k, v in self.params.items()},
                         self.task if task is None else task, self.input_shape)


def split_point(layer_count: int, fraction: float) -> int:
    """n = ceil(fraction * N); must leave both sides nonempty."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"split fraction must lie in (0, 1), got {fraction}")
    n = math.ceil(fraction * layer_count)
    if n < 1 or n >= layer_count:
        raise ConfigurationError(
            f"split fraction {fraction} gives n={n} for a {layer_count}-layer backbone; "
            "both encoder and predictor must be nonempty")
    return n


def split_backbone(backbone: BackboneModel, fraction: float) -> tuple[EncoderView, Predictor]:
    """Split into (frozen encoder over layers [0,n), predictor template over [n,N))."""
    n = split_point(backbone.layer_count, fraction)
    enc_layers = backbone.layers[:n]
    pred_layers = backbone.layers[n:]
    enc_weights: ParameterTree = {}
    for layer in enc_layers:
        for key in layer.param_keys():
            frozen = backbone.weights[key].copy()
            frozen.flags.writeable = False
            enc_weights[key] = frozen
    encoder = EncoderView(enc_layers, enc_weights, backbone.input_shape,
                          digest=tree_digest(enc_weights))
    emb_shape = encoder.embedding_shape
    pred_params = {key: backbone.weights[key].copy()
                   for layer in pred_layers for key in layer.param_keys()}
    template = Predictor(pred_layers, pred_params, task=-1, input_shape=emb_shape)
    return encoder, template


def encode(encoder: EncoderView, batch: Tensor) -> Tensor:
    """Embedding of ``batch`` through the frozen encoder layers."""
    out, _ = engine.forward(encoder.layers, encoder.weights, batch)
    return out


def instantiate_predictors(template: Predictor, tasks: list[int] | tuple[int, ...]) -> dict[int, Predictor]:
    """One deep-copied predictor per task; mutating one never affects another."""
    if not tasks:
        raise ConfigurationError("task set must be nonempty")
    return {task: template.copy(task=task) for task in tasks}
