"""Dense float64 layer engine: forward/backward passes and plain SGD.

Models are flat sequences of :class:`LayerSpec`. Parameters live in a
"parameter tree": an insertion-ordered ``dict`` mapping ``"<layer>.<param>"``
to a float64 array. :func:`forward` returns the output plus a
:class:`GradientTape` holding everything :func:`backward` needs; a tape is
consumed by exactly one backward pass.

Everything is float64 and single-threaded per model instance; identical
inputs always give bit-identical outputs and gradients. All operations keep
finite inputs finite (softmax is computed via a shifted log-sum-exp, batch
normalization carries an epsilon under the square root).

Supported layer kinds: conv2d, linear, relu, maxpool, avgpool, flatten,
batchnorm. Batch normalization is per-batch only (no running statistics):
it normalizes with the statistics of whatever batch it is given and applies
a learnable per-channel scale and shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, StructuralError, UsageError

Tensor = np.ndarray
ParameterTree = dict[str, np.ndarray]

LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool", "avgpool", "flatten", "batchnorm")
TRAINABLE_KINDS = ("conv2d", "linear", "batchnorm")
PRUNABLE_KINDS = ("conv2d", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """Declaration of one layer; hyperparameters are kind-specific.

    conv2d: in_channels, out_channels, kernel_size, stride, padding, bias
    linear: in_features, out_features, bias
    maxpool/avgpool: kernel_size (window and stride; remainder rows/cols are cropped)
    batchnorm: num_features, eps
    relu/flatten: no hyperparameters
    """

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    num_features: int = 0
    bias: bool = True
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r} for layer {self.name!r}")
        if not self.name:
            raise ConfigurationError("layer name must be nonempty")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1 or self.kernel_size < 1:
                raise ConfigurationError(f"conv2d layer {self.name!r} needs positive channels and kernel size")
            if self.stride < 1 or self.padding < 0:
                raise ConfigurationError(f"conv2d layer {self.name!r} has invalid stride/padding")
        elif self.kind == "linear":
            if self.in_features < 1 or self.out_features < 1:
                raise ConfigurationError(f"linear layer {self.name!r} needs positive feature sizes")
        elif self.kind in ("maxpool", "avgpool"):
            if self.kernel_size < 1:
                raise ConfigurationError(f"pool layer {self.name!r} needs positive kernel size")
        elif self.kind == "batchnorm":
            if self.num_features < 1:
                raise ConfigurationError(f"batchnorm layer {self.name!r} needs positive num_features")
            if self.eps <= 0:
                raise ConfigurationError(f"batchnorm layer {self.name!r} needs eps > 0")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Local parameter name -> shape. Empty for non-trainable kinds."""
        if self.kind == "conv2d":
            shapes = {"weight": (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)}
            if self.bias:
                shapes["bias"] = (self.out_channels,)
            return shapes
        if self.kind == "linear":
            shapes = {"weight": (self.out_features, self.in_features)}
            if self.bias:
                shapes["bias"] = (self.out_features,)
            return shapes
        if self.kind == "batchnorm":
            return {"scale": (self.num_features,), "shift": (self.num_features,)}
        return {}

    def param_keys(self) -> list[str]:
        return [f"{self.name}.{local}" for local in self.param_shapes()]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "conv2d":
            d.update(in_channels=self.in_channels, out_channels=self.out_channels,
                     kernel_size=self.kernel_size, stride=self.stride,
                     padding=self.padding, bias=self.bias)
        elif self.kind == "linear":
            d.update(in_features=self.in_features, out_features=self.out_features, bias=self.bias)
        elif self.kind in ("maxpool", "avgpool"):
            d.update(kernel_size=self.kernel_size)
        elif self.kind == "batchnorm":
            d.update(num_features=self.num_features, eps=self.eps)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


def conv2d(name: str, in_channels: int, out_channels: int, kernel_size: int,
           stride: int = 1, padding: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", name, in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding, bias=bias)


def linear(name: str, in_features: int, out_features: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("linear", name, in_features=in_features, out_features=out_features, bias=bias)


def relu(name: str) -> LayerSpec:
    return LayerSpec("relu", name)


def maxpool(name: str, kernel_size: int) -> LayerSpec:
    return LayerSpec("maxpool", name, kernel_size=kernel_size)


def avgpool(name: str, kernel_size: int) -> LayerSpec:
    return LayerSpec("avgpool", name, kernel_size=kernel_size)


def flatten(name: str) -> LayerSpec:
    return LayerSpec("flatten", name)


def batchnorm(name: str, num_features: int, eps: float = 1e-5) -> LayerSpec:
    return LayerSpec("batchnorm", name, num_features=num_features, eps=eps)


# ---------------------------------------------------------------------------
# Shape algebra


def output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of ``layer`` for a per-sample input shape.

    Raises StructuralError naming the layer when the input does not fit.
    """
    k = layer.kind
    if k == "conv2d":
        _expect_rank(layer, in_shape, 3)
        c, h, w = in_shape
        if c != layer.in_channels:
            raise StructuralError(
                f"layer {layer.name!r}: expected {layer.in_channels} input channels, got {c}")
        ho = (h + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"layer {layer.name!r}: kernel does not fit input {in_shape}")
        return (layer.out_channels, ho, wo)
    if k == "linear":
        _expect_rank(layer, in_shape, 1)
        if in_shape[0] != layer.in_features:
            raise StructuralError(
                f"layer {layer.name!r}: expected {layer.in_features} input features, got {in_shape[0]}")
        return (layer.out_features,)
    if k in ("maxpool", "avgpool"):
        _expect_rank(layer, in_shape, 3)
        c, h, w = in_shape
        ho, wo = h // layer.kernel_size, w // layer.kernel_size
        if ho < 1 or wo < 1:
            raise StructuralError(f"layer {layer.name!r}: pool window does not fit input {in_shape}")
        return (c, ho, wo)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "batchnorm":
        channels = in_shape[0]
        if channels != layer.num_features:
            raise StructuralError(
                f"layer {layer.name!r}: expected {layer.num_features} features, got {channels}")
        return in_shape
    return in_shape  # relu


def model_output_shape(layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for layer in layers:
        shape = output_shape(layer, shape)
    return shape


def _expect_rank(layer: LayerSpec, shape: tuple[int, ...], rank: int) -> None:
    if len(shape) != rank:
        raise StructuralError(
            f"layer {layer.name!r} ({layer.kind}) expects rank-{rank} samples, got shape {shape}")


# ---------------------------------------------------------------------------
# Initialization


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> ParameterTree:
    """Fan-in-scaled uniform weights, zero biases, identity batchnorm."""
    params: ParameterTree = {}
    for layer in layers:
        for local, shape in layer.param_shapes().items():
            key = f"{layer.name}.{local}"
            if local == "weight":
                if layer.kind == "conv2d":
                    fan_in = layer.in_channels * layer.kernel_size ** 2
                else:
                    fan_in = layer.in_features
                bound = 1.0 / math.sqrt(fan_in)
                params[key] = rng.uniform(-bound, bound, size=shape)
            elif local == "scale":
                params[key] = np.ones(shape)
            else:  # bias, shift
                params[key] = np.zeros(shape)
    return params


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class GradientTape:
    """Activation record of one forward pass; consumed by one backward pass."""

    layers: tuple[LayerSpec, ...]
    records: list[tuple]
    output_shape: tuple[int, ...]
    consumed: bool = False


def forward(layers: Sequence[LayerSpec], params: ParameterTree, batch: Tensor) -> tuple[Tensor, GradientTape]:
    """Run ``batch`` (leading batch axis) through the layer stack.

    Returns the output and the tape for :func:`backward`. Missing parameters
    raise ConfigurationError; shape mismatches raise StructuralError naming
    the layer.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2:
        raise StructuralError("batch must have a leading batch axis plus sample dimensions")
    records: list[tuple] = []
    for layer in layers:
        for key in layer.param_keys():
            if key not in params:
                raise ConfigurationError(f"missing parameter {key!r} for layer {layer.name!r}")
        out_shape = output_shape(layer, x.shape[1:])  # validates input
        x, record = _FORWARD[layer.kind](layer, params, x)
        records.append(record)
        if x.shape[1:] != out_shape:
            raise StructuralError(f"layer {layer.name!r}: produced {x.shape[1:]}, expected {out_shape}")
    return x, GradientTape(tuple(layers), records, x.shape)


def backward(tape: GradientTape, loss_grad: Tensor) -> ParameterTree:
    """Propagate d(loss)/d(output) back through the taped pass.

    Returns one gradient per trainable parameter, keyed and shaped like the
    parameter tree used in the forward pass.
    """
    if tape.consumed:
        raise UsageError("gradient tape already consumed; run a new forward pass")
    tape.consumed = True
    dy = np.asarray(loss_grad, dtype=np.float64)
    if dy.shape != tape.output_shape:
        raise StructuralError(
            f"loss gradient shape {dy.shape} does not match output shape {tape.output_shape}")
    grads: ParameterTree = {}
    for layer, record in zip(reversed(tape.layers), reversed(tape.records)):
        dy, layer_grads = _BACKWARD[layer.kind](layer, record, dy)
        for local, g in layer_grads.items():
            grads[f"{layer.name}.{local}"] = g
    # Re-key in layer order for a stable tree layout.
    ordered: ParameterTree = {}
    for layer in tape.layers:
        for key in layer.param_keys():
            ordered[key] = grads[key]
    return ordered


def _conv2d_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    b, c, h, w = x.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
    wmat = params[f"{layer.name}.weight"].reshape(layer.out_channels, c * k * k)
    out = cols @ wmat.T
    if layer.bias:
        out += params[f"{layer.name}.bias"]
    y = np.ascontiguousarray(out.reshape(b, ho, wo, layer.out_channels).transpose(0, 3, 1, 2))
    return y, (cols, wmat, x.shape, (ho, wo))


def _conv2d_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    cols, wmat, x_shape, (ho, wo) = record
    b, c, h, w = x_shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * ho * wo, layer.out_channels)
    grads = {"weight": (dy_mat.T @ cols).reshape(layer.out_channels, c, k, k)}
    if layer.bias:
        grads["bias"] = dy_mat.sum(axis=0)
    dcols = dy_mat @ wmat
    dwin = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dwin[:, :, :, :, ki, kj]
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, grads


def _linear_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    wmat = params[f"{layer.name}.weight"]
    out = x @ wmat.T
    if layer.bias:
        out += params[f"{layer.name}.bias"]
    return out, (x, wmat)


def _linear_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    x, wmat = record
    grads = {"weight": dy.T @ x}
    if layer.bias:
        grads["bias"] = dy.sum(axis=0)
    return dy @ wmat, grads


def _relu_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    mask = x > 0
    return x * mask, (mask,)


def _relu_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    (mask,) = record
    return dy * mask, {}


def _pool_view(x: Tensor, k: int) -> Tensor:
    """(B,C,H,W) -> (B,C,Ho,Wo,k*k) over non-overlapping windows, cropping remainders."""
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    xc = x[:, :, :ho * k, :wo * k]
    xr = xc.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    return xr.reshape(b, c, ho, wo, k * k)


def _maxpool_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    k = layer.kernel_size
    xr = _pool_view(x, k)
    idx = xr.argmax(axis=-1)  # first maximum wins: deterministic tie-break
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def _maxpool_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    idx, x_shape = record
    k = layer.kernel_size
    b, c, h, w = x_shape
    ho, wo = h // k, w // k
    dxr = np.zeros((b, c, ho, wo, k * k))
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    dxc = dxr.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    if ho * k == h and wo * k == w:
        return dxc, {}
    dx = np.zeros(x_shape)
    dx[:, :, :ho * k, :wo * k] = dxc
    return dx, {}


def _avgpool_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    xr = _pool_view(x, layer.kernel_size)
    return xr.mean(axis=-1), (x.shape,)


def _avgpool_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    (x_shape,) = record
    k = layer.kernel_size
    b, c, h, w = x_shape
    ho, wo = h // k, w // k
    spread = np.broadcast_to(dy[..., None, None] / (k * k), (b, c, ho, wo, k, k))
    dxc = spread.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    if ho * k == h and wo * k == w:
        return np.ascontiguousarray(dxc), {}
    dx = np.zeros(x_shape)
    dx[:, :, :ho * k, :wo * k] = dxc
    return dx, {}


def _flatten_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    return x.reshape(x.shape[0], -1), (x.shape,)


def _flatten_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    (x_shape,) = record
    return dy.reshape(x_shape), {}


def _batchnorm_forward(layer: LayerSpec, params: ParameterTree, x: Tensor) -> tuple[Tensor, tuple]:
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean) * inv_std
    scale = params[f"{layer.name}.scale"]
    shift = params[f"{layer.name}.shift"]
    if x.ndim == 4:
        y = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    else:
        y = xhat * scale + shift
    return y, (xhat, inv_std, scale, axes)


def _batchnorm_backward(layer: LayerSpec, record: tuple, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    xhat, inv_std, scale, axes = record
    m = float(np.prod([dy.shape[a] for a in axes]))
    dshift = dy.sum(axis=axes)
    dscale = (dy * xhat).sum(axis=axes)
    if dy.ndim == 4:
        dxhat = dy * scale[None, :, None, None]
    else:
        dxhat = dy * scale
    sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (inv_std / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, {"scale": dscale, "shift": dshift}


_FORWARD = {
    "conv2d": _conv2d_forward,
    "linear": _linear_forward,
    "relu": _relu_forward,
    "maxpool": _maxpool_forward,
    "avgpool": _avgpool_forward,
    "flatten": _flatten_forward,
    "batchnorm": _batchnorm_forward,
}

_BACKWARD = {
    "conv2d": _conv2d_backward,
    "linear": _linear_backward,
    "relu": _relu_backward,
    "maxpool": _maxpool_backward,
    "avgpool": _avgpool_backward,
    "flatten": _flatten_backward,
    "batchnorm": _batchnorm_backward,
}


# ---------------------------------------------------------------------------
# Loss and optimizer


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[float, Tensor]:
    """Mean negative log-softmax of the true class, plus d(loss)/d(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise StructuralError(f"logits must be (batch, classes), got shape {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise InputError(f"labels must be one class index per row, got shape {y.shape}")
    n, k = logits.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), y].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def sgd_step(params: ParameterTree, gradients: ParameterTree,
             lr: float, weight_decay: float = 0.0) -> ParameterTree:
    """One step of w <- w - lr * (g + weight_decay * w); returns a new tree."""
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    if list(params.keys()) != list(gradients.keys()):
        raise UsageError("parameter and gradient trees have different structure")
    out: ParameterTree = {}
    for key, w in params.items():
        g = gradients[key]
        if g.shape != w.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {key!r} shape {w.shape}")
        out[key] = w - lr * (g + weight_decay * w)
    return out
