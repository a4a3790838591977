"""Self-describing binary container for backbones, checkpoints, and masks.

Layout (all integers little-endian):

    bytes 0-3    magic ``LPSC``
    bytes 4-7    format version (uint32, currently 1)
    bytes 8-15   header length H in bytes (uint64)
    bytes 16-..  UTF-8 JSON header (H bytes, canonical: sorted keys, no spaces)
    remainder    concatenated float64 tensor payloads, little-endian

The JSON header carries everything structural: the container kind
(``backbone`` or ``checkpoint``), layer tables, input shape, a ``tensors``
list of ``[name, shape]`` entries in payload order, and — for checkpoints —
the round index, split fraction, per-task predictor tensor names, and
per-owner channel masks. Channel decisions are stored as run-length-encoded
``[value, count]`` pairs over the channel bitset; element masks are
re-expanded on load, so mask round-trips are bit-exact by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .engine import LayerSpec, ParameterTree
from .errors import DataFormatError
from .model import BackboneModel, split_backbone
from .pruning import ChannelMask, expand_elements

MAGIC = b"LPSC"
VERSION = 1


def rle_encode(bits: np.ndarray) -> list[list[int]]:
    """[[value, run length], ...] over a 0/1 vector; empty input gives []."""
    values = np.asarray(bits).astype(np.int64).tolist()
    runs: list[list[int]] = []
    for v in values:
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def rle_decode(runs: list[list[int]]) -> np.ndarray:
    out: list[int] = []
    for value, count in runs:
        if count < 1 or value not in (0, 1):
            raise DataFormatError(f"invalid run-length pair [{value}, {count}]")
        out.extend([value] * count)
    return np.asarray(out, dtype=np.uint8)


def _pack(header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header_bytes)), header_bytes]
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack(raw: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated container header at byte {len(raw)}")
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0 (expected {MAGIC!r}, got {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version} at byte 4")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise DataFormatError(f"{path}: truncated JSON header at byte {len(raw)}")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable JSON header at byte 16: {exc}") from exc
    offset = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    for name, shape in header.get("tensors", []):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise DataFormatError(
                f"{path}: tensor {name!r} truncated at byte {offset} "
                f"(need {nbytes} bytes, have {len(raw) - offset})")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                      offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes at byte {offset}")
    return header, tensors


def save_backbone(path, backbone: BackboneModel) -> None:
    header = {
        "kind": "backbone",
        "provenance": backbone.provenance,
        "input_shape": list(backbone.input_shape),
        "layers": [layer.to_dict() for layer in backbone.layers],
    }
    tensors = [(key, backbone.weights[key]) for key in sorted(backbone.weights)]
    with open(path, "wb") as fh:
        fh.write(_pack(header, tensors))


def load_backbone(path) -> BackboneModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, tensors = _unpack(raw, path)
    if header.get("kind") != "backbone":
        raise DataFormatError(f"{path}: container holds {header.get('kind')!r}, not a backbone")
    layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
    return BackboneModel(layers, tensors, tuple(header["input_shape"]),
                         provenance=header["provenance"])


def _mask_key(client: int, task: int) -> str:
    return f"{client}:{task}"


@dataclass
class CheckpointState:
    """Everything needed to resume a run mid-stream.

    ``split_fraction`` 0.0 means the whole network is the trainable
    predictor (the dense/compact baselines); any other value is the
    encoder fraction the masks were built against.
    """

    round_idx: int
    backbone: BackboneModel
    split_fraction: float
    predictors: dict[int, ParameterTree]
    masks: dict[tuple[int, int], ChannelMask]


def save_checkpoint(path, state: CheckpointState) -> None:
    header = {
        "kind": "checkpoint",
        "round": state.round_idx,
        "split_fraction": state.split_fraction,
        "provenance": state.backbone.provenance,
        "input_shape": list(state.backbone.input_shape),
        "layers": [layer.to_dict() for layer in state.backbone.layers],
        "tasks": sorted(state.predictors),
        "masks": {
            _mask_key(client, task): {
                "client": client, "task": task, "rho": mask.rho,
                "exempt": list(mask.exempt),
                "channel_keep": {name: rle_encode(bits)
                                 for name, bits in mask.channel_keep.items()},
            }
            for (client, task), mask in sorted(state.masks.items())
        },
    }
    tensors: list[tuple[str, np.ndarray]] = [
        (f"backbone/{key}", state.backbone.weights[key])
        for key in sorted(state.backbone.weights)]
    for task in sorted(state.predictors):
        for key in sorted(state.predictors[task]):
            tensors.append((f"task{task}/{key}", state.predictors[task][key]))
    with open(path, "wb") as fh:
        fh.write(_pack(header, tensors))


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, tensors = _unpack(raw, path)
    if header.get("kind") != "checkpoint":
        raise DataFormatError(f"{path}: container holds {header.get('kind')!r}, not a checkpoint")
    layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
    backbone_weights = {name[len("backbone/"):]: arr for name, arr in tensors.items()
                        if name.startswith("backbone/")}
    backbone = BackboneModel(layers, backbone_weights, tuple(header["input_shape"]),
                             provenance=header["provenance"])
    predictors: dict[int, ParameterTree] = {}
    for task in header["tasks"]:
        prefix = f"task{task}/"
        predictors[int(task)] = {name[len(prefix):]: arr for name, arr in tensors.items()
                                 if name.startswith(prefix)}
    if header["split_fraction"] == 0.0:
        # Whole network trained as one predictor (dense/compact baselines).
        mask_layers, mask_input = backbone.layers, backbone.input_shape
    else:
        _, template = split_backbone(backbone, header["split_fraction"])
        mask_layers, mask_input = template.layers, template.input_shape
    masks: dict[tuple[int, int], ChannelMask] = {}
    for entry in header["masks"].values():
        channel_keep = {name: rle_decode(runs) for name, runs in entry["channel_keep"].items()}
        elements = expand_elements(mask_layers, mask_input, channel_keep)
        masks[(entry["client"], entry["task"])] = ChannelMask(
            client=entry["client"], task=entry["task"], rho=entry["rho"],
            channel_keep=channel_keep, elements=elements, exempt=tuple(entry["exempt"]))
    return CheckpointState(round_idx=header["round"], backbone=backbone,
                           split_fraction=header["split_fraction"],
                           predictors=predictors, masks=masks)
