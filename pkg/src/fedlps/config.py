"""Experiment configuration: validated dataclasses, JSON files, flag overrides.

A configuration is a plain JSON object (documented per-field below) that can
be loaded from disk and then overridden field-by-field from the command line;
overrides always win. Every tunable used anywhere in the simulator lives
here — modules take explicit arguments, never hidden module-level knobs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .engine import LayerSpec, avgpool, batchnorm, conv2d, flatten, linear, maxpool, relu
from .errors import ConfigurationError
from .federation import LEVEL_RATIOS

FRAMEWORKS = ("fedlps", "fedavg", "feddrop", "overlap")
TASK_KINDS = ("synthetic", "idx")

#: Default synthetic roster: three tasks with unequal class counts, standing
#: in for a mixed workload of easy-to-hard classification problems.
DEFAULT_TASK_CLASSES = (6, 8, 10)
DEFAULT_PER_CLASS = 60


@dataclass(frozen=True)
class TaskSpec:
    """One task's dataset source.

    ``synthetic`` tasks are generated (class-conditional Gaussian blobs);
    ``idx`` tasks load an IDX image/label file pair, resolved against the
    data directory when the paths are relative.
    """

    name: str
    kind: str = "synthetic"
    classes: int = 10
    per_class: int = DEFAULT_PER_CLASS
    image_shape: tuple[int, int, int] = (1, 28, 28)
    margin: float = 2.0
    noise: float = 0.25
    upsample: int = 4
    images: str | None = None   # idx only
    labels: str | None = None   # idx only
    test_fraction: float = 0.2
    public_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(
                f"task {self.name!r}: kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not self.name:
            raise ConfigurationError("every task needs a nonempty name")
        if self.kind == "synthetic":
            if self.classes < 2:
                raise ConfigurationError(f"task {self.name!r}: needs >= 2 classes")
            if self.per_class < 1:
                raise ConfigurationError(f"task {self.name!r}: per_class must be positive")
            if len(self.image_shape) != 3:
                raise ConfigurationError(f"task {self.name!r}: image_shape must be (C, H, W)")
            if self.upsample < 1:
                raise ConfigurationError(
                    f"task {self.name!r}: upsample must be >= 1, got {self.upsample}")
        else:
            if not self.images or not self.labels:
                raise ConfigurationError(
                    f"task {self.name!r}: idx tasks need both images and labels paths")
        for frac_name in ("test_fraction", "public_fraction"):
            frac = getattr(self, frac_name)
            if not 0.0 < frac < 1.0:
                raise ConfigurationError(
                    f"task {self.name!r}: {frac_name} must lie in (0, 1), got {frac}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        known = {f.name for f in dataclasses.fields(TaskSpec)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown task keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "image_shape" in kwargs:
            kwargs["image_shape"] = tuple(kwargs["image_shape"])
        return TaskSpec(**kwargs)


def default_tasks(count: int = len(DEFAULT_TASK_CLASSES)) -> tuple[TaskSpec, ...]:
    """``count`` synthetic tasks with class counts 6, 8, 10, 12, ..."""
    if count < 1:
        raise ConfigurationError(f"need at least one task, got {count}")
    classes = [DEFAULT_TASK_CLASSES[i] if i < len(DEFAULT_TASK_CLASSES)
               else DEFAULT_TASK_CLASSES[-1] + 2 * (i - len(DEFAULT_TASK_CLASSES) + 1)
               for i in range(count)]
    return tuple(TaskSpec(name=f"blobs{c}", classes=c) for c in classes)


def default_backbone(head_width: int, in_channels: int = 1) -> tuple[LayerSpec, ...]:
    """The ten-layer desk CNN for 28x28 inputs.

    Two conv blocks, then 7x7 average pooling down to a 2x2 grid: the head
    sees per-quadrant channel means, which keeps enough coarse spatial
    layout to separate smooth class patterns while staying tiny.
    """
    if head_width < 2:
        raise ConfigurationError(f"head needs >= 2 outputs, got {head_width}")
    return (
        conv2d("conv1", in_channels, 8, 5, padding=2),
        batchnorm("bn1", 8),
        relu("relu1"),
        maxpool("pool1", 2),
        conv2d("conv2", 8, 20, 3, padding=1),
        batchnorm("bn2", 20),
        relu("relu2"),
        avgpool("pool2", 7),
        flatten("flat"),
        linear("head", 20 * 2 * 2, head_width),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete, validated description of one experiment.

    ``alpha`` selects the partition: a positive float uses the Dirichlet
    split with that concentration, ``None`` uses the uniform IID split.
    ``seeds`` lists the replicate seeds a run executes (artifacts land in
    per-seed subdirectories when there is more than one).

    ``pretrain_tasks`` controls what the backbone is pre-trained on. The
    default (``None``) pools the public splits of the task roster itself;
    supplying separate specs pre-trains on held-out data instead, which
    models the realistic regime where server-side public data differs from
    what clients hold. Their class counts must sum to the head width so
    every output gets supervised.
    """

    framework: str = "fedlps"
    rounds: int = 20
    clients: int = 8
    split_fraction: float = 0.25
    alpha: float | None = 0.5
    lr: float = 0.001
    weight_decay: float = 0.001
    epochs: int = 5
    batch_size: int = 64
    participation: float = 1.0
    pretrain_epochs: int = 40
    pretrain_lr: float = 1.0
    pretrain_batch_size: int = 64
    level_ratios: dict[int, float] = field(default_factory=lambda: dict(LEVEL_RATIOS))
    recovery_source: str = "backbone"
    cache_embeddings: bool = True
    seeds: tuple[int, ...] = (0,)
    tasks: tuple[TaskSpec, ...] = field(default_factory=default_tasks)
    pretrain_tasks: tuple[TaskSpec, ...] | None = None
    backbone: tuple[dict, ...] | None = None
    output_dir: str = "runs/experiment"

    def __post_init__(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(
                f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        for name in ("rounds", "clients", "epochs", "batch_size",
                     "pretrain_epochs", "pretrain_batch_size"):
            value = getattr(self, name)
            minimum = 0 if name.endswith("epochs") else 1
            if not isinstance(value, int) or value < minimum:
                raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigurationError(
                f"split_fraction must lie strictly inside (0, 1), got {self.split_fraction}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive or null, got {self.alpha}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigurationError(
                f"participation must lie in (0, 1], got {self.participation}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"duplicate seeds: {self.seeds}")
        if not self.tasks:
            raise ConfigurationError("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate task names: {names}")
        shapes = {t.image_shape for t in self.tasks if t.kind == "synthetic"}
        if len(shapes) > 1:
            raise ConfigurationError(f"all tasks must share one image shape, got {shapes}")
        if set(self.level_ratios) != set(LEVEL_RATIOS):
            raise ConfigurationError(
                f"level_ratios must cover levels {sorted(LEVEL_RATIOS)}, "
                f"got {sorted(self.level_ratios)}")
        for level, rho in self.level_ratios.items():
            if not 0.0 <= rho < 1.0:
                raise ConfigurationError(
                    f"level {level}: pruning ratio must lie in [0, 1), got {rho}")
        if self.recovery_source not in ("backbone", "previous_global"):
            raise ConfigurationError(
                f"recovery_source must be 'backbone' or 'previous_global', "
                f"got {self.recovery_source!r}")
        if self.pretrain_tasks is not None:
            width = sum(t.classes for t in self.pretrain_tasks)
            if width != self.label_width():
                raise ConfigurationError(
                    f"pretrain tasks must cover every head output: they provide "
                    f"{width} classes, the task roster needs {self.label_width()}")
            pnames = [t.name for t in self.pretrain_tasks]
            if len(set(pnames)) != len(pnames):
                raise ConfigurationError(f"duplicate pretrain task names: {pnames}")
        if self.backbone is not None and len(self.backbone) < 2:
            raise ConfigurationError("a custom backbone needs at least two layers")

    # -- derived quantities -------------------------------------------------

    def label_width(self) -> int:
        """Width of the shared classification head.

        Tasks keep their own class counts; each gets a disjoint slice of the
        head's output range so one structurally identical predictor serves
        every task and pre-training can pool all public samples.
        """
        return sum(t.classes for t in self.tasks)

    def label_offsets(self) -> dict[str, int]:
        offsets: dict[str, int] = {}
        start = 0
        for t in self.tasks:
            offsets[t.name] = start
            start += t.classes
        return offsets

    def build_backbone_layers(self) -> tuple[LayerSpec, ...]:
        if self.backbone is None:
            in_channels = self.tasks[0].image_shape[0] if self.tasks[0].kind == "synthetic" else 1
            return default_backbone(self.label_width(), in_channels)
        return tuple(LayerSpec.from_dict(d) for d in self.backbone)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = [t.to_dict() for t in self.tasks]
        d["pretrain_tasks"] = ([t.to_dict() for t in self.pretrain_tasks]
                               if self.pretrain_tasks is not None else None)
        d["seeds"] = list(self.seeds)
        d["level_ratios"] = {str(k): v for k, v in sorted(self.level_ratios.items())}
        d["backbone"] = list(self.backbone) if self.backbone is not None else None
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "tasks" in kwargs:
            kwargs["tasks"] = tuple(TaskSpec.from_dict(t) for t in kwargs["tasks"])
        if kwargs.get("pretrain_tasks") is not None:
            kwargs["pretrain_tasks"] = tuple(TaskSpec.from_dict(t)
                                             for t in kwargs["pretrain_tasks"])
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
        if "level_ratios" in kwargs:
            try:
                kwargs["level_ratios"] = {int(k): float(v)
                                          for k, v in kwargs["level_ratios"].items()}
            except (TypeError, ValueError, AttributeError):
                raise ConfigurationError(
                    f"level_ratios must map level numbers to ratios, "
                    f"got {kwargs['level_ratios']!r}") from None
        if kwargs.get("backbone") is not None:
            kwargs["backbone"] = tuple(kwargs["backbone"])
        return ExperimentConfig(**kwargs)

    def replace(self, **changes) -> "ExperimentConfig":
        """A copy with the given fields overridden (revalidated)."""
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Stable hash of the full configuration, recorded in run manifests."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    """Read a JSON configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
