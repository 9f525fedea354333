"""Student/teacher architectures, feature taps, freezing and complexity accounting.

Every model built here follows the same small protocol:

* ``forward(x)`` returns logits,
* ``forward_features(x)`` returns the penultimate (post global-pool) vector,
* ``layer_groups()`` lists the ordered units used by :func:`freeze_prefix`,
* ``feature_dim`` is the width of the penultimate vector,
* ``arch_spec()`` returns a JSON-serializable description for checkpoints.
"""

from __future__ import annotations

import datetime as _dt
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torchvision

from .errors import ConfigurationError, InputError, ResourceError

WEIGHTS_DIR_ENV = "DISTILLKIT_WEIGHTS_DIR"
CHECKPOINT_FORMAT = "distillkit-checkpoint"
CHECKPOINT_VERSION = 1

REFERENCE_STUDENT_PARAMETERS = 51_895

RESNET_BUILDERS = {
    "RN50": torchvision.models.resnet50,
    "RN101": torchvision.models.resnet101,
    "RN152": torchvision.models.resnet152,
}
RESNET_FILE_STEMS = {"RN50": "resnet50", "RN101": "resnet101", "RN152": "resnet152"}
TOY_BACKBONE = "TOY"
BACKBONE_IDS = tuple(RESNET_BUILDERS) + (TOY_BACKBONE,)
WEIGHTS_MODES = ("pretrained", "finetuned", "scratch")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    pool: bool = True


@dataclass(frozen=True)
class StudentArchSpec:
    conv_blocks: tuple[ConvBlockSpec, ...]
    head_width: int
    num_classes: int

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}", "num_classes")
        if not self.conv_blocks:
            raise ConfigurationError("student needs at least one conv block", "conv_blocks")
        for i, block in enumerate(self.conv_blocks):
            if min(block.in_channels, block.out_channels, block.kernel_size) < 1:
                raise ConfigurationError(f"block {i} has a non-positive size", f"conv_blocks.{i}")
        for i, (a, b) in enumerate(zip(self.conv_blocks, self.conv_blocks[1:])):
            if a.out_channels != b.in_channels:
                raise ConfigurationError(
                    f"channel chain broken between block {i} ({a.out_channels}) "
                    f"and block {i + 1} ({b.in_channels})",
                    f"conv_blocks.{i + 1}.in_channels",
                )
        if self.conv_blocks[-1].out_channels != self.head_width:
            raise ConfigurationError(
                f"head_width {self.head_width} != last block width {self.conv_blocks[-1].out_channels}",
                "head_width",
            )
        return self

    def to_dict(self):
        return {
            "kind": "student",
            "conv_blocks": [asdict(b) for b in self.conv_blocks],
            "head_width": self.head_width,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data):
        blocks = tuple(ConvBlockSpec(**b) for b in data["conv_blocks"])
        return cls(blocks, int(data["head_width"]), int(data["num_classes"]))


def default_student_spec(num_classes: int = 23) -> StudentArchSpec:
    """Three conv blocks 3->32->56->64 (3x3, BN, ReLU, 2x2 max-pool) and a 64->K head."""
    widths = (3, 32, 56, 64)
    blocks = tuple(ConvBlockSpec(a, b) for a, b in zip(widths, widths[1:]))
    return StudentArchSpec(blocks, head_width=widths[-1], num_classes=num_classes)


@dataclass(frozen=True)
class TeacherSpec:
    backbone_id: str
    weights_mode: str = "scratch"
    frozen_prefix_depth: int = 0
    num_classes: int = 1000
    checkpoint: str | None = None  # required when weights_mode == "finetuned"

    def validate(self):
        if self.backbone_id not in BACKBONE_IDS:
            raise ConfigurationError(
                f"unknown backbone {self.backbone_id!r}; expected one of {BACKBONE_IDS}", "backbone_id"
            )
        if self.weights_mode not in WEIGHTS_MODES:
            raise ConfigurationError(f"unknown weights_mode {self.weights_mode!r}", "weights_mode")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2", "num_classes")
        if self.frozen_prefix_depth < 0:
            raise ConfigurationError("frozen_prefix_depth must be >= 0", "frozen_prefix_depth")
        return self


@dataclass(frozen=True)
class FeatureTap:
    tap_point: str  # "penultimate" | "logits"
    dimension: int

    def __post_init__(self):
        if self.tap_point not in ("penultimate", "logits"):
            raise ConfigurationError(f"unknown tap point {self.tap_point!r}", "tap_point")


@dataclass
class ModelComplexityReport:
    total_parameters: int
    trainable_parameters: int
    serialized_size_bytes: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def conv_block(spec: ConvBlockSpec) -> nn.Sequential:
    layers = [
        nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel_size, stride=1, padding=spec.kernel_size // 2),
        nn.BatchNorm2d(spec.out_channels),
        nn.ReLU(inplace=True),
    ]
    if spec.pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class _FreezableMixin:
    """Keeps frozen groups (including BatchNorm statistics) fixed in train mode."""

    frozen_depth = 0

    def train(self, mode=True):
        super().train(mode)
        if mode:
            for group in self.layer_groups()[: self.frozen_depth]:
                group.eval()
        return self


class StudentNet(_FreezableMixin, nn.Module):
    def __init__(self, spec: StudentArchSpec):
        super().__init__()
        self.spec = spec
        self.features = nn.Sequential(*(conv_block(b) for b in spec.conv_blocks))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.classifier = nn.Linear(spec.head_width, spec.num_classes)

    @property
    def feature_dim(self):
        return self.spec.head_width

    @property
    def num_classes(self):
        return self.spec.num_classes

    def layer_groups(self):
        return list(self.features)

    def conv_layer_names(self):
        return [f"features.{i}" for i in range(len(self.features))]

    def forward_features(self, x):
        return self.flatten(self.pool(self.features(x)))

    def forward(self, x):
        return self.classifier(self.forward_features(x))

    def arch_spec(self):
        return self.spec.to_dict()


class ToyTeacherNet(_FreezableMixin, nn.Module):
    """Medium CNN standing in for a ResNet teacher at desk scale (5 conv blocks)."""

    widths = (3, 32, 64, 96, 128, 160)

    def __init__(self, num_classes: int):
        super().__init__()
        self.backbone_id = TOY_BACKBONE
        self._num_classes = num_classes
        blocks = [ConvBlockSpec(a, b) for a, b in zip(self.widths, self.widths[1:])]
        self.features = nn.Sequential(*(conv_block(b) for b in blocks))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.classifier = nn.Linear(self.widths[-1], num_classes)

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def num_classes(self):
        return self._num_classes

    def layer_groups(self):
        return list(self.features)

    def conv_layer_names(self):
        return [f"features.{i}" for i in range(len(self.features))]

    def forward_features(self, x):
        return self.flatten(self.pool(self.features(x)))

    def forward(self, x):
        return self.classifier(self.forward_features(x))

    def arch_spec(self):
        return {"kind": "teacher", "backbone_id": TOY_BACKBONE, "num_classes": self._num_classes}


class ResNetTeacher(_FreezableMixin, nn.Module):
    """torchvision ResNet with the head sized to the task and a penultimate tap.

    Layer groups, in order: stem conv, stem BN, stem pooling (ReLU + max-pool),
    then the four residual stages. The classifier head is never part of a group.
    """

    def __init__(self, backbone_id: str, num_classes: int, net: nn.Module | None = None):
        super().__init__()
        self.backbone_id = backbone_id
        net = net if net is not None else RESNET_BUILDERS[backbone_id](weights=None)
        if net.fc.out_features != num_classes:
            net.fc = nn.Linear(net.fc.in_features, num_classes)
        self.net = net
        self.stem_pool = nn.Sequential(net.relu, net.maxpool)

    @property
    def feature_dim(self):
        return self.net.fc.in_features

    @property
    def num_classes(self):
        return self.net.fc.out_features

    @property
    def classifier(self):
        return self.net.fc

    def layer_groups(self):
        n = self.net
        return [n.conv1, n.bn1, self.stem_pool, n.layer1, n.layer2, n.layer3, n.layer4]

    def conv_layer_names(self):
        return [f"net.layer{i}" for i in range(1, 5)]

    def forward_features(self, x):
        n = self.net
        x = self.stem_pool(n.bn1(n.conv1(x)))
        x = n.layer4(n.layer3(n.layer2(n.layer1(x))))
        return torch.flatten(n.avgpool(x), 1)

    def forward(self, x):
        return self.net.fc(self.forward_features(x))

    def arch_spec(self):
        return {"kind": "teacher", "backbone_id": self.backbone_id, "num_classes": self.num_classes}


def build_student(spec: StudentArchSpec | None = None, num_classes: int | None = None) -> StudentNet:
    if spec is None:
        spec = default_student_spec(23 if num_classes is None else num_classes)
    elif num_classes is not None and num_classes != spec.num_classes:
        raise ConfigurationError("num_classes disagrees with spec.num_classes", "num_classes")
    return StudentNet(spec.validate())


def pretrained_weights_path(backbone_id: str, weights_dir: str | os.PathLike | None = None) -> Path:
    """Locate ``resnet50.pth`` (or torchvision's ``resnet50-<hash>.pth``) in the weights dir."""
    weights_dir = weights_dir or os.environ.get(WEIGHTS_DIR_ENV)
    if not weights_dir:
        raise ResourceError(
            f"pretrained weights requested for {backbone_id} but {WEIGHTS_DIR_ENV} is not set"
        )
    stem = RESNET_FILE_STEMS[backbone_id]
    root = Path(weights_dir)
    exact = root / f"{stem}.pth"
    if exact.is_file():
        return exact
    candidates = sorted(root.glob(f"{stem}-*.pth"))
    if candidates:
        return candidates[0]
    raise ResourceError(f"no pretrained weights for {backbone_id} in {root} (expected {stem}.pth)")


def build_teacher(spec: TeacherSpec, weights_dir=None) -> nn.Module:
    spec.validate()
    if spec.weights_mode == "finetuned":
        if not spec.checkpoint:
            raise ConfigurationError("weights_mode='finetuned' needs a checkpoint path", "checkpoint")
        model = load_model(spec.checkpoint)
        if getattr(model, "backbone_id", None) != spec.backbone_id:
            raise ConfigurationError(
                f"checkpoint holds {getattr(model, 'backbone_id', 'student')}, not {spec.backbone_id}",
                "backbone_id",
            )
    elif spec.backbone_id == TOY_BACKBONE:
        if spec.weights_mode == "pretrained":
            raise ConfigurationError("the toy teacher has no pretrained weights", "weights_mode")
        model = ToyTeacherNet(spec.num_classes)
    else:
        net = RESNET_BUILDERS[spec.backbone_id](weights=None)
        if spec.weights_mode == "pretrained":
            path = pretrained_weights_path(spec.backbone_id, weights_dir)
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        model = ResNetTeacher(spec.backbone_id, spec.num_classes, net)
    return freeze_prefix(model, spec.frozen_prefix_depth)


def layer_groups(model) -> list[nn.Module]:
    if not hasattr(model, "layer_groups"):
        raise ConfigurationError(f"{type(model).__name__} does not define layer groups")
    return model.layer_groups()


def freeze_prefix(model, depth: int):
    """Hold the first ``depth`` layer groups fixed; later groups and the head stay trainable."""
    groups = layer_groups(model)
    if not 0 <= depth <= len(groups):
        raise ConfigurationError(f"freeze depth {depth} outside [0, {len(groups)}]", "frozen_prefix_depth")
    for i, group in enumerate(groups):
        for p in group.parameters():
            p.requires_grad_(i >= depth)
    for p in model.classifier.parameters():
        p.requires_grad_(True)
    model.frozen_depth = depth
    if model.training:
        model.train()
    return model


def tap_features(model, tap: FeatureTap, batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise InputError(f"expected a B x 3 x H x W batch, got shape {tuple(batch.shape)}")
    expected = model.feature_dim if tap.tap_point == "penultimate" else model.num_classes
    if tap.dimension != expected:
        raise ConfigurationError(f"tap dimension {tap.dimension} does not match model width {expected}")
    if tap.tap_point == "penultimate":
        return model.forward_features(batch)
    return model(batch)


def penultimate_tap(model) -> FeatureTap:
    return FeatureTap("penultimate", model.feature_dim)


def serialized_size(model) -> int:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getbuffer().nbytes


def count_parameters(model, with_size: bool = True) -> ModelComplexityReport:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    report = ModelComplexityReport(total, trainable, serialized_size(model) if with_size else 0)
    if isinstance(model, StudentNet):
        report.notes.append(
            f"student widths are a reconstruction; reference count {REFERENCE_STUDENT_PARAMETERS:,}"
        )
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, extra_header: dict | None = None, extra_state: dict | None = None):
    """Write a weights-only archive with an embedded JSON header.

    ``extra_state`` holds additional named state dicts (e.g. ``fusion_params``);
    their names are listed in the header manifest.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "arch_spec": model.arch_spec(),
        "num_classes": model.num_classes,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "framework_version": f"torch-{torch.__version__}",
        "frozen_depth": getattr(model, "frozen_depth", 0),
    }
    header.update(extra_header or {})
    extra_state = extra_state or {}
    header["manifest"] = ["model"] + sorted(extra_state)
    payload = {"header": json.dumps(header, sort_keys=True), "model": model.state_dict()}
    payload.update(extra_state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise ResourceError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "header" not in payload:
        raise InputError(f"{path} is not a distillkit checkpoint")
    header = json.loads(payload.pop("header"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} has unknown format {header.get('format')!r}")
    if header.get("format_version", 0) > CHECKPOINT_VERSION:
        raise InputError(f"{path} was written by a newer format version")
    return header, payload


def model_from_arch_spec(arch: dict) -> nn.Module:
    if arch["kind"] == "student":
        return build_student(StudentArchSpec.from_dict(arch))
    backbone = arch["backbone_id"]
    if backbone == TOY_BACKBONE:
        return ToyTeacherNet(arch["num_classes"])
    if backbone in RESNET_BUILDERS:
        return ResNetTeacher(backbone, arch["num_classes"])
    raise ConfigurationError(f"unknown architecture in checkpoint: {arch}")


def load_model(path, return_header: bool = False):
    header, states = load_checkpoint(path)
    model = model_from_arch_spec(header["arch_spec"])
    model.load_state_dict(states["model"])
    freeze_prefix(model, header.get("frozen_depth", 0))
    model.eval()
    if return_header:
        return model, header, states
    return model
