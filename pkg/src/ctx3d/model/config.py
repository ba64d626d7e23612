"""Detector hyperparameters and the flat ``key = value`` config format."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from ..detection.anchors import AnchorConfig
from ..detection.targets import ProposalConfig, RoiSamplingConfig, RpnTargetConfig

BACKBONES = {
    # (width, convs) per stage; 2x2 pooling after the first three stages only
    "tiny": ((16, 1), (32, 1), (64, 1), (64, 1)),
    "vgg16-like": ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)),
}
POOLED_STAGES = 3

# fields that change parameter shapes or graph structure
ARCH_FIELDS = ("M", "D", "S", "backbone", "anchor_scales", "anchor_ratios", "fc7_width")


@dataclass
class ModelConfig:
    M: int = 3
    D: int = 10
    S: int = 7
    backbone: str = "tiny"
    anchor_scales: tuple = (16, 24, 32, 48, 96)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    fc7_width: int = 2048
    bbox_reg_loss_weight: float = 10.0

    base_lr: float = 1e-3
    lr_decay_epochs: tuple = (4, 5)
    lr_decay_factor: float = 0.1
    epochs: int = 6
    momentum: float = 0.9
    weight_decay: float = 5e-4

    pixel_mean: float = 60.0
    pixel_std: float = 0.5
    init_std: float = 0.01
    init_std_reg: float = 0.001

    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch_size: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_pre_nms_train: int = 6000
    rpn_post_nms_train: int = 600
    rpn_pre_nms_test: int = 6000
    rpn_post_nms_test: int = 100
    rpn_nms_thresh: float = 0.7
    rpn_min_size: float = 4.0

    roi_batch_size: int = 128
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou_hi: float = 0.5
    roi_bg_iou_lo: float = 0.0

    test_nms_thresh: float = 0.3
    max_detections: int = 100

    def __post_init__(self):
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.validate()

    def validate(self) -> None:
        if self.M < 1 or self.M % 2 == 0:
            raise ValueError(f"M must be odd and >= 1, got {self.M}")
        if self.D < 1 or self.S < 1:
            raise ValueError("D and S must be positive")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone preset {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.fused_channels != self.S ** 2 * self.D * self.M:
            raise ValueError("fused channel arithmetic broken")
        AnchorConfig(self.anchor_scales, self.anchor_ratios, self.stride)

    @property
    def stride(self) -> int:
        return 2 ** POOLED_STAGES

    @property
    def conv5_width(self) -> int:
        return BACKBONES[self.backbone][-1][0]

    @property
    def conv6_channels(self) -> int:
        return self.S * self.S * self.D

    @property
    def fused_channels(self) -> int:
        return self.conv6_channels * self.M

    @property
    def pooled_channels(self) -> int:
        return self.D * self.M

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def samples_per_batch(self) -> int:
        return 2 if self.M < 7 else 1

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch > e)
        # divide by the inverse factor: 1e-3 / 10**2 is exactly 1e-5, 1e-3 * 0.1**2 is not
        return self.base_lr / (1.0 / self.lr_decay_factor) ** drops

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(self.anchor_scales, self.anchor_ratios, self.stride)

    def rpn_target_config(self) -> RpnTargetConfig:
        return RpnTargetConfig(self.rpn_positive_iou, self.rpn_negative_iou,
                               self.rpn_batch_size, self.rpn_positive_fraction)

    def proposal_config(self, training: bool) -> ProposalConfig:
        if training:
            return ProposalConfig(self.rpn_pre_nms_train, self.rpn_post_nms_train,
                                  self.rpn_nms_thresh, self.rpn_min_size)
        return ProposalConfig(self.rpn_pre_nms_test, self.rpn_post_nms_test,
                              self.rpn_nms_thresh, self.rpn_min_size)

    def roi_config(self) -> RoiSamplingConfig:
        return RoiSamplingConfig(self.roi_batch_size, self.roi_fg_fraction, self.roi_fg_iou,
                                 self.roi_bg_iou_hi, self.roi_bg_iou_lo)

    def fingerprint(self) -> str:
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        blob = json.dumps(arch, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# flat key/value files: "section.key = value" per line, '#' comments
# ---------------------------------------------------------------------------

def parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip("\"'")


def parse_config_text(text: str) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            raise ValueError(f"line {lineno}: sections are not supported; use dotted keys")
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_override(token: str) -> tuple[str, object]:
    if "=" not in token:
        raise ValueError(f"override {token!r} is not of the form key=value")
    key, value = token.split("=", 1)
    return key.strip(), parse_value(value)


def format_config(values: dict[str, object]) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            v = list(v)
        lines.append(f"{key} = {json.dumps(v) if isinstance(v, (str, list)) else v}")
    return "\n".join(lines) + "\n"


def model_config_from(values: dict[str, object], base: ModelConfig | None = None) -> ModelConfig:
    """Apply ``model.*`` entries of a flat mapping onto ``base`` (defaults if None)."""
    base = base or ModelConfig()
    names = {f.name for f in fields(ModelConfig)}
    changes = {}
    for key, v in values.items():
        if not key.startswith("model."):
            continue
        name = key[len("model."):]
        if name not in names:
            raise KeyError(f"unknown config key {key!r}")
        changes[name] = v
    return base.replace(**changes)


def model_config_items(cfg: ModelConfig) -> dict[str, object]:
    return {f"model.{k}": v for k, v in cfg.to_dict().items()}
