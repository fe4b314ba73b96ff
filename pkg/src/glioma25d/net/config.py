"""Model configuration for the 2D hybrid detector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError

FUSION_MODES = ("none", "age", "loc", "age+loc")
PRIOR_DIMS = {"none": 0, "age": 1, "loc": 9, "age+loc": 10}
LOSS_NAMES = ("rpn_objectness", "rpn_box", "head_class", "head_box", "head_mask")

# name -> (block type, blocks per stage, stage widths as multiples of base_width)
BACKBONE_PRESETS = {
    "tiny": ("basic", (1, 1, 1), (1, 2, 4)),
    "resnet18": ("basic", (2, 2, 2, 2), (1, 2, 4, 8)),
    "resnet101": ("bottleneck", (3, 4, 23, 3), (1, 2, 4, 8)),
}


@dataclass
class ModelConfig:
    input_channels: int = 3
    backbone: str = "tiny"
    base_width: int = 16
    # FPN levels are given as strides; each must be produced by a backbone stage
    fpn_strides: tuple[int, ...] = (4, 8)
    fpn_channels: int = 32
    # one anchor size per FPN level, shared aspect ratios
    anchor_sizes: tuple[float, ...] = (16.0, 32.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_size: int = 7
    mask_roi_size: int = 14
    sampling_ratio: int = 1
    roi_hidden: int = 128
    fusion_hidden: int = 64
    fusion_mode: str = "none"
    num_foreground_classes: int = 2
    # weights for (BG, class0, class1)
    class_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    score_threshold: float = 0.5
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})
    # RPN / ROI sampling
    rpn_pre_nms_train: int = 100
    rpn_post_nms_train: int = 32
    rpn_pre_nms_test: int = 100
    rpn_post_nms_test: int = 16
    rpn_nms_iou: float = 0.7
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_batch_per_image: int = 64
    roi_batch_per_image: int = 16
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    detection_nms_iou: float = 0.5
    detections_per_image: int = 4

    def __post_init__(self):
        self.fpn_strides = tuple(int(s) for s in self.fpn_strides)
        self.anchor_sizes = tuple(float(s) for s in self.anchor_sizes)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    @property
    def prior_dim(self) -> int:
        return PRIOR_DIMS[self.fusion_mode]

    @property
    def num_classes(self) -> int:
        return self.num_foreground_classes + 1

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {self.backbone!r}; "
                              f"choose from {sorted(BACKBONE_PRESETS)}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.num_foreground_classes != 2:
            raise ConfigError("num_foreground_classes must be 2")
        if len(self.class_weights) != self.num_classes or min(self.class_weights) <= 0:
            raise ConfigError("class_weights needs one positive weight per class (BG, class0, class1)")
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError("score_threshold must lie in (0, 1)")
        if len(self.anchor_sizes) != len(self.fpn_strides):
            raise ConfigError(f"{len(self.anchor_sizes)} anchor sizes for "
                              f"{len(self.fpn_strides)} FPN levels")
        _, blocks, _ = BACKBONE_PRESETS[self.backbone]
        available = {2 ** (i + 2) for i in range(len(blocks))}
        missing = [s for s in self.fpn_strides if s not in available]
        if missing or list(self.fpn_strides) != sorted(set(self.fpn_strides)):
            raise ConfigError(f"FPN strides {self.fpn_strides} not produced by backbone "
                              f"{self.backbone!r} (stage strides {sorted(available)})")
        if min(self.anchor_ratios) <= 0 or min(self.anchor_sizes) <= 0:
            raise ConfigError("anchor sizes and ratios must be positive")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss weight(s) {sorted(unknown)}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigError("loss weights must be nonnegative")
        if self.roi_size < 1 or self.mask_roi_size < 1 or self.sampling_ratio < 1:
            raise ConfigError("ROI sizes and sampling ratio must be >= 1")

    def loss_weight(self, name: str) -> float:
        return float(self.loss_weights.get(name, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig field(s): {sorted(unknown)}")
        return cls(**d)
