from .config import FUSION_MODES, PRIOR_DIMS, ModelConfig
from .detector import Detection, HybridDetector, build_model, decode, encode
from .fusion import FusionClassifier, fuse_priors, pack_priors, stack_priors
from .losses import LossBundle, class_weighted_ce, multitask_loss

__all__ = [
    "FUSION_MODES", "PRIOR_DIMS", "ModelConfig", "Detection", "HybridDetector", "build_model",
    "decode", "encode", "FusionClassifier", "fuse_priors", "pack_priors", "stack_priors",
    "LossBundle", "class_weighted_ce", "multitask_loss",
]
