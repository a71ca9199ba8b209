"""Text-cue weakly supervised lesion segmentation at desk scale."""

from .attention import AttentionConfig
from .metrics import dice, evaluate, iou
from .model import ModelConfig, TextGuidedSegmenter, build_model, predict_mask
from .pseudo_label import ScoredBox, generate_pseudo_masks
from .synthetic import make_synthetic_corpus

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ModelConfig", "ScoredBox", "TextGuidedSegmenter", "build_model",
    "dice", "evaluate", "generate_pseudo_masks", "iou", "make_synthetic_corpus",
    "predict_mask",
]
