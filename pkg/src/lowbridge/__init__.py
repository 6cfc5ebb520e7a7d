"""Edge-bridged domain adaptation for cross-modal segmentation.

Source images are reduced to Canny edge maps, a generator learns to rebuild
the source image from its edges, and a segmenter is trained on the rebuilt
images. Target images then go through the same edges -> generator ->
segmenter path with no target-side training.
"""

from lowbridge._backend import BACKEND
from lowbridge.data import (
    AugmentationConfig,
    DatasetManifest,
    SynthConfig,
    generate_synthetic_benchmark,
    load_manifest,
)
from lowbridge.edge import CannyParams, EdgeMap, extract_edges
from lowbridge.metrics import MetricsReport, asd, dice_score, evaluate_dataset
from lowbridge.model import ModelSpec, ParameterSet, build_model, load_checkpoint, save_checkpoint
from lowbridge.objective import LossWeights
from lowbridge.pipeline import (
    TrainConfig,
    adapt_and_segment,
    baseline,
    generator_config,
    segmenter_config,
    train_generator,
    train_segmenter,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AugmentationConfig",
    "CannyParams",
    "DatasetManifest",
    "EdgeMap",
    "LossWeights",
    "MetricsReport",
    "ModelSpec",
    "ParameterSet",
    "SynthConfig",
    "TrainConfig",
    "adapt_and_segment",
    "asd",
    "baseline",
    "build_model",
    "dice_score",
    "evaluate_dataset",
    "extract_edges",
    "generate_synthetic_benchmark",
    "generator_config",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
    "segmenter_config",
    "train_generator",
    "train_segmenter",
]
