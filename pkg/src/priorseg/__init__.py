"""Semi-supervised ultrasound segmentation with a learned shape prior.

The package trains a shared-encoder / twin-decoder segmentation network on a
small labeled pool plus a larger unlabeled pool.  One decoder learns from the
labeled masks and supplies pseudo-labels; the other is trained on unlabeled
images against those pseudo-labels under feature dropout, regularized by a
mask-plausibility critic learned beforehand with a gradient-penalty
Wasserstein objective.  Inference uses the encoder and the pseudo-label-trained
decoder only.
"""

__version__ = "0.1.0"

from .dataio import (
    AugmentationParams,
    DatasetSplit,
    ImageRecord,
    augment,
    augment_mask_set,
    generate_synthetic,
    load_dataset,
    make_partition,
    resize_mask_64,
    sample_batches,
)
from .metrics import MetricsReport, dice, evaluate, iou
from .segmodel import (
    DecoderSpec,
    EncoderSpec,
    FeatureDropoutConfig,
    SegModel,
    build_segmodel,
    foreground_prob_64,
    load_segmodel,
    save_segmodel,
)
from .shape_prior import (
    DiscriminatorSpec,
    GanTrainConfig,
    GeneratorSpec,
    ShapePriorHandle,
    TrainingDiverged,
    critic_loss,
    generator_loss,
    gradient_penalty,
    load_shape_prior,
    shape_prior_loss,
    train_shape_prior,
)
from .trainer import (
    LossWeights,
    OptimConfig,
    poly_lr,
    pseudo_label,
    supervised_loss,
    total_loss,
    train,
    train_labeled_only_baseline,
    unsupervised_loss,
)

__all__ = [
    "AugmentationParams",
    "DatasetSplit",
    "ImageRecord",
    "augment",
    "augment_mask_set",
    "generate_synthetic",
    "load_dataset",
    "make_partition",
    "resize_mask_64",
    "sample_batches",
    "MetricsReport",
    "dice",
    "evaluate",
    "iou",
    "DecoderSpec",
    "EncoderSpec",
    "FeatureDropoutConfig",
    "SegModel",
    "build_segmodel",
    "foreground_prob_64",
    "load_segmodel",
    "save_segmodel",
    "DiscriminatorSpec",
    "GanTrainConfig",
    "GeneratorSpec",
    "ShapePriorHandle",
    "TrainingDiverged",
    "critic_loss",
    "generator_loss",
    "gradient_penalty",
    "load_shape_prior",
    "shape_prior_loss",
    "train_shape_prior",
    "LossWeights",
    "OptimConfig",
    "poly_lr",
    "pseudo_label",
    "supervised_loss",
    "total_loss",
    "train",
    "train_labeled_only_baseline",
    "unsupervised_loss",
]
