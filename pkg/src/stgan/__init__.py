"""Semi-supervised GAN training with self-training meta-algorithms."""

from .data import (
    Dataset,
    SplitSpec,
    load_idx,
    pad_images,
    save_idx,
    stratified_split,
    synthetic_blobs,
    synthetic_digits,
)
from .gan import (
    DiscriminatorOutput,
    GanBackend,
    GanConfig,
    TrainedGan,
    evaluate_error,
    generate,
    train,
)
from .selftrain import (
    PoolState,
    PseudoLabelRecord,
    RoundRecord,
    SelfTrainConfig,
    SelfTrainResult,
    basic_self_train,
    calculate_disagreement,
    confident_half,
    corrupt_labels,
    negative_entropy,
    rejection_self_train,
    relabel_added,
)

__version__ = "0.1.0"
__all__ = [
    "Dataset",
    "SplitSpec",
    "load_idx",
    "save_idx",
    "pad_images",
    "stratified_split",
    "synthetic_blobs",
    "synthetic_digits",
    "GanConfig",
    "GanBackend",
    "TrainedGan",
    "DiscriminatorOutput",
    "train",
    "generate",
    "evaluate_error",
    "SelfTrainConfig",
    "SelfTrainResult",
    "PoolState",
    "PseudoLabelRecord",
    "RoundRecord",
    "basic_self_train",
    "rejection_self_train",
    "negative_entropy",
    "confident_half",
    "corrupt_labels",
    "calculate_disagreement",
    "relabel_added",
]
