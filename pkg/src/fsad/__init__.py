"""fsad: few-shot interpretable anomaly detection toolkit.

Training couples a metric-learning margin objective on pooled feature
embeddings with an entropy-based scoring loss on a trainable two-class
head; interpretation heatmaps come from entropy-ranked score gradients.
"""

from .data import (
    DatasetIndex,
    ImageRecord,
    KShotSplit,
    load_image,
    load_mask,
    load_split,
    make_kshot_split,
    save_split,
    scan_dataset,
)
from .estimator import FewShotAnomalyDetector
from .evaluate import (
    EvalReport,
    auroc,
    evaluate_split,
    export_embeddings,
    map_at_r,
    noisy_linear_impute,
    pixel_auroc,
    recall_at_1,
    road_score,
)
from .interpret import Heatmap, build_heatmap, explain, gradient_maps, map_entropy
from .metric import (
    PairBatch,
    cosine_distance,
    margin_loss,
    sample_pairs_distance_weighted,
)
from .network import DetectionModel, build_model
from .objective import LossReport, entropy_loss, rectify_scores, total_loss
from .synthetic import generate_synthetic
from .training import (
    TrainConfig,
    TrainResult,
    evaluate_epoch,
    load_checkpoint,
    save_checkpoint,
    train_from_split,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex",
    "DetectionModel",
    "EvalReport",
    "FewShotAnomalyDetector",
    "Heatmap",
    "ImageRecord",
    "KShotSplit",
    "LossReport",
    "PairBatch",
    "TrainConfig",
    "TrainResult",
    "auroc",
    "build_heatmap",
    "build_model",
    "cosine_distance",
    "entropy_loss",
    "evaluate_epoch",
    "evaluate_split",
    "explain",
    "export_embeddings",
    "generate_synthetic",
    "gradient_maps",
    "load_checkpoint",
    "load_image",
    "load_mask",
    "load_split",
    "make_kshot_split",
    "map_at_r",
    "map_entropy",
    "margin_loss",
    "noisy_linear_impute",
    "pixel_auroc",
    "recall_at_1",
    "rectify_scores",
    "road_score",
    "sample_pairs_distance_weighted",
    "save_checkpoint",
    "save_split",
    "scan_dataset",
    "total_loss",
    "train_from_split",
    "train_model",
]
