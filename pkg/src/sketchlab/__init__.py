"""sketchlab: clustering, centroid-voting classification and evaluation for
sketch embedding sets, plus a small from-scratch CNN baseline.

All seeded randomness uses numpy's PCG64 generator
(``numpy.random.default_rng``), so results are reproducible across platforms.
"""

__version__ = "0.1.0"

from .cluster import (
    CentroidModel,
    KMeansConfig,
    SilhouetteReport,
    fit_class_centroids,
    kmeanspp_seed,
    lloyd_fit,
    silhouette,
)
from .data import (
    ClassHistogram,
    DatasetFormatError,
    EmbeddingSet,
    SampleMeta,
    SplitSpec,
    class_histogram,
    clean_by_guess_rate,
    load_embedding_set,
    rebalance_classes,
    save_embedding_set,
    split,
)
from .evaluate import (
    AccuracyReport,
    ConfusionMatrix,
    confusion_matrix,
    ema_smooth,
    most_confused,
    top_n_accuracy,
)
from .knnpp import Prediction, VotingConfig, classify, classify_batch, vote_weight
from .project import Projection2D, pca2, tsne2

__all__ = [
    "__version__",
    "CentroidModel",
    "ClassHistogram",
    "ConfusionMatrix",
    "AccuracyReport",
    "DatasetFormatError",
    "EmbeddingSet",
    "KMeansConfig",
    "Prediction",
    "Projection2D",
    "SampleMeta",
    "SilhouetteReport",
    "SplitSpec",
    "VotingConfig",
    "class_histogram",
    "classify",
    "classify_batch",
    "clean_by_guess_rate",
    "confusion_matrix",
    "ema_smooth",
    "fit_class_centroids",
    "kmeanspp_seed",
    "lloyd_fit",
    "load_embedding_set",
    "most_confused",
    "pca2",
    "rebalance_classes",
    "save_embedding_set",
    "silhouette",
    "split",
    "top_n_accuracy",
    "tsne2",
    "vote_weight",
]
