"""Group-robust last-layer adaptation on frozen embeddings.

The toolkit trains linear softmax heads (average-risk and group-robust
baselines), then adapts a frozen head along the top eigenvectors of an
error-weighted embedding covariance via a small low-rank logit adjustment.
It ships a synthetic unknown-group benchmark, group metrics, and a CLI.
"""

from .adapt import (
    LeiaAdjustment,
    LeiaConfig,
    LeiaModel,
    LeiaWeights,
    build_error_subspace,
    compute_leia_weights,
    fit_adjustment,
    leia_logits,
    select_rank,
)
from .data import (
    EmbeddingDataset,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .heads import (
    GdroConfig,
    LinearHead,
    TrainConfig,
    TrainedHead,
    head_gradient,
    predict_logits,
    train_erm,
    train_gdro,
)
from .linalg import (
    EigenDecomposition,
    ErrorSubspace,
    NumericalError,
    cross_entropy,
    cumulative_explained_variance,
    error_weighted_covariance,
    softmax,
    symmetric_eigendecomposition,
    top_k_subspace,
    weighted_mean,
)
from .metrics import (
    GroupMetrics,
    SelectionRegime,
    harm,
    per_group_metrics,
    selection_criterion,
    subgroup_risk,
    worst_class_accuracy,
)

__version__ = "0.1.0"
