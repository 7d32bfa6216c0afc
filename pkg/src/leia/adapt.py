"""Stage-2 low-rank error-informed adaptation of a frozen linear head.

The pipeline: score the held-out adaptation split with the frozen head,
turn per-example losses into normalized weights that emphasize high-loss
examples, take the top-k eigenvectors of the weighted embedding covariance
as the error subspace, then learn a small k x C logit adjustment restricted
to that subspace. The base head is never touched and the weights are never
recomputed during the fit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import EmbeddingDataset
from .heads import (
    LinearHead,
    Validation,
    format_head_block,
    parse_head_block,
    predict_logits,
)
from .linalg import (
    ErrorSubspace,
    NumericalError,
    cross_entropy_rows,
    cumulative_explained_variance,
    error_weighted_covariance,
    softmax_and_losses,
    softmax_rows,
    symmetric_eigendecomposition,
    top_k_subspace,
)

__all__ = [
    "LeiaWeights",
    "LeiaConfig",
    "LeiaAdjustment",
    "LeiaModel",
    "compute_leia_weights",
    "build_error_subspace",
    "leia_logits",
    "fit_adjustment",
    "select_rank",
    "write_model",
    "read_model",
]

WEIGHT_VARIANTS = ("cross_entropy", "one_minus_p")


@dataclass
class LeiaWeights:
    """Normalized per-example weights: strictly positive, summing to 1."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] < 1:
            raise ValueError(f"weights must be a non-empty vector, got "
                             f"shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights contain non-finite values")
        if (self.values <= 0.0).any():
            zeros = int((self.values <= 0.0).sum())
            raise NumericalError(
                f"{zeros} example weight(s) underflowed to zero; "
                f"reduce the sharpness gamma")
        if abs(float(self.values.sum()) - 1.0) > 1e-12:
            raise ValueError(
                f"weights must sum to 1 within 1e-12 (got {float(self.values.sum())!r})")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class LeiaConfig:
    """Hyperparameters of the adaptation stage.

    gamma is the loss-weight sharpness, rank the subspace dimension.
    The default learning rate and zero regularization match the tuned
    stage-2 settings used throughout the benchmark runs.
    """

    gamma: float
    rank: int
    weight_variant: str = "one_minus_p"
    learning_rate: float = 0.02
    epochs: int = 100
    reg_coeff: float = 0.0

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ValueError(
                f"weight_variant must be one of {WEIGHT_VARIANTS}, "
                f"got {self.weight_variant!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.reg_coeff < 0.0:
            raise ValueError("reg_coeff must be >= 0")


@dataclass
class LeiaAdjustment:
    """The k x C adjustment matrix, the only learnable stage-2 parameter."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"adjustment must be 2-D, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("adjustment contains non-finite values")


@dataclass
class LeiaModel:
    """Frozen head + error subspace + low-rank adjustment."""

    head: LinearHead
    subspace: ErrorSubspace
    adjustment: LeiaAdjustment

    def __post_init__(self):
        d, k = self.subspace.basis.shape
        if d != self.head.dim:
            raise ValueError(
                f"subspace dim {d} does not match head dim {self.head.dim}")
        if self.adjustment.matrix.shape != (k, self.head.num_classes):
            raise ValueError(
                f"adjustment shape {self.adjustment.matrix.shape} does not "
                f"match rank {k} x classes {self.head.num_classes}")


def compute_leia_weights(base_logits, labels, gamma: float,
                         variant: str = "one_minus_p") -> LeiaWeights:
    """Per-example weights growing with the frozen model's loss.

    The raw log-weight is gamma * loss (cross_entropy variant, i.e.
    weights proportional to p_true^(-gamma)) or gamma * (1 - p_true)
    (one_minus_p variant). The max log-weight is subtracted before
    exponentiation, then the result is normalized to sum 1. gamma = 0
    yields uniform weights under either variant.
    """
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if variant not in WEIGHT_VARIANTS:
        raise ValueError(f"unknown weight variant {variant!r}")
    logits = np.asarray(base_logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"base_logits must be (n, C), got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("base_logits contain non-finite values")
    y = np.asarray(labels, dtype=np.int64)
    if variant == "cross_entropy":
        raw = gamma * cross_entropy_rows(logits, y)
    else:
        p_true = softmax_rows(logits)[np.arange(logits.shape[0]), y]
        raw = gamma * (1.0 - p_true)
    raw = raw - raw.max()
    w = np.exp(raw)
    return LeiaWeights(values=w / w.sum())


def build_error_subspace(embeddings, weights: LeiaWeights, k: int) -> ErrorSubspace:
    """Top-k eigenvectors of the weighted embedding covariance.

    Degenerate inputs whose weighted covariance has no spectral mass (all
    the weight sits on a single point) are rejected rather than returning
    an arbitrary basis that would silently poison the downstream fit.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"embeddings must be (n, d), got {z.shape}")
    n, d = z.shape
    if not 1 <= k <= min(d, n):
        raise ValueError(f"k={k} out of range for n={n}, d={d}")
    cov = error_weighted_covariance(z, weights.values)
    decomposition = symmetric_eigendecomposition(cov)
    subspace = top_k_subspace(decomposition, k)
    if subspace.total_variance <= 0.0:
        raise NumericalError(
            "weighted covariance has no error structure (zero spectrum)")
    return subspace


def leia_logits(model: LeiaModel, z) -> np.ndarray:
    """Adapted logits f(z) + A^T V_k^T z for one embedding or a batch.

    The projection applies V_k^T to the raw (uncentered) embedding even
    though the covariance behind V_k is centered; any mean offset simply
    shifts all logits by a constant vector absorbed during the fit.
    """
    arr = np.asarray(z, dtype=np.float64)
    base = predict_logits(model.head, arr)
    if arr.ndim == 1:
        return base + model.adjustment.matrix.T @ (model.subspace.basis.T @ arr)
    return base + (arr @ model.subspace.basis) @ model.adjustment.matrix


def fit_adjustment(adapt_set: EmbeddingDataset, head: LinearHead,
                   subspace: ErrorSubspace, weights: LeiaWeights,
                   config: LeiaConfig,
                   validation: Optional[Validation] = None) -> LeiaAdjustment:
    """Fit the k x C adjustment by full-batch gradient descent.

    Minimizes sum_i w_i ce(f(z_i) + A^T V_k^T z_i, y_i) + reg ||A||_F^2
    from A = 0 for the full epoch budget. The weights are those computed
    once from the frozen head and are held fixed throughout. With a
    validation pair, the best epoch under the criterion is returned.
    """
    if weights.n != adapt_set.n:
        raise ValueError(
            f"weights cover {weights.n} examples, adapt set has {adapt_set.n}")
    d, k = subspace.basis.shape
    if d != adapt_set.dim:
        raise ValueError(
            f"subspace dim {d} does not match dataset dim {adapt_set.dim}")
    c = head.num_classes
    z = adapt_set.embeddings
    y = adapt_set.labels
    w = weights.values
    base = predict_logits(head, z)
    projected = z @ subspace.basis  # (n, k)
    if validation is not None:
        val_set, criterion = validation
        val_base = predict_logits(head, val_set.embeddings)
        val_projected = val_set.embeddings @ subspace.basis

    a = np.zeros((k, c))
    best: tuple[float, np.ndarray] | None = None
    if validation is not None:
        best = (float(criterion(val_base, val_set)), a.copy())
    idx = np.arange(adapt_set.n)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            logits = base + projected @ a
            probs, losses = softmax_and_losses(logits, y)
            loss = float(w @ losses) + config.reg_coeff * float(np.sum(a ** 2))
            if not np.isfinite(loss):
                raise NumericalError(
                    f"adjustment fit diverged at epoch {epoch} "
                    f"(learning_rate={config.learning_rate})")
            probs[idx, y] -= 1.0
            grad = projected.T @ (w[:, None] * probs) + 2.0 * config.reg_coeff * a
            a = a - config.learning_rate * grad
            if validation is not None:
                crit = float(criterion(val_base + val_projected @ a, val_set))
                if best is None or crit > best[0]:
                    best = (crit, a.copy())
    if best is not None:
        a = best[1]
    return LeiaAdjustment(matrix=a)


def select_rank(eigenvalues, band_low: float = 0.5,
                band_high: float = 0.9) -> list[int]:
    """Candidate ranks whose explained-variance ratio lies in the band.

    Boundaries are inclusive. If no rank lands inside the band, the
    smallest rank reaching band_low is returned as a singleton fallback.
    """
    vals = np.asarray(eigenvalues, dtype=np.float64)
    n = vals.shape[0]
    cevs = [cumulative_explained_variance(vals, k) for k in range(1, n + 1)]
    in_band = [k for k, cev in zip(range(1, n + 1), cevs)
               if band_low <= cev <= band_high]
    if in_band:
        return in_band
    for k, cev in zip(range(1, n + 1), cevs):
        if cev >= band_low:
            return [k]
    return [n]  # unreachable for a valid spectrum (cev ends at 1.0)


def format_model(model: LeiaModel) -> str:
    """Model as stacked TSV blocks: head, subspace (basis written as d rows
    of k columns plus one eigenvalues line), adjustment. 17 significant
    digits throughout."""
    d, k = model.subspace.basis.shape
    c = model.head.num_classes
    parts = [format_head_block(model.head)]
    lines = [f"# subspace d={d} k={k}"]
    for i in range(d):
        lines.append("\t".join(f"{v:.17g}" for v in model.subspace.basis[i]))
    lines.append("\t".join(f"{v:.17g}" for v in model.subspace.eigenvalues))
    lines.append(f"# adjustment k={k} C={c}")
    for i in range(k):
        lines.append("\t".join(f"{v:.17g}" for v in model.adjustment.matrix[i]))
    parts.append("\n".join(lines) + "\n")
    return "".join(parts)


def parse_model(text: str) -> LeiaModel:
    lines = text.splitlines()
    head, pos = parse_head_block(lines)
    if pos >= len(lines) or not lines[pos].startswith("# subspace "):
        raise ValueError(f"expected '# subspace' block at line {pos + 1}")
    kv = dict(part.split("=", 1) for part in lines[pos].split()[2:])
    d, k = int(kv["d"]), int(kv["k"])
    if len(lines) < pos + 1 + d + 1:
        raise ValueError("truncated subspace block")
    basis = np.empty((d, k))
    for i in range(d):
        cells = lines[pos + 1 + i].split("\t")
        if len(cells) != k:
            raise ValueError(f"subspace row {i} has {len(cells)} cells, expected {k}")
        basis[i] = [float(x) for x in cells]
    eig_cells = lines[pos + 1 + d].split("\t")
    if len(eig_cells) != k:
        raise ValueError(f"eigenvalues line has {len(eig_cells)} cells, expected {k}")
    eigenvalues = np.array([float(x) for x in eig_cells])
    pos = pos + 2 + d
    if pos >= len(lines) or not lines[pos].startswith("# adjustment "):
        raise ValueError(f"expected '# adjustment' block at line {pos + 1}")
    kv = dict(part.split("=", 1) for part in lines[pos].split()[2:])
    ak, ac = int(kv["k"]), int(kv["C"])
    if len(lines) < pos + 1 + ak:
        raise ValueError("truncated adjustment block")
    matrix = np.empty((ak, ac))
    for i in range(ak):
        cells = lines[pos + 1 + i].split("\t")
        if len(cells) != ac:
            raise ValueError(
                f"adjustment row {i} has {len(cells)} cells, expected {ac}")
        matrix[i] = [float(x) for x in cells]
    # the stored spectrum is the top-k slice; its sum stands in for the
    # full spectral mass, which prediction never needs
    subspace = ErrorSubspace(basis=basis, eigenvalues=eigenvalues,
                             total_variance=float(np.maximum(eigenvalues, 0.0).sum()))
    return LeiaModel(head=head, subspace=subspace,
                     adjustment=LeiaAdjustment(matrix=matrix))


def write_model(model: LeiaModel, path) -> None:
    Path(path).write_text(format_model(model), encoding="utf-8")


def read_model(path) -> LeiaModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))
