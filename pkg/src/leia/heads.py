"""Linear softmax heads with ERM and Group DRO trainers on frozen embeddings.

Training is full-batch gradient descent with classical momentum from a zero
initialization, which makes every run a deterministic function of (dataset,
config). The softmax-regression objective is convex, so the zero start only
affects the trajectory, never the reachable optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import EmbeddingDataset
from .linalg import NumericalError, cross_entropy_rows, softmax_and_losses, softmax_rows

__all__ = [
    "LinearHead",
    "TrainConfig",
    "GdroConfig",
    "EpochRecord",
    "TrainedHead",
    "predict_logits",
    "head_gradient",
    "train_erm",
    "train_gdro",
    "write_head",
    "read_head",
    "format_head_block",
    "parse_head_block",
]

# validation = (dataset, criterion); criterion maps (logits, dataset) -> float,
# higher is better. Used for best-epoch selection, never to stop early.
Criterion = Callable[[np.ndarray, EmbeddingDataset], float]
Validation = tuple[EmbeddingDataset, Criterion]


@dataclass
class LinearHead:
    """Classifier weights W (C x d) and bias b (C,) producing W z + b."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight "
                f"{self.weight.shape}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head parameters contain non-finite values")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    l2_penalty: float = 0.0
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.l2_penalty < 0.0:
            raise ValueError("l2_penalty must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class GdroConfig:
    base: TrainConfig
    known_groups: tuple[int, ...]
    eta: float = 0.01

    def __post_init__(self):
        self.known_groups = tuple(sorted(set(int(g) for g in self.known_groups)))
        if not self.known_groups:
            raise ValueError("known_groups must be non-empty")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")


@dataclass
class EpochRecord:
    loss: float
    criterion: Optional[float] = None


@dataclass
class TrainedHead:
    head: LinearHead
    provenance: str  # "erm" or "gdro"
    history: list[EpochRecord] = field(default_factory=list)
    # best state under the validation criterion; -1 denotes the untrained
    # initialization, None means no validation was supplied
    best_epoch: Optional[int] = None
    # per-epoch adversarial group weights over known groups, gdro only
    group_weights: Optional[np.ndarray] = None


def predict_logits(head: LinearHead, z) -> np.ndarray:
    """Base logits W z + b for one embedding (d,) or a batch (n, d)."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != head.dim:
            raise ValueError(
                f"embedding has dim {arr.shape[0]}, head expects {head.dim}")
        return head.weight @ arr + head.bias
    if arr.ndim == 2:
        if arr.shape[1] != head.dim:
            raise ValueError(
                f"embeddings have dim {arr.shape[1]}, head expects {head.dim}")
        return arr @ head.weight.T + head.bias
    raise ValueError(f"z must be 1-D or 2-D, got shape {arr.shape}")


def _normalize_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"example weights shape {w.shape} does not match n={n}")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"example weights must sum to 1 (got {float(w.sum())!r})")
    return w


def objective_value(head: LinearHead, embeddings, labels, weights=None,
                    l2_penalty: float = 0.0) -> float:
    """Weighted cross-entropy risk plus (l2/2) ||W||_F^2."""
    z = np.asarray(embeddings, dtype=np.float64)
    w = _normalize_weights(weights, z.shape[0])
    losses = cross_entropy_rows(predict_logits(head, z), labels)
    return float(w @ losses + 0.5 * l2_penalty * np.sum(head.weight ** 2))


def head_gradient(head: LinearHead, embeddings, labels, weights=None,
                  l2_penalty: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of the weighted risk w.r.t. (W, b).

    Closed form: sum_i w_i (softmax(f_i) - onehot(y_i)) z_i^T + l2 * W for
    the weights, and the same residuals summed for the bias. The bias is
    not penalized.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.dim:
        raise ValueError(
            f"embeddings shape {z.shape} does not match head dim {head.dim}")
    y = np.asarray(labels, dtype=np.int64)
    w = _normalize_weights(weights, z.shape[0])
    logits = predict_logits(head, z)
    resid = softmax_rows(logits)
    resid[np.arange(z.shape[0]), y] -= 1.0
    weighted = w[:, None] * resid
    grad_w = weighted.T @ z + l2_penalty * head.weight
    grad_b = weighted.sum(axis=0)
    return grad_w, grad_b


def _descend(dataset: EmbeddingDataset, config: TrainConfig, provenance: str,
             weight_fn, validation: Optional[Validation]) -> TrainedHead:
    """Shared momentum-descent loop; weight_fn supplies per-epoch example
    weights (and the loss actually being minimized) given current losses."""
    n, d, c = dataset.n, dataset.dim, dataset.num_classes
    z, y = dataset.embeddings, dataset.labels
    w_mat = np.zeros((c, d))
    b_vec = np.zeros(c)
    vel_w = np.zeros((c, d))
    vel_b = np.zeros(c)
    rows = np.arange(n)
    history: list[EpochRecord] = []
    q_history: list[np.ndarray] = []
    best: tuple[float, int, np.ndarray, np.ndarray] | None = None

    if validation is not None:
        # the untrained state competes too: when even one descent step on
        # the available groups harms the criterion, selection keeps it
        val_set, criterion = validation
        val_z = val_set.embeddings
        init_crit = float(criterion(val_z @ w_mat.T + b_vec, val_set))
        best = (init_crit, -1, w_mat.copy(), b_vec.copy())

    # overflow to inf inside the loop is expected right before the
    # divergence check fires; keep it silent
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            logits = z @ w_mat.T + b_vec
            probs, losses = softmax_and_losses(logits, y)
            weights, loss, q = weight_fn(losses)
            loss += 0.5 * config.l2_penalty * float(np.sum(w_mat ** 2))
            if not np.isfinite(loss):
                raise NumericalError(
                    f"{provenance} training diverged at epoch {epoch} "
                    f"(learning_rate={config.learning_rate})")
            if q is not None:
                q_history.append(q)
            probs[rows, y] -= 1.0
            weighted = weights[:, None] * probs
            grad_w = weighted.T @ z + config.l2_penalty * w_mat
            grad_b = weighted.sum(axis=0)
            vel_w = config.momentum * vel_w + grad_w
            vel_b = config.momentum * vel_b + grad_b
            w_mat = w_mat - config.learning_rate * vel_w
            b_vec = b_vec - config.learning_rate * vel_b
            crit = None
            if validation is not None:
                crit = float(criterion(val_z @ w_mat.T + b_vec, val_set))
                if crit > best[0]:
                    best = (crit, epoch, w_mat.copy(), b_vec.copy())
            history.append(EpochRecord(loss=float(loss), criterion=crit))

    best_epoch = None
    if best is not None:
        best_epoch = best[1]
        w_mat, b_vec = best[2], best[3]
    return TrainedHead(
        head=LinearHead(weight=w_mat, bias=b_vec), provenance=provenance,
        history=history, best_epoch=best_epoch,
        group_weights=np.array(q_history) if q_history else None)


def train_erm(train: EmbeddingDataset, config: TrainConfig,
              validation: Optional[Validation] = None) -> TrainedHead:
    """Average-risk training over all examples.

    Runs the full epoch budget; when a validation pair is supplied the
    returned head is the best state under the criterion (initialization
    and every post-epoch state compete, ties prefer the earliest), not
    the last.
    """
    if train.num_classes < 2:
        raise ValueError("training requires at least 2 classes")
    uniform = np.full(train.n, 1.0 / train.n)

    def weight_fn(losses: np.ndarray):
        return uniform, float(losses.mean()), None

    return _descend(train, config, "erm", weight_fn, validation)


def train_gdro(train: EmbeddingDataset, config: GdroConfig,
               validation: Optional[Validation] = None) -> TrainedHead:
    """Minimax training over annotated groups via multiplicative weights.

    Each epoch: per-group mean losses l_g over the known groups, then
    q_g <- q_g * exp(eta * l_g) renormalized, then a descent step on
    sum_g q_g l_g. Examples outside known_groups contribute nothing.
    """
    if not train.has_groups:
        raise ValueError("Group DRO requires group annotations")
    known = config.known_groups
    for g in known:
        if not 0 <= g < train.num_groups:
            raise ValueError(
                f"known group {g} out of range for num_groups={train.num_groups}")
    masks = [train.groups == g for g in known]
    counts = np.array([int(m.sum()) for m in masks], dtype=np.int64)
    if (counts == 0).any():
        empty = known[int(np.flatnonzero(counts == 0)[0])]
        raise ValueError(f"known group {empty} has no training examples")

    q = np.full(len(known), 1.0 / len(known))
    base = np.zeros(train.n)
    for m, cnt in zip(masks, counts):
        base[m] = 1.0 / cnt  # within-group uniform; scaled by q each epoch

    def weight_fn(losses: np.ndarray):
        nonlocal q
        group_losses = np.array([float(losses[m].mean()) for m in masks])
        q = q * np.exp(config.eta * group_losses)
        q = q / q.sum()
        weights = base.copy()
        for qi, m in zip(q, masks):
            weights[m] *= qi
        return weights, float(q @ group_losses), q.copy()

    return _descend(train, config.base, "gdro", weight_fn, validation)


def format_head_block(head: LinearHead) -> str:
    """Head as a TSV block: header line, then C rows of d+1 floats
    (weights then bias), 17 significant digits."""
    lines = [f"# head C={head.num_classes} d={head.dim}"]
    for i in range(head.num_classes):
        row = [f"{v:.17g}" for v in head.weight[i]] + [f"{head.bias[i]:.17g}"]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def parse_head_block(lines: Sequence[str], start: int = 0) -> tuple[LinearHead, int]:
    """Parse a head block; returns the head and the index one past it."""
    if start >= len(lines) or not lines[start].startswith("# head "):
        raise ValueError(f"expected '# head' block at line {start + 1}")
    kv = dict(part.split("=", 1) for part in lines[start].split()[2:])
    c, d = int(kv["C"]), int(kv["d"])
    if len(lines) < start + 1 + c:
        raise ValueError("truncated head block")
    weight = np.empty((c, d))
    bias = np.empty(c)
    for i in range(c):
        cells = lines[start + 1 + i].split("\t")
        if len(cells) != d + 1:
            raise ValueError(
                f"head row {i} has {len(cells)} cells, expected {d + 1}")
        weight[i] = [float(x) for x in cells[:d]]
        bias[i] = float(cells[d])
    return LinearHead(weight=weight, bias=bias), start + 1 + c


def write_head(head: LinearHead, path) -> None:
    Path(path).write_text(format_head_block(head), encoding="utf-8")


def read_head(path) -> LinearHead:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head, _ = parse_head_block(lines)
    return head
