"""Group metrics, subgroup risk, and model selection for three regimes of
attribute availability (none, partial, complete)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import EmbeddingDataset
from .linalg import cross_entropy_rows

__all__ = [
    "GroupMetrics",
    "SelectionRegime",
    "predictions_from_logits",
    "per_group_metrics",
    "subgroup_risk",
    "worst_class_accuracy",
    "selection_criterion",
    "harm",
    "unknown_group_accuracy",
    "metrics_to_json",
]

REGIMES = ("no_group_info", "partial", "complete")


@dataclass
class GroupMetrics:
    per_group_accuracy: dict[int, float]
    per_group_count: dict[int, int]
    average_accuracy: float
    worst_group_accuracy: float
    worst_group_id: int


@dataclass
class SelectionRegime:
    """Which group knowledge the model-selection criterion may use."""

    kind: str
    known_groups: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"regime kind must be one of {REGIMES}, got {self.kind!r}")
        if self.kind == "partial":
            if not self.known_groups:
                raise ValueError("partial regime requires non-empty known_groups")
            self.known_groups = tuple(sorted(set(int(g) for g in self.known_groups)))
        elif self.known_groups is not None:
            raise ValueError("known_groups only applies to the partial regime")


def predictions_from_logits(logits) -> np.ndarray:
    """Row argmax with ties broken toward the lowest class index."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"logits must be (n, C), got {arr.shape}")
    return np.argmax(arr, axis=1).astype(np.int64)


def per_group_metrics(predictions, dataset: EmbeddingDataset) -> GroupMetrics:
    """Accuracy per populated group, count-weighted average, and the worst.

    Groups absent from the dataset are excluded from the minimum; ties for
    the worst group resolve to the lowest group id.
    """
    if not dataset.has_groups:
        raise ValueError(
            "dataset has no group annotations; use class-level metrics instead")
    preds = np.asarray(predictions, dtype=np.int64)
    if preds.shape != (dataset.n,):
        raise ValueError(
            f"predictions shape {preds.shape} does not match n={dataset.n}")
    correct = preds == dataset.labels
    accuracies: dict[int, float] = {}
    counts: dict[int, int] = {}
    for g in range(dataset.num_groups):
        mask = dataset.groups == g
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        counts[g] = cnt
        accuracies[g] = float(correct[mask].mean())
    worst_id = min(accuracies, key=lambda g: (accuracies[g], g))
    return GroupMetrics(
        per_group_accuracy=accuracies,
        per_group_count=counts,
        average_accuracy=float(correct.mean()),
        worst_group_accuracy=accuracies[worst_id],
        worst_group_id=worst_id,
    )


def subgroup_risk(logits, dataset: EmbeddingDataset, group: int) -> float:
    """Mean cross-entropy over the members of one group."""
    if not dataset.has_groups:
        raise ValueError("dataset has no group annotations")
    mask = dataset.groups == group
    if not mask.any():
        raise ValueError(f"group {group} has no members in this dataset")
    losses = cross_entropy_rows(np.asarray(logits)[mask], dataset.labels[mask])
    return float(losses.mean())


def worst_class_accuracy(predictions, labels, num_classes: int) -> float:
    """Minimum per-class accuracy; every class must be populated."""
    preds = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if preds.shape != y.shape:
        raise ValueError(
            f"predictions shape {preds.shape} does not match labels {y.shape}")
    worst = 1.0
    for c in range(num_classes):
        mask = y == c
        if not mask.any():
            raise ValueError(f"class {c} has no examples in the evaluation set")
        worst = min(worst, float((preds[mask] == c).mean()))
    return worst


def selection_criterion(regime: SelectionRegime, logits,
                        dataset: EmbeddingDataset) -> float:
    """Model-selection score (higher is better) under a regime.

    no_group_info: worst per-class accuracy. partial: worst accuracy over
    the known groups only. complete: worst accuracy over all groups.
    """
    preds = predictions_from_logits(logits)
    if regime.kind == "no_group_info":
        return worst_class_accuracy(preds, dataset.labels, dataset.num_classes)
    if not dataset.has_groups:
        raise ValueError(f"{regime.kind} regime requires group annotations")
    gm = per_group_metrics(preds, dataset)
    if regime.kind == "complete":
        return gm.worst_group_accuracy
    known = [g for g in regime.known_groups if g in gm.per_group_accuracy]
    if not known:
        raise ValueError("no known group is populated in the validation set")
    return min(gm.per_group_accuracy[g] for g in known)


def harm(erm_uga: float, gdro_uga: float) -> float:
    """Drop in unknown-group accuracy caused by group-based training.

    Positive values mean the group-aware model hurt the latent group;
    negative values are allowed. Both inputs must share a unit (either
    fractions in [0, 1] or percentages in [0, 100]).
    """
    for name, v in (("erm_uga", erm_uga), ("gdro_uga", gdro_uga)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name}={v} outside [0, 100]")
    return erm_uga - gdro_uga


def unknown_group_accuracy(metrics: GroupMetrics) -> Optional[float]:
    """Accuracy of group 0, the latent-group convention; None if unpopulated."""
    return metrics.per_group_accuracy.get(0)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_to_json(metrics: GroupMetrics) -> str:
    """Flat JSON with fixed key order and 6-decimal floats, so identical
    metrics always serialize to identical bytes."""
    uga = unknown_group_accuracy(metrics)
    per_group = ", ".join(
        f'"{g}": {{"acc": {_fmt(metrics.per_group_accuracy[g])}, '
        f'"n": {metrics.per_group_count[g]}}}'
        for g in sorted(metrics.per_group_accuracy))
    uga_text = "null" if uga is None else _fmt(uga)
    return (
        "{"
        f'"wga": {_fmt(metrics.worst_group_accuracy)}, '
        f'"avg_acc": {_fmt(metrics.average_accuracy)}, '
        f'"uga": {uga_text}, '
        f'"per_group": {{{per_group}}}, '
        f'"worst_group_id": {metrics.worst_group_id}'
        "}"
    )
