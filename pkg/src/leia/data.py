"""Embedding datasets: in-memory model, file formats, splits, synthetic data.

File formats
------------
Binary "LEMB v1", little-endian:
    magic ``LEMB`` | u32 version=1 | u32 flags (bit 0: groups present) |
    u64 n | u32 dim | u32 num_classes | u32 num_groups (0 when bit 0 clear),
    then n records of: dim * f32 embedding, u32 label, u32 group (iff bit 0).

TSV alternative: header line ``# lemb-tsv v1 n=<n> d=<d> c=<C> g=<G>``,
then one row per example: d floats (9 significant digits), label, optional
group, tab-separated.

Embeddings are stored as f32 on disk and widened to f64 in memory, so a
write/read roundtrip is exact at f32 precision for both formats.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataFormatError",
    "EmbeddingDataset",
    "SplitSpec",
    "SyntheticConfig",
    "read_dataset",
    "write_dataset",
    "split_indices",
    "split_dataset",
    "generate_synthetic",
]

MAGIC = b"LEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIII")
FLAG_GROUPS = 1


class DataFormatError(ValueError):
    """A dataset file failed to parse or violates its declared header."""


@dataclass
class EmbeddingDataset:
    """Frozen embeddings with class labels and optional group labels."""

    embeddings: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 in [0, num_classes)
    num_classes: int
    num_groups: int = 0  # 0 means unannotated
    groups: np.ndarray | None = None  # (n,) int64 in [0, num_groups)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one example")
        if self.labels.shape != (n,):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match n={n}"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            bad = int(np.flatnonzero(
                (self.labels < 0) | (self.labels >= self.num_classes))[0])
            raise ValueError(
                f"label {int(self.labels[bad])} at row {bad} out of range "
                f"for num_classes={self.num_classes}"
            )
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise ValueError(
                    f"groups shape {self.groups.shape} does not match n={n}"
                )
            if self.num_groups < 1:
                raise ValueError("num_groups must be >= 1 when groups are present")
            if self.groups.min() < 0 or self.groups.max() >= self.num_groups:
                bad = int(np.flatnonzero(
                    (self.groups < 0) | (self.groups >= self.num_groups))[0])
                raise ValueError(
                    f"group {int(self.groups[bad])} at row {bad} out of range "
                    f"for num_groups={self.num_groups}"
                )
        elif self.num_groups != 0:
            raise ValueError("num_groups must be 0 when groups are absent")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_groups(self) -> bool:
        return self.groups is not None

    def subset(self, indices) -> "EmbeddingDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(
            embeddings=self.embeddings[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            num_groups=self.num_groups,
            groups=None if self.groups is None else self.groups[idx],
        )


@dataclass
class SplitSpec:
    """Named fractions plus the shuffle seed. Fractions must sum to 1."""

    fractions: list[tuple[str, float]]
    seed: int = 0

    def __post_init__(self):
        if not self.fractions:
            raise ValueError("at least one split fraction is required")
        total = 0.0
        for name, frac in self.fractions:
            if frac <= 0.0:
                raise ValueError(f"fraction for split {name!r} must be positive")
            total += frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1 (got {total!r})")


@dataclass
class SyntheticConfig:
    """Knobs for the conflicting-spurious-correlations generator.

    The generated task has two classes and ``num_known_groups + 1`` groups;
    group 0 is the latent ("unknown") group whose spurious features point
    the opposite way from every annotated group.
    """

    num_known_groups: int
    unknown_ratio: float
    samples_per_known_group: int = 1000
    stable_dim: int = 5
    signal_strength: float = 1.5
    label_noise_sd: float = 0.8
    spurious_noise_sd: float = 0.5
    unknown_corr_strength: float = 4.5
    unknown_anticorr_strength: float = 3.0
    known_corr_strength: float = 4.0
    known_anticorr_strength: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.num_known_groups < 1:
            raise ValueError("num_known_groups must be >= 1")
        if not 0.0 < self.unknown_ratio <= 1.0:
            raise ValueError("unknown_ratio must be in (0, 1]")
        if self.samples_per_known_group < 1 or self.stable_dim < 1:
            raise ValueError("counts and dims must be >= 1")
        for name in ("signal_strength", "unknown_corr_strength",
                     "unknown_anticorr_strength", "known_corr_strength",
                     "known_anticorr_strength"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if self.label_noise_sd <= 0.0 or self.spurious_noise_sd <= 0.0:
            raise ValueError("noise standard deviations must be > 0")


def _record_dtype(dim: int, with_groups: bool) -> np.dtype:
    fields = [("embedding", "<f4", (dim,)), ("label", "<u4")]
    if with_groups:
        fields.append(("group", "<u4"))
    return np.dtype(fields)


def write_dataset(dataset: EmbeddingDataset, path, format: str = "binary") -> None:
    """Serialize a dataset; output bytes are a deterministic function of it."""
    p = Path(path)
    if format == "binary":
        data = _to_binary(dataset)
    elif format == "tsv":
        data = _to_tsv(dataset).encode("utf-8")
    else:
        raise ValueError(f"unknown format {format!r} (expected 'binary' or 'tsv')")
    try:
        p.write_bytes(data)
    except OSError as exc:
        raise OSError(f"failed to write dataset to {p}: {exc}") from exc


def read_dataset(path, format: str = "binary") -> EmbeddingDataset:
    """Parse a dataset file, validating every invariant before returning."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset file {p}: {exc}") from exc
    if format == "binary":
        return _from_binary(raw, p)
    if format == "tsv":
        return _from_tsv(raw.decode("utf-8"), p)
    raise ValueError(f"unknown format {format!r} (expected 'binary' or 'tsv')")


def _to_binary(ds: EmbeddingDataset) -> bytes:
    flags = FLAG_GROUPS if ds.has_groups else 0
    header = _HEADER.pack(MAGIC, VERSION, flags, ds.n, ds.dim,
                          ds.num_classes, ds.num_groups)
    rec = np.zeros(ds.n, dtype=_record_dtype(ds.dim, ds.has_groups))
    rec["embedding"] = ds.embeddings.astype(np.float32)
    rec["label"] = ds.labels.astype(np.uint32)
    if ds.has_groups:
        rec["group"] = ds.groups.astype(np.uint32)
    return header + rec.tobytes()


def _from_binary(raw: bytes, path: Path) -> EmbeddingDataset:
    if len(raw) < _HEADER.size:
        raise DataFormatError(
            f"{path}: truncated header, {len(raw)} bytes < {_HEADER.size}")
    magic, version, flags, n, dim, num_classes, num_groups = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise DataFormatError(
            f"{path}: unsupported version {version} at byte offset 4")
    with_groups = bool(flags & FLAG_GROUPS)
    if not with_groups and num_groups != 0:
        raise DataFormatError(
            f"{path}: num_groups={num_groups} but groups flag is clear")
    if with_groups and num_groups < 1:
        raise DataFormatError(f"{path}: groups flag set but num_groups=0")
    if n < 1:
        raise DataFormatError(f"{path}: empty payload (n=0) rejected")
    if dim < 1:
        raise DataFormatError(f"{path}: dim=0 rejected")
    dtype = _record_dtype(dim, with_groups)
    expected = _HEADER.size + n * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, "
            f"got {len(raw)} (truncation at byte offset {min(len(raw), expected)})")
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        off = _HEADER.size + i * dtype.itemsize + dim * 4
        raise DataFormatError(
            f"{path}: label {int(labels[i])} at record {i} (byte offset {off}) "
            f"out of range for num_classes={num_classes}")
    groups = None
    if with_groups:
        groups = rec["group"].astype(np.int64)
        bad = np.flatnonzero(groups >= num_groups)
        if bad.size:
            i = int(bad[0])
            off = _HEADER.size + i * dtype.itemsize + dim * 4 + 4
            raise DataFormatError(
                f"{path}: group {int(groups[i])} at record {i} (byte offset "
                f"{off}) out of range for num_groups={num_groups}")
    emb = rec["embedding"].astype(np.float64)
    if not np.all(np.isfinite(emb)):
        i = int(np.flatnonzero(~np.isfinite(emb).all(axis=1))[0])
        raise DataFormatError(f"{path}: non-finite embedding at record {i}")
    return EmbeddingDataset(embeddings=emb, labels=labels,
                            num_classes=int(num_classes),
                            num_groups=int(num_groups), groups=groups)


def _to_tsv(ds: EmbeddingDataset) -> str:
    lines = [f"# lemb-tsv v1 n={ds.n} d={ds.dim} c={ds.num_classes} g={ds.num_groups}"]
    emb32 = ds.embeddings.astype(np.float32)
    for i in range(ds.n):
        cells = [f"{float(x):.9g}" for x in emb32[i]]
        cells.append(str(int(ds.labels[i])))
        if ds.has_groups:
            cells.append(str(int(ds.groups[i])))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _from_tsv(text: str, path: Path) -> EmbeddingDataset:
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0]
    prefix = "# lemb-tsv v1 "
    if not header.startswith(prefix):
        raise DataFormatError(f"{path}: line 1: bad header {header!r}")
    try:
        kv = dict(part.split("=", 1) for part in header[len(prefix):].split())
        n, dim = int(kv["n"]), int(kv["d"])
        num_classes, num_groups = int(kv["c"]), int(kv["g"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: line 1: malformed header: {exc}") from exc
    if n < 1:
        raise DataFormatError(f"{path}: empty payload (n=0) rejected")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise DataFormatError(
            f"{path}: header declares n={n} but file has {len(rows)} data rows")
    with_groups = num_groups > 0
    ncols = dim + 1 + (1 if with_groups else 0)
    emb = np.empty((n, dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    groups = np.empty(n, dtype=np.int64) if with_groups else None
    for i, row in enumerate(rows):
        lineno = i + 2
        cells = row.split("\t")
        if len(cells) != ncols:
            raise DataFormatError(
                f"{path}: line {lineno}: expected {ncols} columns, got {len(cells)}")
        try:
            vals = np.array([float(c) for c in cells[:dim]], dtype=np.float32)
            label = int(cells[dim])
            group = int(cells[dim + 1]) if with_groups else None
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise DataFormatError(f"{path}: line {lineno}: non-finite embedding")
        if not 0 <= label < num_classes:
            raise DataFormatError(
                f"{path}: line {lineno}: label {label} out of range "
                f"for num_classes={num_classes}")
        emb[i] = vals.astype(np.float64)
        labels[i] = label
        if with_groups:
            if not 0 <= group < num_groups:
                raise DataFormatError(
                    f"{path}: line {lineno}: group {group} out of range "
                    f"for num_groups={num_groups}")
            groups[i] = group
    return EmbeddingDataset(embeddings=emb, labels=labels,
                            num_classes=num_classes,
                            num_groups=num_groups, groups=groups)


def split_indices(n: int, spec: SplitSpec) -> dict[str, np.ndarray]:
    """Deterministic disjoint cover of range(n) by the spec's fractions.

    Indices are shuffled once by the seeded PRNG, then cut into contiguous
    slices: floor(n * fraction) rows for every split but the last, which
    takes the remainder.
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    sizes = [int(math.floor(n * frac)) for _, frac in spec.fractions[:-1]]
    sizes.append(n - sum(sizes))
    out: dict[str, np.ndarray] = {}
    start = 0
    for (name, frac), size in zip(spec.fractions, sizes):
        if size < 1:
            raise ValueError(
                f"split {name!r} (fraction {frac}) would receive 0 of {n} examples")
        out[name] = perm[start:start + size]
        start += size
    return out


def split_dataset(dataset: EmbeddingDataset, spec: SplitSpec) -> dict[str, EmbeddingDataset]:
    """Partition a dataset per split_indices; subsets keep header counts."""
    return {name: dataset.subset(idx)
            for name, idx in split_indices(dataset.n, spec).items()}


def generate_synthetic(config: SyntheticConfig) -> EmbeddingDataset:
    """Two-class task where group 0 carries reversed spurious correlations.

    Feature layout is [spurious_0, spurious_1, stable_1..stable_k]. Labels
    come only from the stable block: y = 1 iff theta . x_stable + eps > 0,
    with theta drawn uniformly on the sphere and scaled to signal_strength.
    Writing s = +1 for y=1 and s = -1 for y=0, the spurious features are
    s times a group-dependent strength plus Gaussian noise: annotated
    groups correlate feature 1 with the label and anti-correlate feature 0;
    group 0 does the opposite.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    theta = rng.standard_normal(cfg.stable_dim)
    norm = float(np.linalg.norm(theta))
    while norm == 0.0:  # probability-zero guard
        theta = rng.standard_normal(cfg.stable_dim)
        norm = float(np.linalg.norm(theta))
    theta = theta * (cfg.signal_strength / norm)

    unknown_count = int(round(cfg.unknown_ratio * cfg.samples_per_known_group))
    if unknown_count < 1:
        raise ValueError(
            f"unknown group rounds to 0 examples "
            f"(ratio {cfg.unknown_ratio} of {cfg.samples_per_known_group})")
    counts = [unknown_count] + [cfg.samples_per_known_group] * cfg.num_known_groups

    blocks, all_labels, all_groups = [], [], []
    for g, count in enumerate(counts):
        stable = rng.standard_normal((count, cfg.stable_dim))
        eps = rng.standard_normal(count) * cfg.label_noise_sd
        y = (stable @ theta + eps > 0.0).astype(np.int64)
        s = 2.0 * y - 1.0
        noise = rng.standard_normal((count, 2)) * cfg.spurious_noise_sd
        if g == 0:
            f0 = cfg.unknown_corr_strength * s + noise[:, 0]
            f1 = -cfg.unknown_anticorr_strength * s + noise[:, 1]
        else:
            f0 = -cfg.known_anticorr_strength * s + noise[:, 0]
            f1 = cfg.known_corr_strength * s + noise[:, 1]
        blocks.append(np.column_stack([f0, f1, stable]))
        all_labels.append(y)
        all_groups.append(np.full(count, g, dtype=np.int64))

    return EmbeddingDataset(
        embeddings=np.vstack(blocks),
        labels=np.concatenate(all_labels),
        num_classes=2,
        num_groups=cfg.num_known_groups + 1,
        groups=np.concatenate(all_groups),
    )
