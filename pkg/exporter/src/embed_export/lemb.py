"""LEMB v1 writer and verifier.

The format is the consumer toolkit's external interface, reproduced here
so this package stays decoupled from its internals: little-endian, magic
``LEMB``, u32 version = 1, u32 flags (bit 0: groups present), u64 n,
u32 dim, u32 num_classes, u32 num_groups (0 when bit 0 clear), then n
records of dim * f32 embedding, u32 label, and u32 group iff flagged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LEMB"
VERSION = 1
FLAG_GROUPS = 1
_HEADER = struct.Struct("<4sIIQIII")


def write_lemb(path, embeddings: np.ndarray, labels: np.ndarray,
               num_classes: int, groups: np.ndarray | None = None,
               num_groups: int = 0) -> None:
    """Write one LEMB file; output bytes are deterministic in the inputs."""
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError(f"embeddings must be a non-empty matrix, got {emb.shape}")
    n, dim = emb.shape
    lab = np.asarray(labels, dtype=np.uint32)
    if lab.shape != (n,):
        raise ValueError(f"labels shape {lab.shape} does not match n={n}")
    flags = 0
    fields = [("embedding", "<f4", (dim,)), ("label", "<u4")]
    if groups is not None:
        flags |= FLAG_GROUPS
        fields.append(("group", "<u4"))
        if num_groups < 1:
            raise ValueError("num_groups must be >= 1 when groups are present")
    rec = np.zeros(n, dtype=np.dtype(fields))
    rec["embedding"] = emb
    rec["label"] = lab
    if groups is not None:
        rec["group"] = np.asarray(groups, dtype=np.uint32)
    header = _HEADER.pack(MAGIC, VERSION, flags, n, dim, num_classes,
                          num_groups if groups is not None else 0)
    Path(path).write_bytes(header + rec.tobytes())


def write_lemb_tsv(path, embeddings: np.ndarray, labels: np.ndarray,
                   num_classes: int, groups: np.ndarray | None = None,
                   num_groups: int = 0) -> None:
    """TSV flavor of the same interface (floats at 9 significant digits)."""
    emb = np.asarray(embeddings, dtype=np.float32)
    n, dim = emb.shape
    g = 0 if groups is None else num_groups
    lines = [f"# lemb-tsv v1 n={n} d={dim} c={num_classes} g={g}"]
    for i in range(n):
        cells = [f"{float(x):.9g}" for x in emb[i]]
        cells.append(str(int(labels[i])))
        if groups is not None:
            cells.append(str(int(groups[i])))
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class VerifyReport:
    path: str
    ok: bool
    n: int = 0
    dim: int = 0
    num_classes: int = 0
    num_groups: int = 0
    problems: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "OK" if self.ok else "INVALID"
        head = (f"{self.path}: {status} n={self.n} dim={self.dim} "
                f"classes={self.num_classes} groups={self.num_groups}")
        return head if self.ok else head + "\n  " + "\n  ".join(self.problems)


def verify_lemb(path) -> VerifyReport:
    """Re-read a LEMB file and check header, payload size, finiteness, and
    label/group ranges. Collects every problem it can still reason about."""
    p = Path(path)
    report = VerifyReport(path=str(p), ok=False)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        report.problems.append(f"unreadable: {exc}")
        return report
    if len(raw) < _HEADER.size:
        report.problems.append(
            f"truncated header: {len(raw)} bytes < {_HEADER.size}")
        return report
    magic, version, flags, n, dim, num_classes, num_groups = _HEADER.unpack_from(raw)
    report.n, report.dim = n, dim
    report.num_classes, report.num_groups = num_classes, num_groups
    if magic != MAGIC:
        report.problems.append(f"bad magic {magic!r} at byte offset 0")
        return report
    if version != VERSION:
        report.problems.append(f"unsupported version {version} at byte offset 4")
        return report
    with_groups = bool(flags & FLAG_GROUPS)
    if n < 1:
        report.problems.append("empty payload (n=0)")
    if with_groups and num_groups < 1:
        report.problems.append("groups flag set but num_groups=0")
    if not with_groups and num_groups != 0:
        report.problems.append(f"groups flag clear but num_groups={num_groups}")
    rec_size = dim * 4 + 4 + (4 if with_groups else 0)
    expected = _HEADER.size + n * rec_size
    if len(raw) != expected:
        report.problems.append(
            f"payload size mismatch: expected {expected} bytes, got {len(raw)} "
            f"(truncation at byte offset {min(len(raw), expected)})")
        return report
    if report.problems:
        return report
    fields = [("embedding", "<f4", (dim,)), ("label", "<u4")]
    if with_groups:
        fields.append(("group", "<u4"))
    rec = np.frombuffer(raw, dtype=np.dtype(fields), count=n, offset=_HEADER.size)
    if not np.all(np.isfinite(rec["embedding"])):
        bad = int(np.flatnonzero(~np.isfinite(
            rec["embedding"]).all(axis=1))[0])
        report.problems.append(f"non-finite embedding at record {bad}")
    labels = rec["label"]
    if labels.size and labels.max() >= num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0])
        report.problems.append(
            f"label {int(labels[bad])} at record {bad} out of range for "
            f"num_classes={num_classes}")
    if with_groups:
        g = rec["group"]
        if g.size and g.max() >= num_groups:
            bad = int(np.flatnonzero(g >= num_groups)[0])
            report.problems.append(
                f"group {int(g[bad])} at record {bad} out of range for "
                f"num_groups={num_groups}")
    report.ok = not report.problems
    return report
