"""Embedding export: read an input manifest or image directory, run the
frozen backbone over it in batches, and write one LEMB record per input in
source order."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import transforms

from .backbones import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    VISION_BACKBONES,
    BackboneError,
    load_text_backbone,
    load_vision_backbone,
    text_features,
    vision_features,
)
from .lemb import VerifyReport, verify_lemb, write_lemb, write_lemb_tsv

__all__ = ["ExportSpec", "InputError", "export_embeddings", "verify_export"]

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class InputError(ValueError):
    """The input source is missing, malformed, or inconsistent."""


@dataclass
class ExportSpec:
    """What to export: which backbone, from which inputs, to which file.

    backbone is a vision model name (resnet18/resnet50/...) or "hf:<name>"
    for a Hugging Face text encoder. The input source is either a TSV
    manifest (header row naming columns; a "path" column for images or a
    "text" column for texts, plus the label column and optional group
    column) or a directory of images laid out one class per subdirectory.
    """

    backbone: str
    input_path: str
    output_path: str
    label_column: str = "label"
    group_column: str | None = None
    batch_size: int = 32
    device: str = "cpu"
    weights: str = "pretrained"  # vision only: "pretrained" | "random"
    seed: int = 0
    image_size: int = 224
    tsv: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")


@dataclass
class _Source:
    kind: str  # "image" | "text"
    items: list[str]  # file paths or raw texts, in source order
    labels: np.ndarray
    groups: np.ndarray | None
    num_classes: int
    num_groups: int


def _read_manifest(spec: ExportSpec) -> _Source:
    path = Path(spec.input_path)
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln.strip()]
    if not rows:
        raise InputError(f"{path}: empty manifest")
    header = rows[0].split("\t")
    cols = {name: i for i, name in enumerate(header)}
    if "path" in cols:
        kind, item_col = "image", cols["path"]
    elif "text" in cols:
        kind, item_col = "text", cols["text"]
    else:
        raise InputError(f"{path}: manifest needs a 'path' or 'text' column, "
                         f"got {header}")
    if spec.label_column not in cols:
        raise InputError(f"{path}: no label column {spec.label_column!r} in {header}")
    if spec.group_column is not None and spec.group_column not in cols:
        raise InputError(f"{path}: no group column {spec.group_column!r} in {header}")
    if len(rows) == 1:
        raise InputError(f"{path}: manifest has a header but no rows")

    items: list[str] = []
    labels: list[int] = []
    groups: list[int] = []
    for i, row in enumerate(rows[1:], start=2):
        cells = row.split("\t")
        if len(cells) != len(header):
            raise InputError(
                f"{path}: line {i}: expected {len(header)} columns, got {len(cells)}")
        item = cells[item_col]
        if kind == "image":
            item = str((path.parent / item).resolve())
        items.append(item)
        try:
            labels.append(int(cells[cols[spec.label_column]]))
        except ValueError as exc:
            raise InputError(f"{path}: line {i}: bad label: {exc}") from exc
        if spec.group_column is not None:
            try:
                groups.append(int(cells[cols[spec.group_column]]))
            except ValueError as exc:
                raise InputError(f"{path}: line {i}: bad group: {exc}") from exc
    label_arr = np.asarray(labels, dtype=np.int64)
    if label_arr.min() < 0:
        raise InputError(f"{path}: negative label at input "
                         f"{int(np.flatnonzero(label_arr < 0)[0])}")
    group_arr = None
    num_groups = 0
    if spec.group_column is not None:
        group_arr = np.asarray(groups, dtype=np.int64)
        if group_arr.min() < 0:
            raise InputError(f"{path}: negative group at input "
                             f"{int(np.flatnonzero(group_arr < 0)[0])}")
        num_groups = int(group_arr.max()) + 1
    return _Source(kind=kind, items=items, labels=label_arr, groups=group_arr,
                   num_classes=int(label_arr.max()) + 1, num_groups=num_groups)


def _read_image_directory(spec: ExportSpec) -> _Source:
    """Class-per-subdirectory layout; classes and files sorted by name so
    record order is deterministic."""
    root = Path(spec.input_path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    items: list[str] = []
    labels: list[int] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        items.extend(str(p) for p in files)
        labels.extend([label] * len(files))
    if not items:
        raise InputError(f"{root}: no images found (expected one class per "
                         f"subdirectory)")
    return _Source(kind="image", items=items,
                   labels=np.asarray(labels, dtype=np.int64), groups=None,
                   num_classes=len(class_dirs), num_groups=0)


def _load_source(spec: ExportSpec) -> _Source:
    path = Path(spec.input_path)
    if not path.exists():
        raise InputError(f"input source {path} does not exist")
    if path.is_dir():
        return _read_image_directory(spec)
    return _read_manifest(spec)


def _image_transform(spec: ExportSpec):
    return transforms.Compose([
        transforms.Resize(spec.image_size),
        transforms.CenterCrop(spec.image_size),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def _embed_images(spec: ExportSpec, source: _Source) -> np.ndarray:
    model = load_vision_backbone(spec.backbone, weights=spec.weights,
                                 seed=spec.seed, device=spec.device)
    transform = _image_transform(spec)
    chunks: list[np.ndarray] = []
    width: int | None = None
    for start in range(0, len(source.items), spec.batch_size):
        batch_paths = source.items[start:start + spec.batch_size]
        tensors = []
        for offset, item in enumerate(batch_paths):
            try:
                with Image.open(item) as img:
                    tensors.append(transform(img.convert("RGB")))
            except OSError as exc:
                raise InputError(
                    f"unreadable image at input {start + offset}: {item} ({exc})"
                ) from exc
        feats = vision_features(model, torch.stack(tensors).to(spec.device))
        arr = feats.cpu().numpy().astype(np.float32)
        if width is None:
            width = arr.shape[1]
        elif arr.shape[1] != width:
            raise InputError(
                f"feature width drifted from {width} to {arr.shape[1]} at "
                f"input {start}")
        chunks.append(arr)
    return np.vstack(chunks)


def _embed_texts(spec: ExportSpec, source: _Source) -> np.ndarray:
    name = spec.backbone.split(":", 1)[1]
    model, tokenizer = load_text_backbone(name, device=spec.device)
    chunks: list[np.ndarray] = []
    width: int | None = None
    for start in range(0, len(source.items), spec.batch_size):
        batch = source.items[start:start + spec.batch_size]
        feats = text_features(model, tokenizer, batch, spec.device)
        arr = feats.cpu().numpy().astype(np.float32)
        if width is None:
            width = arr.shape[1]
        elif arr.shape[1] != width:
            raise InputError(
                f"feature width drifted from {width} to {arr.shape[1]} at "
                f"input {start}")
        chunks.append(arr)
    return np.vstack(chunks)


def export_embeddings(spec: ExportSpec) -> VerifyReport:
    """Run the frozen backbone and write one LEMB record per input.

    No file is written if loading or inference fails. The written file is
    verified by re-reading it; the report is returned for display.
    """
    source = _load_source(spec)
    is_text_backbone = spec.backbone.startswith("hf:")
    if source.kind == "text" and not is_text_backbone:
        raise InputError(
            f"text manifest requires an 'hf:<name>' backbone, got {spec.backbone!r}")
    if source.kind == "image" and is_text_backbone:
        raise InputError("image inputs require a vision backbone")
    if source.kind == "image" and spec.backbone not in VISION_BACKBONES:
        raise BackboneError(
            f"unknown vision backbone {spec.backbone!r}; expected one of "
            f"{VISION_BACKBONES} or 'hf:<name>' for text")

    if source.kind == "image":
        embeddings = _embed_images(spec, source)
    else:
        embeddings = _embed_texts(spec, source)
    if not np.all(np.isfinite(embeddings)):
        bad = int(np.flatnonzero(~np.isfinite(embeddings).all(axis=1))[0])
        raise InputError(f"backbone produced non-finite features at input {bad}")

    writer = write_lemb_tsv if spec.tsv else write_lemb
    writer(spec.output_path, embeddings, source.labels,
           num_classes=source.num_classes, groups=source.groups,
           num_groups=source.num_groups)
    if spec.tsv:
        return VerifyReport(path=str(spec.output_path), ok=True,
                            n=len(source.items), dim=embeddings.shape[1],
                            num_classes=source.num_classes,
                            num_groups=source.num_groups)
    return verify_lemb(spec.output_path)


def verify_export(path) -> VerifyReport:
    """Re-read a LEMB file and report on header, counts, and ranges."""
    return verify_lemb(path)
