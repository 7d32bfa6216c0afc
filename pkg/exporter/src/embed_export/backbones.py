"""Frozen backbone loading and penultimate-layer feature extraction.

Vision backbones are torchvision ResNets with the classification head
replaced by identity, so the forward pass returns the global-pooled
penultimate activation (512-d for resnet18/34, 2048-d for resnet50/101).
Text backbones are Hugging Face encoders pooled at the classification
token. Everything runs in eval mode under no_grad; weights are never
updated here.
"""

from __future__ import annotations

import torch
from torch import nn

VISION_BACKBONES = ("resnet18", "resnet34", "resnet50", "resnet101")

# standard ImageNet preprocessing constants used by the torchvision weights
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneError(RuntimeError):
    """The requested backbone could not be constructed or loaded."""


def load_vision_backbone(name: str, weights: str = "pretrained",
                         seed: int = 0, device: str = "cpu") -> nn.Module:
    """ResNet trunk with the final fc replaced by identity.

    weights="pretrained" pulls the library's default published weights
    (requires them to be downloadable or cached); weights="random" builds a
    deterministically seeded random initialization, useful for offline
    smoke runs where only the pipeline, not the representation quality,
    is under test.
    """
    from torchvision import models

    if name not in VISION_BACKBONES:
        raise BackboneError(
            f"unknown vision backbone {name!r}; expected one of {VISION_BACKBONES}")
    ctor = getattr(models, name)
    if weights == "pretrained":
        try:
            model = ctor(weights="DEFAULT")
        except Exception as exc:
            raise BackboneError(
                f"could not load pretrained weights for {name}: {exc}") from exc
    elif weights == "random":
        torch.manual_seed(seed)
        model = ctor(weights=None)
    else:
        raise BackboneError(
            f"weights must be 'pretrained' or 'random', got {weights!r}")
    model.fc = nn.Identity()
    model.eval()
    return model.to(device)


def load_text_backbone(name: str, device: str = "cpu"):
    """Hugging Face encoder + tokenizer; features are the first-token
    (classification-token) hidden state. Returns (model, tokenizer)."""
    try:
        from transformers import AutoModel, AutoTokenizer
    except ImportError as exc:
        raise BackboneError(
            "text backbones need the 'transformers' extra installed") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(name)
        model = AutoModel.from_pretrained(name)
    except Exception as exc:
        raise BackboneError(f"could not load text backbone {name!r}: {exc}") from exc
    model.eval()
    return model.to(device), tokenizer


@torch.no_grad()
def vision_features(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


@torch.no_grad()
def text_features(model, tokenizer, texts: list[str], device: str) -> torch.Tensor:
    enc = tokenizer(texts, padding=True, truncation=True, return_tensors="pt")
    enc = {k: v.to(device) for k, v in enc.items()}
    out = model(**enc)
    return out.last_hidden_state[:, 0, :]
