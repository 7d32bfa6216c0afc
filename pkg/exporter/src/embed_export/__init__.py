"""Penultimate-layer embedding export from frozen pretrained backbones.

Vision inputs go through a torchvision ResNet trunk (global-pooled
features), text through a Hugging Face encoder (classification-token
pooling); records land in LEMB v1 files the downstream adaptation toolkit
reads directly. No training happens here.
"""

from .export import ExportSpec, export_embeddings, verify_export
from .lemb import verify_lemb, write_lemb

__version__ = "0.1.0"
