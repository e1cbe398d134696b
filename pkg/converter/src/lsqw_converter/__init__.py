"""Torch-to-LSQW checkpoint converter with cross-validation logits."""

from .export import (ExportError, ExportManifest, export, make_toy_model,
                     read_reference_logits, tensor_mapping, write_reference_logits)
from .torch_model import ConvConfig, ToyTransformer, make_seeded_model

__version__ = "0.1.0"
