"""Attribute-aware selection of synthetic re-identification data via Gram-matrix style loss."""

__version__ = "0.1.0"

from .dataset import (DIMENSIONS, SCHEMA, AttributeSchema, DatasetManifest, GeneratorConfig,
                      ImageRecord, default_schema, generate_manifest, load_manifest,
                      persist_manifest, slice_manifest)
from .evaluation import EmbeddingSet, EvalReport, average_precision, evaluate, pairwise_distances
from .features import ExtractorConfig, FeatureMaps, extract, init_extractor, load_weights, persist_weights
from .model import EmbeddingModel, ModelConfig, TrainConfig, TrainLog, init_model, train
from .render import Image, render_image
from .style import (AttributeSelection, LossTable, StyleWeights, apply_selection,
                    attribute_loss_table, gram, layer_loss, select_attributes, slice_mean_gram,
                    style_loss)

__all__ = [
    "DIMENSIONS", "SCHEMA", "AttributeSchema", "DatasetManifest", "GeneratorConfig", "ImageRecord",
    "default_schema", "generate_manifest", "load_manifest", "persist_manifest", "slice_manifest",
    "EmbeddingSet", "EvalReport", "average_precision", "evaluate", "pairwise_distances",
    "ExtractorConfig", "FeatureMaps", "extract", "init_extractor", "load_weights", "persist_weights",
    "EmbeddingModel", "ModelConfig", "TrainConfig", "TrainLog", "init_model", "train",
    "Image", "render_image",
    "AttributeSelection", "LossTable", "StyleWeights", "apply_selection", "attribute_loss_table",
    "gram", "layer_loss", "select_attributes", "slice_mean_gram", "style_loss",
]
