"""Vision-language pseudo labels and gradient-alignment training for
unsupervised multi-label image classification."""

__version__ = "0.1.0"

from .dataset import (ClassVocabulary, DatasetManifest, LabeledSample, load_manifest,
                      make_synthetic_dataset, parse_voc_annotation)
from .encoder import OpenClipBackend, SyntheticBackend, TextEmbeddingTable
from .metrics import average_precision, mean_average_precision
from .pseudo import (AggregatorParams, SimilarityVector, aggregate_local, final_pseudo_labels,
                     global_alignment, local_alignment, softmax_similarity, tile_image)
from .trainer import LatentPseudoLabels, TrainConfig, train

__all__ = [
    "ClassVocabulary", "DatasetManifest", "LabeledSample", "load_manifest", "make_synthetic_dataset",
    "parse_voc_annotation", "OpenClipBackend", "SyntheticBackend", "TextEmbeddingTable",
    "average_precision", "mean_average_precision", "AggregatorParams", "SimilarityVector",
    "aggregate_local", "final_pseudo_labels", "global_alignment", "local_alignment",
    "softmax_similarity", "tile_image", "LatentPseudoLabels", "TrainConfig", "train",
]
