"""Noise-aware active learning over fixed feature embeddings."""

__version__ = "0.1.0"

from noisyal.datapool import (
    EmbeddingPool,
    LabelState,
    SyntheticSpec,
    budget_for_spc,
    generate_synthetic,
    init_label_state,
    load_embeddings,
    save_embeddings,
)
from noisyal.noise_model import Annotator, NoiseSpec, annotate, build_annotator

__all__ = [
    "Annotator",
    "EmbeddingPool",
    "LabelState",
    "NoiseSpec",
    "SyntheticSpec",
    "annotate",
    "budget_for_spc",
    "build_annotator",
    "generate_synthetic",
    "init_label_state",
    "load_embeddings",
    "save_embeddings",
]
