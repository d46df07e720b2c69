"""Multi-modal hashing with noisy-label filtering.

Trains a two-modality hashing network under injected label noise, separates
clean from noisy labels by comparing each instance's multi-hot label against
its hash code's similarity scores to learnable category centers, corrects
high-confidence noisy labels from matching clean instances, and evaluates
retrieval with a bit-packed Hamming engine.
"""

from dchash.dataset import (
    Dataset,
    NoiseMask,
    generate_synthetic,
    inject_noise,
    label_similarity,
    load_dataset,
    save_dataset,
)
from dchash.model import ModelParams, binarize, forward, hash_unseen, init_params, sgd_step

__all__ = [
    "Dataset",
    "NoiseMask",
    "ModelParams",
    "generate_synthetic",
    "inject_noise",
    "label_similarity",
    "load_dataset",
    "save_dataset",
    "init_params",
    "forward",
    "binarize",
    "hash_unseen",
    "sgd_step",
]
