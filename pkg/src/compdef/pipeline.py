"""Feature extraction -> vMF dictionary -> class mixtures + occluder, as one composition."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, extract_many
from .compnet import CompNet, CompNetError, fit_compnet
from .vmf import learn_dictionary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompositionalConfig:
    K: int = 64
    M: int = 2
    em_iters: int = 10
    object_samples: int = 15000  # object feature vectors used for the dictionary
    background_samples: int = 5000  # background feature vectors used for the dictionary
    rho: float = 0.0
    score_scale: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if self.object_samples < 1 or self.background_samples < 0:
            raise ValueError("dictionary sample counts must be non-negative (objects >= 1)")


def _sample_rows(rng, rows: np.ndarray, n: int) -> np.ndarray:
    if rows.shape[0] <= n:
        return rows
    return rows[np.sort(rng.choice(rows.shape[0], size=n, replace=False))]


def dictionary_vectors(object_maps, background_maps, config: CompositionalConfig, seed: int) -> np.ndarray:
    """Pooled training vectors for the dictionary: a sample of object and background features.

    Background features give the dictionary components that describe
    clutter, so that occluders are not forced onto object parts.
    """
    rng = np.random.default_rng([seed, 0xD1C])
    obj = np.concatenate([m.flat_valid() for m in object_maps])
    parts = [_sample_rows(rng, obj, config.object_samples)]
    if background_maps and config.background_samples:
        bg = np.concatenate([m.flat_valid() for m in background_maps])
        parts.append(_sample_rows(rng, bg, config.background_samples))
    return np.concatenate(parts)


def fit_compositional(dataset, background_images, backbone: BackboneParams, config: CompositionalConfig,
                      seed: int) -> CompNet:
    """Extract features and learn dictionary, class mixtures and occluder model."""
    if background_images is None or len(background_images) == 0:
        raise CompNetError("the compositional model needs a background corpus for its occluder model")
    maps = extract_many(dataset.images, backbone)
    bg_maps = extract_many(background_images, backbone)
    X = dictionary_vectors(maps, bg_maps, config, seed)
    dictionary, _ = learn_dictionary(X, config.K, seed)
    by_class = []
    for y in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == y)
        if idx.size < config.M:
            raise CompNetError(f"class {y} has {idx.size} training images, fewer than M={config.M}")
        by_class.append([maps[i] for i in idx])
    log.info("fitting %d class models (M=%d, K=%d)", len(by_class), config.M, config.K)
    return fit_compnet(by_class, bg_maps, dictionary, config.M, seed, iters=config.em_iters,
                       rho=config.rho, score_scale=config.score_scale)
