"""Part-based finetuning: per-position linear classifier with max-pooled class scores.

p(y | f_i) = softmax(W f_i) at every valid lattice position and
p(y | F) = max_i p(y | f_i). Training minimises -log p(y_true | F) by plain
gradient descent through the max, the softmax, the linear map and
(optionally) the backbone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .backbone import BackboneParams, _forward, backbone_gradient, extract_features
from .combiner import TrainingDiverged, softmax
from .pipeline import CompositionalConfig, fit_compositional

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PartClassifier:
    weights: np.ndarray  # (n_classes, D), no bias

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ValueError("part classifier weights must be a finite (n_classes, D) matrix")
        object.__setattr__(self, "weights", w)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1.0
    epochs: int = 40
    update_backbone: bool = True
    seed: int = 0
    init: str = "random"  # or "class-means"
    init_scale: float = 0.01

    def __post_init__(self):
        if self.init not in ("class-means", "random"):
            raise ValueError(f"unknown part classifier init {self.init!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def part_scores(F, part: PartClassifier) -> np.ndarray:
    """(H, W, n_classes) per-position class distributions; NaN at invalid positions."""
    if F.D != part.weights.shape[1]:
        raise ValueError(f"feature dimension {F.D} != classifier dimension {part.weights.shape[1]}")
    probs = softmax(F.vectors @ part.weights.T)
    return np.where(F.valid[..., None], probs, np.nan)


def part_pool(scores: np.ndarray) -> tuple:
    """Per-class max over positions and the (row, col) where it is attained.

    Ties resolve to the lowest row-major position.
    """
    H, W, Y = scores.shape
    flat = scores.reshape(H * W, Y)
    ok = ~np.isnan(flat[:, 0])
    if not np.any(ok):
        raise ValueError("every position is invalid")
    masked = np.where(ok[:, None], flat, -np.inf)
    idx = np.argmax(masked, axis=0)
    pooled = masked[idx, np.arange(Y)]
    return pooled, np.stack([idx // W, idx % W], axis=1)


def _item_loss_grad(image, label, backbone: BackboneParams, W: np.ndarray, with_backbone: bool):
    cache = _forward(image, backbone, need_grad=with_backbone)
    F = cache.fmap
    scores = part_scores(F, PartClassifier(W))
    pooled, where = part_pool(scores)
    r, c = where[label]
    f = F.vectors[r, c]
    p = scores[r, c]
    loss = -np.log(max(pooled[label], 1e-300))
    g = p.copy()
    g[label] -= 1.0
    dW = np.outer(g, f)
    if not with_backbone:
        return loss, dW, None, None
    upstream = np.zeros_like(F.vectors)
    upstream[r, c] = W.T @ g
    d_filters, d_bias = backbone_gradient(image, backbone, upstream, cache=cache)
    return loss, dW, d_filters, d_bias


def finetune_loss_and_grad(images, labels, backbone: BackboneParams, part: PartClassifier,
                           with_backbone: bool = True) -> tuple:
    """Mean loss over items and its gradient w.r.t. (W, filters, bias)."""
    W = part.weights
    total, gW = 0.0, np.zeros_like(W)
    gF = np.zeros_like(backbone.filters) if with_backbone else None
    gb = np.zeros_like(backbone.bias) if with_backbone else None
    for im, y in zip(images, labels):
        loss, dW, dF, db = _item_loss_grad(im, int(y), backbone, W, with_backbone)
        total += loss
        gW += dW
        if with_backbone:
            gF += dF
            gb += db
    n = len(labels)
    if with_backbone:
        return total / n, gW / n, gF / n, gb / n
    return total / n, gW / n, None, None


@dataclass(eq=False)
class FinetuneResult:
    part: PartClassifier
    backbone: BackboneParams
    trace: list


def initial_part_weights(dataset, backbone: BackboneParams, config: FinetuneConfig) -> np.ndarray:
    """Starting point for W_part.

    ``"class-means"``: row y is the mean valid feature of class y minus the
    mean over classes, rescaled to norm ``init_scale``; features shared by all
    classes cancel, so descent starts from class-specific directions.
    ``"random"``: i.i.d. normal entries with standard deviation ``init_scale``.
    """
    rng = np.random.default_rng(config.seed)
    Y, D = dataset.n_classes, backbone.C
    if config.init == "random":
        return rng.normal(0.0, config.init_scale, size=(Y, D))
    sums, counts = np.zeros((Y, D)), np.zeros(Y)
    for im, y in zip(dataset.images, dataset.labels):
        F = extract_features(im, backbone)
        sums[y] += F.flat_valid().sum(axis=0)
        counts[y] += F.valid.sum()
    means = sums / np.maximum(counts, 1)[:, None]
    W = means - means.mean(axis=0)
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    # tiny seeded jitter breaks exact ties between identical classes
    W = np.where(norms > 1e-12, W / np.where(norms > 1e-12, norms, 1.0), 0.0) * config.init_scale
    return W + rng.normal(0.0, 1e-6, size=W.shape)


def finetune(dataset, backbone: BackboneParams, config: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Gradient descent on the max-pooled part loss; ``trace`` holds the loss before every step."""
    W = initial_part_weights(dataset, backbone, config)
    params = backbone
    trace = []
    for epoch in range(config.epochs):
        loss, gW, gF, gb = finetune_loss_and_grad(dataset.images, dataset.labels, params, PartClassifier(W),
                                                  config.update_backbone)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"part finetuning loss became non-finite at step {epoch}")
        trace.append(float(loss))
        log.debug("finetune epoch %d loss %.5f", epoch, loss)
        if config.lr == 0:
            continue
        W = W - config.lr * gW
        if config.update_backbone:
            params = params.with_arrays(params.filters - config.lr * gF, params.bias - config.lr * gb)
    return FinetuneResult(PartClassifier(W), params, trace)


def cluster_purity(dictionary, maps, labels) -> float:
    """Mean over non-empty clusters of the fraction of members from the cluster's majority class.

    Every valid vector is assigned to its most similar mean. Each cluster
    counts equally, so a few large generic clusters (background, flat
    regions) cannot mask the purity of the small part-like ones.
    """
    n_classes = int(np.max(labels)) + 1
    counts = np.zeros((dictionary.K, n_classes))
    for F, y in zip(maps, labels):
        v = F.flat_valid()
        if v.size == 0:
            continue
        a = np.argmax(v @ dictionary.mu.T, axis=1)
        np.add.at(counts, (a, int(y)), 1)
    sizes = counts.sum(axis=1)
    used = sizes > 0
    return float(np.mean(counts[used].max(axis=1) / sizes[used])) if used.any() else 0.0


def refit_after_finetune(dataset, backbone: BackboneParams, K: int, M: int, seed: int, *, background,
                         config=None):
    """Re-extract features with the finetuned backbone and re-learn the compositional model.

    Returns a :class:`~compdef.compnet.CompNet` holding the new dictionary,
    class models and occluder.
    """
    config = replace(config or CompositionalConfig(), K=K, M=M)
    return fit_compositional(dataset, background, backbone, config, seed)
