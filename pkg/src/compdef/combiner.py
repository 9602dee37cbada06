"""Discriminative softmax head, random-patch augmentation, and CNN -> CompNet routing."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, FeatureMap, extract_features
from .compnet import CompNet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def pooled_feature(F: FeatureMap) -> np.ndarray:
    """Mean of the valid feature vectors (zero vector if none are valid)."""
    n = F.valid.sum()
    if n == 0:
        return np.zeros(F.D)
    return F.vectors[F.valid].sum(axis=0) / n


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxHead:
    weights: np.ndarray  # (Y, D)
    bias: np.ndarray  # (Y,)
    trace: tuple = ()

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias


@dataclass(frozen=True)
class HeadConfig:
    lr: float = 20.0
    epochs: int = 400
    weight_decay: float = 1e-5
    val_fraction: float = 0.2
    patience: int = 60
    seed: int = 0


def _ce_grad(W, b, X, y, wd):
    p = softmax(X @ W.T + b)
    n = X.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300)) + 0.5 * wd * np.sum(W * W)
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ X + wd * W, g.sum(axis=0)


def fit_softmax(X: np.ndarray, y: np.ndarray, n_classes: int, config: HeadConfig) -> SoftmaxHead:
    """Full-batch gradient descent on cross-entropy with early stopping on a held-out split."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    W = rng.normal(0.0, 0.01, size=(n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    if config.epochs == 0:
        return SoftmaxHead(W, b, ())
    order = rng.permutation(len(y))
    n_val = int(round(config.val_fraction * len(y))) if len(y) >= 5 else 0
    val, tr = order[:n_val], order[n_val:]
    best = (np.inf, W.copy(), b.copy())
    trace, since = [], 0
    for epoch in range(config.epochs):
        loss, gW, gb = _ce_grad(W, b, X[tr], y[tr], config.weight_decay)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"softmax head loss became non-finite at epoch {epoch}")
        W = W - config.lr * gW
        b = b - config.lr * gb
        trace.append(loss)
        if n_val:
            vloss = _ce_grad(W, b, X[val], y[val], 0.0)[0]
            if vloss < best[0] - 1e-9:
                best, since = (vloss, W.copy(), b.copy()), 0
            else:
                since += 1
                if since >= config.patience:
                    break
    if n_val:
        W, b = best[1], best[2]
    return SoftmaxHead(W, b, tuple(trace))


def train_softmax_head(dataset, backbone: BackboneParams, config: HeadConfig = HeadConfig()) -> SoftmaxHead:
    X = np.stack([pooled_feature(extract_features(im, backbone)) for im in dataset.images])
    return fit_softmax(X, dataset.labels, dataset.n_classes, config)


def random_patch(rng: np.random.Generator, image: np.ndarray, area_fraction: float) -> tuple:
    """Uniformly placed square of uniform random colours; returns (image, mask)."""
    h, w = image.shape[:2]
    side = int(np.floor(np.sqrt(area_fraction * h * w)))
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    if side < 1:
        return out, mask
    r = int(rng.integers(0, h - side + 1))
    c = int(rng.integers(0, w - side + 1))
    out[r:r + side, c:c + side] = rng.random((side, side, 3))
    mask[r:r + side, c:c + side] = True
    return out, mask


def train_with_random_patches(dataset, backbone: BackboneParams, area_fraction: float,
                              config: HeadConfig = HeadConfig(), n_aug: int = 4) -> SoftmaxHead:
    """Softmax head trained on copies of every image carrying a random-colour patch.

    ``n_aug`` patched copies per image are drawn once up front (seeded by
    ``config.seed``) and training then proceeds as in :func:`train_softmax_head`.
    """
    if area_fraction == 0:
        return train_softmax_head(dataset, backbone, config)
    if not 0 < area_fraction <= 0.5:
        raise ValueError("area fraction must lie in (0, 0.5]")
    rng = np.random.default_rng([config.seed, 0xA06])
    X, y = [], []
    for im, label in zip(dataset.images, dataset.labels):
        for _ in range(n_aug):
            patched, _ = random_patch(rng, im, area_fraction)
            X.append(pooled_feature(extract_features(patched, backbone)))
            y.append(label)
    return fit_softmax(np.stack(X), np.array(y), dataset.n_classes, config)


# -- classifiers exposed as probability-returning query functions --------------


class PlainClassifier:
    """Backbone + average pooling + softmax head."""

    def __init__(self, backbone: BackboneParams, head: SoftmaxHead):
        self.backbone = backbone
        self.head = head

    def logits(self, image) -> np.ndarray:
        return self.head.logits(pooled_feature(extract_features(image, self.backbone)))

    def predict_proba(self, image) -> np.ndarray:
        return softmax(self.logits(image))

    def predict(self, image) -> int:
        return int(np.argmax(self.logits(image)))

    __call__ = predict_proba


class CompNetClassifier:
    def __init__(self, backbone: BackboneParams, compnet: CompNet):
        self.backbone = backbone
        self.compnet = compnet

    def features(self, image) -> FeatureMap:
        return extract_features(image, self.backbone)

    def predict_proba(self, image) -> np.ndarray:
        return self.compnet.probabilities(self.features(image))

    def predict(self, image) -> int:
        return self.compnet.classify(self.features(image))[0]

    def score_map(self, image, label: int | None = None):
        return self.compnet.score_map(self.features(image), label)

    __call__ = predict_proba


@dataclass(frozen=True)
class CombinerConfig:
    threshold: float = 0.95
    temperature: float = 1.0

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def routing_confidence(logits: np.ndarray, temperature: float) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def combined_predict(image, head: PlainClassifier, compnet: CompNetClassifier, config: CombinerConfig) -> tuple:
    """Trust the head when its temperature-scaled confidence reaches the threshold.

    Returns ``(label, source, confidence)`` with ``source`` in {"head", "compnet"}.
    """
    if head.head.weights.shape[0] != compnet.compnet.n_classes:
        raise ValueError("head and CompNet disagree on the number of classes")
    p = routing_confidence(head.logits(image), config.temperature)
    conf = float(p.max())
    if conf >= config.threshold:
        return int(np.argmax(p)), "head", conf
    return compnet.predict(image), "compnet", conf


class CombinedClassifier:
    """Two-stage model; the returned probabilities come from whichever branch fires."""

    def __init__(self, head: PlainClassifier, compnet: CompNetClassifier, config: CombinerConfig):
        self.head = head
        self.compnet = compnet
        self.config = config

    def route(self, image) -> tuple:
        p = routing_confidence(self.head.logits(image), self.config.temperature)
        if p.max() >= self.config.threshold:
            return p, "head"
        return self.compnet.predict_proba(image), "compnet"

    def predict_proba(self, image) -> np.ndarray:
        return self.route(image)[0]

    def predict(self, image) -> int:
        return combined_predict(image, self.head, self.compnet, self.config)[0]

    __call__ = predict_proba
