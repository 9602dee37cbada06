"""Compositional generative head: per-class spatial vMF mixtures plus an occluder model.

Coefficients are stored smoothed: ``alpha = (1 - eps) * a + eps / K`` where ``a``
is the free simplex updated by EM. This is additive (Laplace) smoothing with a
fixed mixing weight, which keeps every coefficient positive and the EM
likelihood monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .backbone import FeatureMap
from .vmf import VmfDictionary, log_normalizer, normalize_rows, spherical_kmeans

SMOOTHING = 1e-3
SIMPLEX_TOL = 1e-8


class CompNetError(ValueError):
    pass


def _check_simplex(a: np.ndarray, what: str):
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise CompNetError(f"{what} must be a valid simplex along the last axis")


def smooth(a: np.ndarray, eps: float = SMOOTHING) -> np.ndarray:
    a = a / a.sum(axis=-1, keepdims=True)
    return (1.0 - eps) * a + eps / a.shape[-1]


def background_floor(D: int) -> float:
    """Log density of the uniform distribution on the unit sphere in R^D."""
    return -log_normalizer(0.0, D)


@dataclass(frozen=True, eq=False)
class ClassModel:
    label: int
    coeffs: np.ndarray  # (M, H, W, K)
    dictionary: VmfDictionary
    trace: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 4 or c.shape[0] < 1:
            raise CompNetError("class coefficients must have shape (M, H, W, K) with M >= 1")
        if c.shape[3] != self.dictionary.K:
            raise CompNetError("coefficient K does not match the dictionary")
        _check_simplex(c, "mixture coefficients")
        object.__setattr__(self, "coeffs", c)

    @property
    def M(self) -> int:
        return self.coeffs.shape[0]


@dataclass(frozen=True, eq=False)
class OccluderModel:
    beta: np.ndarray  # (K,)

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        _check_simplex(b, "occluder coefficients")
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True, eq=False)
class OcclusionMap:
    occluded: np.ndarray  # (H, W) bool
    score: np.ndarray  # (H, W) float


# -- per-position terms ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Terms:
    """Shifted component likelihoods for one feature map.

    ``E[i, k] = exp(log p(f_i | lambda_k) - shift[i])`` so that
    ``log sum_k c_k p(f_i | lambda_k) = log(E[i] @ c) + shift[i]``.
    """

    E: np.ndarray
    shift: np.ndarray
    valid: np.ndarray
    floor: float


def _terms(F: FeatureMap, dictionary: VmfDictionary, floor: float | None) -> _Terms:
    if F.D != dictionary.D:
        raise CompNetError(f"feature dimension {F.D} != dictionary dimension {dictionary.D}")
    L = dictionary.log_densities(F.vectors)
    shift = L.max(axis=-1)
    E = np.exp(L - shift[..., None])
    floor = background_floor(dictionary.D) if floor is None else floor
    return _Terms(E, shift, F.valid, floor)


def _mix(t: _Terms, coeffs: np.ndarray) -> np.ndarray:
    """Per-position log mixture likelihood; coeffs (..., H, W, K) -> (..., H, W)."""
    val = np.log(np.sum(coeffs * t.E, axis=-1)) + t.shift
    return np.where(t.valid, val, t.floor)


def _mix_shared(t: _Terms, weights: np.ndarray) -> np.ndarray:
    val = np.log(t.E @ weights) + t.shift
    return np.where(t.valid, val, t.floor)


def position_log_likelihood(f, coeffs_i, dictionary: VmfDictionary, floor: float | None = None) -> float:
    """log sum_k alpha_k p(f | lambda_k); an all-zero ``f`` marks an invalid position."""
    coeffs_i = np.asarray(coeffs_i, dtype=np.float64)
    _check_simplex(coeffs_i, "coefficients")
    f = np.asarray(f, dtype=np.float64)
    if not np.any(f):
        return background_floor(dictionary.D) if floor is None else floor
    if abs(np.linalg.norm(f) - 1.0) > 1e-6:
        raise CompNetError("feature vectors must be unit norm")
    with np.errstate(divide="ignore"):
        return float(logsumexp(np.log(coeffs_i) + dictionary.log_densities(f)))


def _check_dims(F: FeatureMap, coeffs: np.ndarray):
    if F.vectors.shape[:2] != coeffs.shape[-3:-1]:
        raise CompNetError(f"feature map lattice {F.vectors.shape[:2]} != model lattice {coeffs.shape[-3:-1]}")


def mixture_log_likelihood(F: FeatureMap, coeffs_m, dictionary: VmfDictionary, floor: float | None = None) -> float:
    coeffs_m = np.asarray(coeffs_m, dtype=np.float64)
    _check_dims(F, coeffs_m)
    return float(_mix(_terms(F, dictionary, floor), coeffs_m).sum())


def class_log_likelihood(F: FeatureMap, model: ClassModel, floor: float | None = None) -> tuple:
    """(max_m log p(F | theta_m), m*) with ties going to the lowest m."""
    _check_dims(F, model.coeffs)
    vals = _mix(_terms(F, model.dictionary, floor), model.coeffs).sum(axis=(1, 2))
    m = int(np.argmax(vals))
    return float(vals[m]), m


def occluded_log_likelihood(F: FeatureMap, coeffs_m, occluder: OccluderModel, dictionary: VmfDictionary,
                            rho: float = 0.0, floor: float | None = None) -> tuple:
    """Per position the better of object and occluder explanation.

    Returns ``(value, OcclusionMap)``; the map's score is the occluder term
    where it wins and ``-inf`` elsewhere.
    """
    coeffs_m = np.asarray(coeffs_m, dtype=np.float64)
    _check_dims(F, coeffs_m)
    t = _terms(F, dictionary, floor)
    obj = _mix(t, coeffs_m)
    occ = _mix_shared(t, occluder.beta) + rho
    z = occ > obj
    value = float(np.maximum(obj, occ).sum())
    return value, OcclusionMap(z, np.where(z, occ, -np.inf))


def _occluded_class_values(t: _Terms, coeffs: np.ndarray, occ: np.ndarray) -> tuple:
    obj = _mix(t, coeffs)  # (..., M, H, W)
    vals = np.maximum(obj, occ).sum(axis=(-2, -1))
    return vals, obj


def occlusion_score_map(F: FeatureMap, model: ClassModel, occluder: OccluderModel, rho: float = 0.0,
                        floor: float | None = None) -> OcclusionMap:
    """Log-odds ``occ - obj`` for the mixture that wins under the occlusion-aware likelihood."""
    _check_dims(F, model.coeffs)
    t = _terms(F, model.dictionary, floor)
    occ = _mix_shared(t, occluder.beta) + rho
    vals, obj = _occluded_class_values(t, model.coeffs, occ)
    m = int(np.argmax(vals))
    score = occ - obj[m]
    return OcclusionMap(score > 0, score)


# -- learning --------------------------------------------------------------------


def _posteriors(t: _Terms, prior: np.ndarray | None = None) -> np.ndarray:
    w = t.E if prior is None else t.E * prior
    return w / w.sum(axis=-1, keepdims=True)


def learn_class_model(maps, M: int, dictionary: VmfDictionary, iters: int = 10, seed: int = 0, *, label: int = 0,
                      eps: float = SMOOTHING, floor: float | None = None) -> ClassModel:
    """Hard-EM fit of M spatial mixtures to the feature maps of one class.

    Each iteration assigns every map to its best mixture and then performs
    one EM update of each mixture's coefficients on its assigned maps. The
    returned model's ``trace`` holds the total training log-likelihood before
    the first and after every update; it never decreases.
    """
    maps = list(maps)
    if len(maps) < M:
        raise CompNetError(f"need at least M={M} training maps, got {len(maps)}")
    if M < 1:
        raise CompNetError("M must be >= 1")
    shape = maps[0].vectors.shape
    if any(m.vectors.shape != shape for m in maps):
        raise CompNetError("all training maps must share H, W, D")
    H, W, _ = shape
    K = dictionary.K
    terms = [_terms(F, dictionary, floor) for F in maps]
    E = np.stack([t.E for t in terms])  # (N, H, W, K)
    shift = np.stack([t.shift for t in terms])
    valid = np.stack([t.valid for t in terms])
    fl = terms[0].floor

    # initial split: spherical k-means on the flattened maps
    if M == 1:
        assign = np.zeros(len(maps), dtype=int)
    else:
        flat = normalize_rows(np.stack([m.vectors.reshape(-1) for m in maps]))
        assign = spherical_kmeans(flat, M, seed).assign
    post = E / E.sum(axis=-1, keepdims=True)
    free = np.full((M, H, W, K), 1.0 / K)
    for m in range(M):
        sel = assign == m
        if np.any(sel):
            free[m] = _aggregate(post[sel], valid[sel], free[m])

    def loglik(alpha):
        # (N, M, H, W) -> per map, per mixture totals
        val = np.log(np.einsum("nhwk,mhwk->nmhw", E, alpha)) + shift[:, None]
        val = np.where(valid[:, None], val, fl)
        return val.sum(axis=(2, 3))

    alpha = smooth(free, eps)
    trace = []
    for it in range(iters + 1):
        ll = loglik(alpha)
        assign = np.argmax(ll, axis=1)
        trace.append(float(ll[np.arange(len(maps)), assign].sum()))
        if it == iters:
            break
        for m in range(M):
            sel = assign == m
            if not np.any(sel):
                continue
            # responsibilities of the free branch; the uniform branch is fixed
            resp = E[sel] * ((1.0 - eps) * free[m])
            resp = resp / np.einsum("nhwk,hwk->nhw", E[sel], alpha[m])[..., None]
            free[m] = _aggregate(resp, valid[sel], free[m])
        alpha = smooth(free, eps)
    return ClassModel(label, alpha, dictionary, tuple(trace))


def _aggregate(resp: np.ndarray, valid: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Sum responsibilities over maps at valid positions and normalise per position."""
    tot = np.where(valid[..., None], resp, 0.0).sum(axis=0)
    norm = tot.sum(axis=-1, keepdims=True)
    return np.where(norm > 0, tot / np.where(norm > 0, norm, 1.0), fallback)


def learn_occluder_model(maps, dictionary: VmfDictionary, eps: float = SMOOTHING) -> OccluderModel:
    """beta_k proportional to the aggregate posterior of component k over all background positions."""
    maps = list(maps)
    if not maps:
        raise CompNetError("occluder training needs a non-empty background corpus")
    total = np.zeros(dictionary.K)
    for F in maps:
        t = _terms(F, dictionary, None)
        total += _posteriors(t)[t.valid].sum(axis=0)
    if total.sum() <= 0:
        raise CompNetError("background corpus has no valid feature positions")
    return OccluderModel(smooth(total, eps))


# -- the assembled classifier -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CompNet:
    """Dictionary, per-class models and occluder, with vectorised scoring.

    ``score_scale`` converts summed log-likelihoods into class probabilities:
    ``softmax(values * score_scale / n_positions)``.
    """

    dictionary: VmfDictionary
    class_models: tuple
    occluder: OccluderModel
    rho: float = 0.0
    score_scale: float = 1.0
    floor: float | None = None
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        models = tuple(self.class_models)
        if not models:
            raise CompNetError("need at least one class model")
        shapes = {m.coeffs.shape[1:] for m in models}
        if len(shapes) != 1:
            raise CompNetError("class models disagree on H, W, K")
        Ms = {m.M for m in models}
        if len(Ms) != 1:
            raise CompNetError("class models must share M")
        if self.occluder.beta.shape[0] != self.dictionary.K:
            raise CompNetError("occluder K does not match the dictionary")
        object.__setattr__(self, "class_models", models)
        object.__setattr__(self, "_stack", np.stack([m.coeffs for m in models]))  # (Y, M, H, W, K)

    @property
    def n_classes(self) -> int:
        return len(self.class_models)

    @property
    def lattice(self) -> tuple:
        return self._stack.shape[2:4]

    def evaluate(self, F: FeatureMap) -> dict:
        """All per-class quantities for one feature map."""
        _check_dims(F, self._stack)
        t = _terms(F, self.dictionary, self.floor)
        occ = _mix_shared(t, self.occluder.beta) + self.rho
        vals, obj = _occluded_class_values(t, self._stack, occ)  # (Y, M), (Y, M, H, W)
        best_m = np.argmax(vals, axis=1)
        values = vals[np.arange(len(best_m)), best_m]
        return {"values": values, "best_m": best_m, "obj": obj, "occ": occ}

    def class_values(self, F: FeatureMap) -> np.ndarray:
        return self.evaluate(F)["values"]

    def classify(self, F: FeatureMap) -> tuple:
        values = self.class_values(F)
        return int(np.argmax(values)), values

    def probabilities(self, F: FeatureMap) -> np.ndarray:
        values = self.class_values(F)
        n = values.dtype.type(F.vectors.shape[0] * F.vectors.shape[1])
        z = values * (self.score_scale / n)
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def score_map(self, F: FeatureMap, label: int | None = None) -> OcclusionMap:
        """Occlusion log-odds for ``label`` (default: the predicted class)."""
        ev = self.evaluate(F)
        y = int(np.argmax(ev["values"])) if label is None else label
        score = ev["occ"] - ev["obj"][y, ev["best_m"][y]]
        return OcclusionMap(score > 0, score)


def classify(F: FeatureMap, class_models, occluder: OccluderModel, rho: float = 0.0) -> tuple:
    """Uniform-prior argmax of the occlusion-aware class likelihoods; ties go to the lowest label."""
    models = list(class_models)
    if not models:
        raise CompNetError("need at least one class model")
    return CompNet(models[0].dictionary, tuple(models), occluder, rho).classify(F)


def fit_compnet(maps_by_class, background_maps, dictionary: VmfDictionary, M: int, seed: int, *,
                iters: int = 10, rho: float = 0.0, score_scale: float = 1.0) -> CompNet:
    models = tuple(
        learn_class_model(maps, M, dictionary, iters=iters, seed=seed + 7919 * y, label=y)
        for y, maps in enumerate(maps_by_class)
    )
    occluder = learn_occluder_model(background_maps, dictionary)
    return CompNet(dictionary, models, occluder, rho=rho, score_scale=score_scale)
