"""von Mises-Fisher densities on the unit sphere and dictionary learning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ive

SIGMA_MAX = 1e4
UNIT_TOL = 1e-6

# Regime switch points for log I_nu(s) - nu log s (see _log_bessel_scaled).
_SERIES_MAX = 1e-2
_ASYMPTOTIC_FACTOR = 40.0


class VmfError(ValueError):
    pass


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    sigma: float


@dataclass(frozen=True, eq=False)
class VmfDictionary:
    """K components sharing dimension D, stored as arrays.

    ``mu`` has shape (K, D) with unit rows, ``sigma`` has shape (K,).
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape[0] < 1 or sigma.shape[0] != mu.shape[0]:
            raise VmfError("need K >= 1 components with one sigma each")
        if np.any(np.abs(np.linalg.norm(mu, axis=1) - 1.0) > 1e-8):
            raise VmfError("component means must be unit vectors")
        if np.any(sigma < 0):
            raise VmfError("concentrations must be non-negative")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_log_z", np.array([log_normalizer(s, mu.shape[1]) for s in sigma]))

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    @property
    def log_z(self) -> np.ndarray:
        return self._log_z

    def component(self, k: int) -> VmfComponent:
        return VmfComponent(self.mu[k], float(self.sigma[k]))

    def log_densities(self, f: np.ndarray) -> np.ndarray:
        """log p(f | lambda_k) for every component; ``f`` has shape (..., D)."""
        return (f @ self.mu.T) * self.sigma - self._log_z


def _log_bessel_scaled(nu: float, s: float) -> float:
    """log I_nu(s) - nu * log(s), finite as s -> 0."""
    if s < _SERIES_MAX:
        # Power series: I_nu(s) = (s/2)^nu sum_j (s^2/4)^j / (j! Gamma(nu + j + 1))
        q = s * s / 4.0
        term, total = 1.0, 1.0
        for j in range(1, 30):
            term *= q / (j * (nu + j))
            total += term
            if term < 1e-17 * total:
                break
        return -nu * np.log(2.0) - gammaln(nu + 1.0) + np.log(total)
    if s > _ASYMPTOTIC_FACTOR * (nu * nu + 1.0):
        # Hankel expansion: I_nu(s) ~ e^s / sqrt(2 pi s) * sum_j (-1)^j a_j(nu) / s^j
        m = 4.0 * nu * nu
        term, total = 1.0, 1.0
        for j in range(1, 40):
            nxt = -term * (m - (2 * j - 1) ** 2) / (j * 8.0 * s)
            if abs(nxt) > abs(term) or nxt == 0.0:
                break
            term = nxt
            total += term
            if abs(term) < 1e-17:
                break
        return s - 0.5 * np.log(2 * np.pi * s) + np.log(total) - nu * np.log(s)
    return float(np.log(ive(nu, s)) + s - nu * np.log(s))


def log_normalizer(sigma: float, D: int) -> float:
    """log Z(sigma) of the vMF density on the unit sphere in R^D.

    Z(sigma) = (2 pi)^(D/2) I_{D/2-1}(sigma) / sigma^(D/2-1); at sigma = 0 this is
    the sphere's surface area.
    """
    if D < 2:
        raise VmfError("D must be >= 2")
    if sigma < 0:
        raise VmfError("sigma must be >= 0")
    nu = D / 2.0 - 1.0
    return float(D / 2.0 * np.log(2 * np.pi) + _log_bessel_scaled(nu, float(sigma)))


def _check_unit(f, tol=UNIT_TOL):
    f = np.asarray(f, dtype=np.float64)
    if abs(np.linalg.norm(f) - 1.0) > tol:
        raise VmfError(f"expected a unit vector, got norm {np.linalg.norm(f):.3g}")
    return f


def vmf_log_density(f, component: VmfComponent) -> float:
    f = _check_unit(f)
    mu = np.asarray(component.mu, dtype=np.float64)
    return float(component.sigma * mu @ f - log_normalizer(component.sigma, mu.shape[0]))


def estimate_kappa(vectors, mu=None, sigma_max: float = SIGMA_MAX) -> float:
    """Moment approximation r(D - r^2) / (1 - r^2) of the concentration, clamped."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[0] == 0:
        raise VmfError("cannot estimate a concentration from an empty cluster")
    if mu is not None and np.shape(mu)[-1] != x.shape[1]:
        raise VmfError("mu and vectors differ in dimension")
    return kappa_from_resultant(float(np.linalg.norm(x.mean(axis=0))), x.shape[1], sigma_max)


def kappa_from_resultant(r: float, D: int, sigma_max: float = SIGMA_MAX) -> float:
    r = min(max(r, 0.0), 1.0)
    if 1.0 - r * r < 1e-12:
        return float(sigma_max)
    kappa = r * (D - r * r) / (1.0 - r * r)
    return float(np.clip(kappa, 0.0, sigma_max))


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    best = x @ x[centers[0]]
    for _ in range(1, k):
        d = np.clip(1.0 - best, 0.0, None)
        total = d.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d / total))
        centers.append(idx)
        best = np.maximum(best, x @ x[idx])
    return x[centers].copy()


@dataclass
class KMeansResult:
    centers: np.ndarray
    assign: np.ndarray
    objective: list


def spherical_kmeans(x, k: int, seed: int, max_iter: int = 100, tol: float = 1e-10) -> KMeansResult:
    """Cosine-similarity k-means on unit rows of ``x``.

    The objective (sum of cosine similarities to the assigned centre) is
    recorded after every update and never decreases.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise VmfError(f"need at least K={k} vectors, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    trace: list = []
    assign = None
    for _ in range(max_iter):
        sims = x @ centers.T
        new_assign = np.argmax(sims, axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed from the point currently worst served
            best = sims[np.arange(x.shape[0]), new_assign]
            far = int(np.argmin(best))
            centers[j] = x[far]
            sims[far, j] = 1.0
            new_assign[far] = j
            counts = np.bincount(new_assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, new_assign, x)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 0
        centers[ok] = sums[ok] / norms[ok, None]
        obj = float(norms.sum())
        converged = assign is not None and np.array_equal(assign, new_assign)
        assign = new_assign
        trace.append(obj)
        if converged or (len(trace) > 1 and trace[-1] - trace[-2] <= tol * abs(trace[-1])):
            break
    return KMeansResult(centers, assign, trace)


def learn_dictionary(vectors, K: int, seed: int, *, sigma_max: float = SIGMA_MAX,
                     shared_sigma: bool | float = False, max_iter: int = 100) -> tuple:
    """Fit K vMF components by spherical k-means plus moment-based concentrations.

    ``shared_sigma=True`` pools all clusters into a single concentration;
    a float fixes it. Returns ``(dictionary, kmeans_result)``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise VmfError("vectors must be an (N, D) array")
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise VmfError("dictionary learning requires unit vectors")
    km = spherical_kmeans(x, K, seed, max_iter=max_iter)
    if shared_sigma is False:
        sigma = np.array([estimate_kappa(x[km.assign == j], km.centers[j], sigma_max) for j in range(K)])
    elif shared_sigma is True:
        # pooled within-cluster mean resultant length
        r = float(np.mean(np.sum(x * km.centers[km.assign], axis=1)))
        sigma = np.full(K, kappa_from_resultant(r, x.shape[1], sigma_max))
    else:
        sigma = np.full(K, float(shared_sigma))
    return VmfDictionary(km.centers, sigma), km

