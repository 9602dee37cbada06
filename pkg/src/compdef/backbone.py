"""Single-layer filter-bank backbone: conv -> ReLU -> max-pool -> L2 normalisation.

Also the byte-exact feature-map file format (see docs/formats.md).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .vmf import normalize_rows, spherical_kmeans


class BackboneError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BackboneParams:
    filters: np.ndarray  # (C, k, k, 3)
    bias: np.ndarray  # (C,)
    stride: int = 1
    pool: int = 4
    pool_stride: int = 4
    eps: float = 1e-6

    def __post_init__(self):
        f = np.asarray(self.filters, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if f.ndim != 4 or f.shape[1] != f.shape[2] or f.shape[3] != 3:
            raise BackboneError(f"filters must have shape (C, k, k, 3), got {f.shape}")
        if f.shape[0] < 8:
            raise BackboneError("need at least 8 filters")
        if f.shape[1] % 2 == 0:
            raise BackboneError("kernel size must be odd")
        if b.shape != (f.shape[0],):
            raise BackboneError("one bias per filter required")
        if self.eps <= 0 or self.stride < 1 or self.pool < 1 or self.pool_stride < 1:
            raise BackboneError("stride, pool and eps must be positive")
        object.__setattr__(self, "filters", f)
        object.__setattr__(self, "bias", b)

    @property
    def C(self) -> int:
        return self.filters.shape[0]

    @property
    def k(self) -> int:
        return self.filters.shape[1]

    def with_arrays(self, filters, bias) -> "BackboneParams":
        return replace(self, filters=filters, bias=bias)

    def geometry(self, height: int, width: int | None = None) -> "FeatureGeometry":
        width = height if width is None else width
        ho = (height - self.k) // self.stride + 1
        wo = (width - self.k) // self.stride + 1
        if ho < self.pool or wo < self.pool:
            raise BackboneError(
                f"image {height}x{width} too small for kernel {self.k}, stride {self.stride}, pool {self.pool}")
        hp = (ho - self.pool) // self.pool_stride + 1
        wp = (wo - self.pool) // self.pool_stride + 1
        rf = self.k + (self.pool - 1) * self.stride
        return FeatureGeometry(hp, wp, rf, self.stride * self.pool_stride, height, width)


@dataclass(frozen=True)
class FeatureGeometry:
    """Receptive-field layout: position (r, c) sees pixels [r*jump, r*jump+rf) x [c*jump, c*jump+rf)."""

    height: int
    width: int
    rf: int
    jump: int
    image_height: int
    image_width: int

    def window(self, r: int, c: int) -> tuple:
        return (slice(r * self.jump, r * self.jump + self.rf), slice(c * self.jump, c * self.jump + self.rf))

    def paint(self, grid: np.ndarray, reduce=np.maximum, fill=-np.inf) -> np.ndarray:
        """Upsample a per-position grid to image resolution by painting receptive fields."""
        out = np.full((self.image_height, self.image_width), fill, dtype=np.float64)
        for r in range(self.height):
            for c in range(self.width):
                ys, xs = self.window(r, c)
                out[ys, xs] = reduce(out[ys, xs], grid[r, c])
        return out


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Unit-norm vectors on an H x W lattice; invalid positions hold zeros."""

    vectors: np.ndarray  # (H, W, D)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple:
        return self.vectors.shape

    @property
    def D(self) -> int:
        return self.vectors.shape[2]

    def flat_valid(self) -> np.ndarray:
        return self.vectors[self.valid]


def _patches(image: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(image, (k, k), axis=(0, 1))[::stride, ::stride]
    # (Ho, Wo, 3, k, k) -> (Ho, Wo, k, k, 3) to match the filter layout
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(win.shape[0], win.shape[1], -1)


@dataclass
class _Cache:
    patches: np.ndarray
    pre: np.ndarray
    argmax: np.ndarray
    pooled: np.ndarray
    norm: np.ndarray
    fmap: FeatureMap


def _pool_windows(act: np.ndarray, geom: "FeatureGeometry", p: int, ps: int) -> np.ndarray:
    """(Hp, Wp, C, p*p) view of pooling windows, flattened row-major."""
    C = act.shape[-1]
    if p == ps:
        crop = act[: geom.height * p, : geom.width * p]
        win = crop.reshape(geom.height, p, geom.width, p, C).transpose(0, 2, 4, 1, 3)
    else:
        win = sliding_window_view(act, (p, p), axis=(0, 1))[::ps, ::ps][: geom.height, : geom.width]
    return win.reshape(geom.height, geom.width, C, p * p)


def _forward(image: np.ndarray, params: BackboneParams, need_grad: bool = True) -> _Cache:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BackboneError(f"expected an (H, W, 3) image, got {image.shape}")
    geom = params.geometry(image.shape[0], image.shape[1])
    patches = _patches(image, params.k, params.stride)
    pre = patches @ params.filters.reshape(params.C, -1).T + params.bias
    act = np.maximum(pre, 0.0)
    p, ps = params.pool, params.pool_stride
    if need_grad:
        win = _pool_windows(act, geom, p, ps)
        argmax = np.argmax(win, axis=-1)  # first maximum -> lowest index
        pooled = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    elif p == ps:
        argmax = None
        pooled = act[: geom.height * p, : geom.width * p].reshape(
            geom.height, p, geom.width, p, params.C).max(axis=(1, 3))
    else:
        argmax = None
        pooled = _pool_windows(act, geom, p, ps).max(axis=-1)
    norm = np.linalg.norm(pooled, axis=-1)
    valid = norm >= params.eps
    vectors = np.where(valid[..., None], pooled / np.where(valid, norm, 1.0)[..., None], 0.0)
    return _Cache(patches, pre, argmax, pooled, norm, FeatureMap(vectors, valid))


def extract_features(image: np.ndarray, params: BackboneParams) -> FeatureMap:
    return _forward(image, params, need_grad=False).fmap


def extract_many(images, params: BackboneParams) -> list:
    return [extract_features(im, params) for im in images]


def backbone_gradient(image: np.ndarray, params: BackboneParams, upstream: np.ndarray,
                      cache: _Cache | None = None) -> tuple:
    """Gradient of a scalar loss w.r.t. (filters, bias) given dL/dF.

    Routes through the normalisation, the pooling argmax, the rectifier and
    the convolution. Invalid positions pass no gradient.
    """
    cache = _forward(image, params) if cache is None else cache
    fm = cache.fmap
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != fm.vectors.shape:
        raise BackboneError(f"upstream shape {upstream.shape} != feature map shape {fm.vectors.shape}")
    f = fm.vectors
    proj = np.sum(f * upstream, axis=-1, keepdims=True)
    safe = np.where(fm.valid, cache.norm, 1.0)[..., None]
    d_pooled = np.where(fm.valid[..., None], (upstream - f * proj) / safe, 0.0)

    p, ps = params.pool, params.pool_stride
    hp, wp, C = d_pooled.shape
    rows = (np.arange(hp) * ps)[:, None, None] + cache.argmax // p
    cols = (np.arange(wp) * ps)[None, :, None] + cache.argmax % p
    chans = np.broadcast_to(np.arange(C), d_pooled.shape)
    d_act = np.zeros_like(cache.pre)
    np.add.at(d_act, (rows, cols, chans), d_pooled)
    d_pre = d_act * (cache.pre > 0)
    d_pre2 = d_pre.reshape(-1, C)
    d_filters = (d_pre2.T @ cache.patches.reshape(-1, cache.patches.shape[-1])).reshape(params.filters.shape)
    d_bias = d_pre2.sum(axis=0)
    return d_filters, d_bias


def init_filters(images, C: int, k: int, seed: int, *, n_patches: int = 20000, whiten_eps: float = 1e-2,
                 stride: int = 1, pool: int = 4, pool_stride: int = 4) -> BackboneParams:
    """Filters from spherical k-means on ZCA-whitened image patches.

    Each centroid c gives the pixel-space filter w = Wz c with bias -w.m
    (m the patch mean), rescaled so that w has unit Frobenius norm.
    """
    imgs = np.asarray(images if not hasattr(images, "images") else images.images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[0] == 0:
        raise BackboneError("need a non-empty stack of images")
    n, h, w, _ = imgs.shape
    if n_patches < C:
        raise BackboneError(f"C={C} exceeds the number of sampled patches ({n_patches})")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=n_patches)
    ys = rng.integers(0, h - k + 1, size=n_patches)
    xs = rng.integers(0, w - k + 1, size=n_patches)
    offs = np.arange(k)
    X = imgs[idx[:, None, None], ys[:, None, None] + offs[None, :, None], xs[:, None, None] + offs[None, None, :]]
    X = X.reshape(n_patches, -1)
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    zca = (evecs / np.sqrt(np.maximum(evals, 0.0) + whiten_eps)) @ evecs.T
    Z = (X - mean) @ zca
    keep = np.linalg.norm(Z, axis=1) > 1e-8
    Z = normalize_rows(Z[keep])
    if Z.shape[0] < C:
        raise BackboneError(f"C={C} exceeds the number of usable patches ({Z.shape[0]})")
    km = spherical_kmeans(Z, C, seed, max_iter=50)
    filt = km.centers @ zca  # zca is symmetric
    scale = np.linalg.norm(filt, axis=1, keepdims=True)
    filt = filt / scale
    bias = -(filt @ mean)
    return BackboneParams(filt.reshape(C, k, k, 3), bias, stride, pool, pool_stride)


# -- feature-map files ---------------------------------------------------------

FEATURE_MAGIC = b"CDFM"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def export_feature_maps(path, maps, labels):
    maps = list(maps)
    labels = [int(y) for y in labels]
    if len(maps) != len(labels):
        raise BackboneError("one label per feature map required")
    if not maps:
        raise BackboneError("nothing to export")
    H, W, D = maps[0].vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, H, W, D, len(maps)))
        for m in maps:
            if m.vectors.shape != (H, W, D):
                raise BackboneError("all exported feature maps must share H, W, D")
            fh.write(np.where(m.valid[..., None], m.vectors, 0.0).astype("<f4").tobytes())
        fh.write(np.asarray(labels, dtype="<i4").tobytes())


def _read_feature_file(path) -> tuple:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise BackboneError(f"{path}: truncated header")
    magic, version, H, W, D, count = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BackboneError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise BackboneError(f"{path}: unsupported version {version}")
    item = H * W * D * 4
    expected = _HEADER.size + count * item + count * 4
    if len(data) != expected:
        raise BackboneError(
            f"{path}: payload of {len(data) - _HEADER.size} bytes does not match {count} items of "
            f"{H}x{W}x{D} (D mismatch or truncated file)")
    arr = np.frombuffer(data, dtype="<f4", count=count * H * W * D, offset=_HEADER.size)
    arr = arr.reshape(count, H, W, D).astype(np.float64)
    labels = np.frombuffer(data, dtype="<i4", count=count, offset=_HEADER.size + count * item)
    return arr, labels.astype(np.int64), D


def import_feature_maps(*paths, eps: float = 1e-6) -> list:
    """Load one or more feature files; vectors are re-normalised on load."""
    out, dims = [], set()
    for path in paths:
        arr, labels, D = _read_feature_file(path)
        dims.add(D)
        if len(dims) > 1:
            raise BackboneError(f"feature dimension mismatch across inputs: {sorted(dims)}")
        norms = np.linalg.norm(arr, axis=-1)
        valid = norms >= eps
        vec = np.where(valid[..., None], arr / np.where(valid, norms, 1.0)[..., None], 0.0)
        out.extend((FeatureMap(vec[i], valid[i]), int(labels[i])) for i in range(arr.shape[0]))
    return out
