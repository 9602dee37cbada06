"""Training configuration, model bundles and their on-disk format.

A bundle is a directory holding ``header.json`` (shapes, hyperparameters,
format version, array offsets) and ``arrays.bin`` (little-endian float32
arrays concatenated in header order).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneParams, init_filters
from .combiner import (CombinedClassifier, CombinerConfig, CompNetClassifier, HeadConfig, PlainClassifier,
                       SoftmaxHead, train_softmax_head, train_with_random_patches)
from .compnet import ClassModel, CompNet, OccluderModel
from .finetune import FinetuneConfig, PartClassifier, finetune, refit_after_finetune
from .pipeline import CompositionalConfig, fit_compositional
from .vmf import VmfDictionary, normalize_rows

log = logging.getLogger(__name__)

KINDS = ("plain", "patch-aug", "compnet", "compnet-ft", "combined")
BUNDLE_FORMAT = "compdef-bundle"
BUNDLE_VERSION = 1
HEADER_NAME = "header.json"
ARRAYS_NAME = "arrays.bin"


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    filters: int = 32
    kernel: int = 5
    pool: int = 4
    seed: int = 0
    aug_area: float = 0.10
    n_aug: int = 4
    compositional: CompositionalConfig = CompositionalConfig()
    head: HeadConfig = HeadConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    combiner: CombinerConfig = CombinerConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d, "train")


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise BundleError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise BundleError(f"{where}: unknown field(s) {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        default = getattr(cls(), name)
        kw[name] = _from_dict(type(default), value, f"{where}.{name}") if is_dataclass(default) else value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise BundleError(f"{where}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ModelBundle:
    kind: str
    backbone: BackboneParams
    compnet: CompNet | None = None
    part: PartClassifier | None = None
    heads: dict = field(default_factory=dict)  # name -> SoftmaxHead
    combiner: CombinerConfig | None = None
    hyperparameters: dict = field(default_factory=dict)
    version: int = BUNDLE_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.version != BUNDLE_VERSION:
            raise BundleError(f"unsupported bundle version {self.version}")
        if self.kind not in KINDS:
            raise BundleError(f"unknown model kind {self.kind!r}")
        D = self.backbone.C
        needs = {
            "plain": ("plain",), "patch-aug": ("patch-aug",), "combined": ("plain",),
        }.get(self.kind, ())
        for name in needs:
            if name not in self.heads:
                raise BundleError(f"{self.kind} bundle lacks the {name!r} head")
        for name, head in self.heads.items():
            if head.weights.shape[1] != D:
                raise BundleError(f"head {name!r} expects D={head.weights.shape[1]}, backbone gives {D}")
        if self.kind in ("compnet", "compnet-ft", "combined"):
            if self.compnet is None:
                raise BundleError(f"{self.kind} bundle lacks the compositional model")
        if self.compnet is not None and self.compnet.dictionary.D != D:
            raise BundleError("dictionary dimension does not match the backbone")
        if self.part is not None and self.part.weights.shape[1] != D:
            raise BundleError("part classifier dimension does not match the backbone")
        if self.kind == "combined":
            if self.combiner is None:
                raise BundleError("combined bundle lacks a combiner config")
            if self.heads["plain"].weights.shape[0] != self.compnet.n_classes:
                raise BundleError("head and compositional model disagree on the number of classes")

    @property
    def n_classes(self) -> int:
        if self.compnet is not None:
            return self.compnet.n_classes
        return next(iter(self.heads.values())).weights.shape[0]

    def classifier(self, combiner: CombinerConfig | None = None):
        """Probability-returning model for this bundle's kind."""
        if self.kind in ("plain", "patch-aug"):
            return PlainClassifier(self.backbone, self.heads[self.kind])
        cn = CompNetClassifier(self.backbone, self.compnet)
        if self.kind == "combined":
            return CombinedClassifier(PlainClassifier(self.backbone, self.heads["plain"]), cn,
                                      combiner or self.combiner)
        return cn


# -- training ----------------------------------------------------------------------


def train_models(train, background, config: TrainConfig, kinds=KINDS) -> dict:
    """Train every requested kind from shared seeds; returns ``{kind: ModelBundle}``.

    All kinds except ``compnet-ft`` share one backbone, and ``combined``
    reuses the plain head and the compositional model.
    """
    kinds = tuple(dict.fromkeys(kinds))
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise BundleError(f"unknown model kind(s) {bad}")
    if any(k in ("compnet", "compnet-ft", "combined") for k in kinds) and not background:
        raise BundleError("compositional kinds need a background corpus (none was supplied)")
    hyper = config.to_dict()
    backbone = init_filters(train, config.filters, config.kernel, config.seed, pool=config.pool,
                            pool_stride=config.pool)
    out, cache = {}, {}

    def plain_head():
        if "plain" not in cache:
            cache["plain"] = train_softmax_head(train, backbone, config.head)
            log.info("plain head: %d epochs, final loss %.4f", len(cache["plain"].trace),
                     cache["plain"].trace[-1] if cache["plain"].trace else float("nan"))
        return cache["plain"]

    def compnet():
        if "compnet" not in cache:
            cache["compnet"] = fit_compositional(train, background, backbone, config.compositional, config.seed)
        return cache["compnet"]

    for kind in kinds:
        if kind == "plain":
            out[kind] = ModelBundle(kind, backbone, heads={"plain": plain_head()}, hyperparameters=hyper)
        elif kind == "patch-aug":
            head = train_with_random_patches(train, backbone, config.aug_area, config.head, n_aug=config.n_aug)
            out[kind] = ModelBundle(kind, backbone, heads={"patch-aug": head}, hyperparameters=hyper)
        elif kind == "compnet":
            out[kind] = ModelBundle(kind, backbone, compnet=compnet(), hyperparameters=hyper)
        elif kind == "combined":
            out[kind] = ModelBundle(kind, backbone, compnet=compnet(), heads={"plain": plain_head()},
                                    combiner=config.combiner, hyperparameters=hyper)
        else:
            ft = finetune(train, backbone, config.finetune)
            log.info("part finetuning: loss %.4f -> %.4f", ft.trace[0] if ft.trace else float("nan"),
                     ft.trace[-1] if ft.trace else float("nan"))
            cc = config.compositional
            cn = refit_after_finetune(train, ft.backbone, cc.K, cc.M, config.seed, background=background,
                                      config=cc)
            out[kind] = ModelBundle(kind, ft.backbone, compnet=cn, part=ft.part,
                                    hyperparameters={**hyper, "finetune_trace": list(ft.trace)})
    return out


def train_bundle(train, background, config: TrainConfig, kind: str) -> ModelBundle:
    return train_models(train, background, config, (kind,))[kind]


# -- serialization -----------------------------------------------------------------


class _Blob:
    def __init__(self):
        self.parts: list = []
        self.offset = 0

    def add(self, arr) -> dict:
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        ref = {"offset": self.offset, "shape": list(a.shape)}
        self.parts.append(a.tobytes())
        self.offset += a.nbytes
        return ref


def _read(buf: bytes, ref: dict) -> np.ndarray:
    shape = tuple(int(s) for s in ref["shape"])
    n = int(np.prod(shape))
    off = int(ref["offset"])
    if off < 0 or off + 4 * n > len(buf):
        raise BundleError(f"array at offset {off} with shape {shape} runs past the end of the blob")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)


def _simplex(a: np.ndarray) -> np.ndarray:
    a = np.maximum(a, 0.0)
    return a / a.sum(axis=-1, keepdims=True)


def save_bundle(bundle: ModelBundle, path) -> Path:
    """Write the bundle directory; identical bundles give byte-identical files."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    blob = _Blob()
    bb = bundle.backbone
    header = {
        "format": BUNDLE_FORMAT,
        "version": bundle.version,
        "kind": bundle.kind,
        "hyperparameters": bundle.hyperparameters,
        "backbone": {"stride": bb.stride, "pool": bb.pool, "pool_stride": bb.pool_stride, "eps": bb.eps,
                     "filters": blob.add(bb.filters), "bias": blob.add(bb.bias)},
        "compnet": None,
        "part": None,
        "heads": {},
        "combiner": None if bundle.combiner is None else asdict(bundle.combiner),
    }
    if bundle.compnet is not None:
        cn = bundle.compnet
        header["compnet"] = {
            "rho": cn.rho,
            "score_scale": cn.score_scale,
            "floor": cn.floor,
            "dictionary": {"mu": blob.add(cn.dictionary.mu), "sigma": blob.add(cn.dictionary.sigma)},
            "class_models": [{"label": m.label, "coeffs": blob.add(m.coeffs)} for m in cn.class_models],
            "occluder": {"beta": blob.add(cn.occluder.beta)},
        }
    if bundle.part is not None:
        header["part"] = {"weights": blob.add(bundle.part.weights)}
    for name in sorted(bundle.heads):
        h = bundle.heads[name]
        header["heads"][name] = {"weights": blob.add(h.weights), "bias": blob.add(h.bias)}
    (out / ARRAYS_NAME).write_bytes(b"".join(blob.parts))
    (out / HEADER_NAME).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return out


def load_bundle(path) -> ModelBundle:
    """Read and validate a bundle; unit vectors and simplices are renormalised after float32 storage."""
    root = Path(path)
    try:
        header = json.loads((root / HEADER_NAME).read_text())
        buf = (root / ARRAYS_NAME).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleError(f"cannot read bundle {root}: {exc}") from exc
    if header.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{root} is not a model bundle")
    if header.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {header.get('version')!r}")
    try:
        b = header["backbone"]
        backbone = BackboneParams(_read(buf, b["filters"]), _read(buf, b["bias"]), int(b["stride"]),
                                  int(b["pool"]), int(b["pool_stride"]), float(b["eps"]))
        compnet = None
        if header["compnet"] is not None:
            c = header["compnet"]
            d = c["dictionary"]
            dictionary = VmfDictionary(normalize_rows(_read(buf, d["mu"])), _read(buf, d["sigma"]))
            models = tuple(ClassModel(int(m["label"]), _simplex(_read(buf, m["coeffs"])), dictionary)
                           for m in c["class_models"])
            occluder = OccluderModel(_simplex(_read(buf, c["occluder"]["beta"])))
            compnet = CompNet(dictionary, models, occluder, rho=float(c["rho"]),
                              score_scale=float(c["score_scale"]), floor=c["floor"])
        part = None if header["part"] is None else PartClassifier(_read(buf, header["part"]["weights"]))
        heads = {name: SoftmaxHead(_read(buf, h["weights"]), _read(buf, h["bias"]))
                 for name, h in header["heads"].items()}
        combiner = None if header["combiner"] is None else CombinerConfig(**header["combiner"])
        return ModelBundle(header["kind"], backbone, compnet, part, heads, combiner,
                           header.get("hyperparameters", {}), int(header["version"]))
    except (KeyError, TypeError) as exc:
        raise BundleError(f"malformed bundle header: missing or invalid {exc}") from exc
