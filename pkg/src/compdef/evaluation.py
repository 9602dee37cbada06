"""Metrics, experiment configurations and reports.

An experiment trains a roster of models from one seed, measures clean
accuracy, runs every attack against every model on the images that model
classifies correctly, and localizes the pasted patches with CompNet
occlusion scores.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, build_texture_dictionary, sparse_rs_patch_attack, texture_patch_attack
from .combiner import CombinedClassifier, CombinerConfig
from .data import SyntheticSpec, background_corpus, env_threads, generate_synthetic_dataset
from .models import KINDS, TrainConfig, train_models

log = logging.getLogger(__name__)

REPORT_VERSION = 1
ENGINES = ("sparse-rs", "texture")


class ConfigError(ValueError):
    pass


class CellError(RuntimeError):
    pass


# -- metrics -----------------------------------------------------------------------


def accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    preds = np.array([model.predict(im) for im in dataset.images])
    return float(np.mean(preds == dataset.labels))


def attack_success_rate(results) -> float:
    """Successes over attacked images; attacks must only be run on clean-correct images."""
    results = list(results)
    if not results:
        raise ValueError("no attacked images: success rate is undefined")
    return float(np.mean([bool(r.success) for r in results]))


def localization_labels(mask: np.ndarray, geometry, overlap: float = 0.5) -> np.ndarray:
    """Position (r, c) is positive iff at least ``overlap`` of its receptive field is masked."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (geometry.image_height, geometry.image_width):
        raise ValueError(f"mask shape {mask.shape} does not match the geometry's image "
                         f"{geometry.image_height}x{geometry.image_width}")
    if not 0 < overlap <= 1:
        raise ValueError("overlap fraction must lie in (0, 1]")
    out = np.zeros((geometry.height, geometry.width), dtype=bool)
    for r in range(geometry.height):
        for c in range(geometry.width):
            win = mask[geometry.window(r, c)]
            out[r, c] = win.size > 0 and win.mean() >= overlap
    return out


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def _roc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative position")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # one operating point per distinct threshold, ties grouped together
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds, float(np.trapezoid(tpr, fpr)))


def localization_roc(score_maps, label_maps, per_image: bool = False) -> RocCurve:
    """Threshold sweep over per-position occlusion scores with trapezoidal AUC.

    Pooled (default): one curve over all positions of all images. Per image:
    the curves of images holding both labels are averaged vertically on a
    101-point false-positive grid and the AUC is the mean per-image AUC.
    """
    scores = [np.asarray(s, dtype=np.float64).ravel() for s in score_maps]
    labels = [np.asarray(lab, dtype=bool).ravel() for lab in label_maps]
    if len(scores) != len(labels) or any(a.shape != b.shape for a, b in zip(scores, labels)):
        raise ValueError("score and label maps must pair up with equal shapes")
    if not scores:
        raise ValueError("no score maps given")
    if not per_image:
        return _roc(np.concatenate(scores), np.concatenate(labels))
    grid = np.linspace(0.0, 1.0, 101)
    curves = [_roc(s, lab) for s, lab in zip(scores, labels) if 0 < lab.sum() < lab.size]
    if not curves:
        raise ValueError("no image holds both positive and negative positions")
    tpr = np.mean([np.interp(grid, c.fpr, c.tpr) for c in curves], axis=0)
    return RocCurve(grid, tpr, np.full(grid.shape, np.nan), float(np.mean([c.auc for c in curves])))


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str
    threshold: float | None = None
    temperature: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"models.{self.name}.kind: unknown kind {self.kind!r} (expected one of {KINDS})")


@dataclass(frozen=True)
class AttackSpec:
    name: str
    engine: str = "sparse-rs"
    config: AttackConfig = AttackConfig()
    texture_clusters: int = 4

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"attacks.{self.name}.engine: unknown engine {self.engine!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSpec = SyntheticSpec(n_per_class=60, seed=1)
    models: tuple = (ModelSpec("plain", "plain"),)
    attacks: tuple = ()
    n_test: int = 100
    seed: int = 0
    n_background: int = 100
    train: TrainConfig = TrainConfig()
    overlap: float = 0.5
    per_image_roc: bool = False

    def __post_init__(self):
        if not self.models:
            raise ConfigError("models: roster must not be empty")
        if self.n_test < 20:
            raise ConfigError("n_test: at least 20 test images are required")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("models: names must be unique")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise ConfigError("attacks: names must be unique")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        _reject_unknown(cls, d, "")
        kw = dict(d)
        for name, kinds in _SCALARS.items():
            if name in kw and (isinstance(kw[name], bool) or not isinstance(kw[name], kinds)):
                raise ConfigError(f"{name}: expected a number, got {kw[name]!r}")
        try:
            if "dataset" in kw:
                kw["dataset"] = _build(SyntheticSpec, kw["dataset"], "dataset")
            if "train" in kw:
                kw["train"] = TrainConfig.from_dict(kw["train"])
            if "models" in kw:
                kw["models"] = tuple(_build(ModelSpec, m, f"models[{i}]") for i, m in enumerate(kw["models"]))
            if "attacks" in kw:
                atts = []
                for i, a in enumerate(kw["attacks"]):
                    a = dict(a) if isinstance(a, dict) else a
                    if isinstance(a, dict) and "config" in a:
                        a["config"] = _build(AttackConfig, a["config"], f"attacks[{i}].config")
                    atts.append(_build(AttackSpec, a, f"attacks[{i}]"))
                kw["attacks"] = tuple(atts)
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"experiment config is not valid JSON: {exc}") from exc


_SCALARS = {"n_test": int, "seed": int, "n_background": int, "overlap": (int, float)}


def _reject_unknown(cls, d: dict, where: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown field {prefix}{sorted(unknown)[0]}")


def _build(cls, d, where: str):
    if is_dataclass(d):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(cls, d, where)
    try:
        obj = cls(**d)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# -- report ------------------------------------------------------------------------


@dataclass
class Cell:
    model: str
    attack: str
    clean_accuracy: float
    n_attacked: int
    n_success: int
    asr: float | None
    mean_queries: float | None


@dataclass
class Report:
    accuracy: dict
    cells: list
    localization: dict
    routing: dict
    environment: dict
    config: dict
    version: int = REPORT_VERSION
    results: dict = field(default_factory=dict, repr=False)  # (model, attack) -> [AttackResult]
    rocs: dict = field(default_factory=dict, repr=False)  # model -> RocCurve

    def cell(self, model: str, attack: str) -> Cell:
        for c in self.cells:
            if c.model == model and c.attack == attack:
                return c
        raise KeyError((model, attack))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "accuracy": self.accuracy,
            "cells": [asdict(c) for c in self.cells],
            "localization": self.localization,
            "routing": self.routing,
            "environment": self.environment,
            "config": self.config,
        }

    def write(self, out_dir, figures: bool = True) -> Path:
        """report.json, cells.csv, roc_<model>.csv and (optionally) PNG figures."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(out / "cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            names = [f.name for f in fields(Cell)]
            w.writerow(names)
            for c in self.cells:
                w.writerow(["" if getattr(c, n) is None else getattr(c, n) for n in names])
        for name, roc in self.rocs.items():
            roc.to_csv(out / f"roc_{name}.csv")
        if figures:
            from .plots import plot_asr, plot_roc

            if self.cells:
                plot_asr(self, out / "asr.png")
            if self.rocs:
                plot_roc(self.rocs, out / "roc.png")
        return out


def cell_seed(seed: int, model: str, attack: str, image: int) -> int:
    """Deterministic per-(experiment, model, attack, image) attack seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(model.encode()), zlib.crc32(attack.encode()), image])
    return int(ss.generate_state(1)[0])


def _run_cell(model, attack: AttackSpec, images, labels, indices, seed: int, model_name: str, dictionary):
    def one(i):
        cfg = replace(attack.config, seed=cell_seed(seed, model_name, attack.name, int(i)))
        if attack.engine == "texture":
            return texture_patch_attack(model, images[i], int(labels[i]), dictionary, cfg)
        return sparse_rs_patch_attack(model, images[i], int(labels[i]), cfg)

    threads = env_threads()
    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


def _with_combiner(model, ms: ModelSpec):
    if not isinstance(model, CombinedClassifier):
        return model
    cfg = model.config
    cfg = CombinerConfig(cfg.threshold if ms.threshold is None else ms.threshold,
                         cfg.temperature if ms.temperature is None else ms.temperature)
    return CombinedClassifier(model.head, model.compnet, cfg)


def _compnet_of(model):
    if isinstance(model, CombinedClassifier):
        return model.compnet
    return model if hasattr(model, "score_map") else None


def run_experiment(config: ExperimentConfig, trained: dict | None = None) -> Report:
    """Train, evaluate and attack every roster model; deterministic per ``config.seed``.

    ``trained`` optionally supplies pre-trained ``{kind: ModelBundle}``.
    """
    spec = config.dataset
    data = generate_synthetic_dataset(spec)
    train = data.split("train")
    test = data.split("test").subsample(config.n_test, config.seed)
    if len(test) < config.n_test:
        raise ConfigError(f"n_test: dataset has only {len(test)} test images")
    kinds = tuple(dict.fromkeys(m.kind for m in config.models))
    if trained is None or any(k not in trained for k in kinds):
        background = background_corpus(spec, config.n_background, config.seed)
        trained = train_models(train, background, config.train, kinds)

    models = {m.name: _with_combiner(trained[m.kind].classifier(), m) for m in config.models}
    acc, correct, routing = {}, {}, {}
    for name, model in models.items():
        preds = np.array([model.predict(im) for im in test.images])
        acc[name] = float(np.mean(preds == test.labels))
        correct[name] = np.flatnonzero(preds == test.labels)
        if isinstance(model, CombinedClassifier):
            sources = [model.route(im)[1] for im in test.images]
            routing[name] = {"threshold": model.config.threshold, "temperature": model.config.temperature,
                             "head_fraction": float(np.mean([s == "head" for s in sources]))}

    cells, results = [], {}
    for name, model in models.items():
        for attack in config.attacks:
            try:
                dictionary = None
                if attack.engine == "texture":
                    dictionary = build_texture_dictionary(train, attack.texture_clusters, config.seed,
                                                          query_fn=model)
                res = _run_cell(model, attack, test.images, test.labels, correct[name], config.seed, name,
                                dictionary)
            except Exception as exc:
                raise CellError(f"cell (model={name}, attack={attack.name}) failed: {exc}") from exc
            results[(name, attack.name)] = res
            n_s = sum(r.success for r in res)
            cells.append(Cell(name, attack.name, acc[name], len(res), int(n_s),
                              attack_success_rate(res) if res else None,
                              float(np.mean([r.queries for r in res])) if res else None))
            log.info("%s / %s: ASR %s over %d images", name, attack.name, cells[-1].asr, len(res))

    localization, rocs = {}, {}
    for name, model in models.items():
        cn = _compnet_of(model)
        if cn is None:
            continue
        smaps, lmaps = [], []
        for (mname, _), res in results.items():
            if mname != name:
                continue
            for r in res:
                F = cn.features(r.image)
                geom = cn.backbone.geometry(*r.image.shape[:2])
                smaps.append(cn.compnet.score_map(F).score)
                lmaps.append(localization_labels(r.mask, geom, config.overlap))
        try:
            rocs[name] = localization_roc(smaps, lmaps, per_image=config.per_image_roc)
            localization[name] = rocs[name].auc
        except ValueError:
            localization[name] = None

    env = {"python": platform.python_version(), "numpy": np.__version__, "seed": config.seed,
           "threads": env_threads(), "n_test": len(test)}
    return Report(acc, cells, localization, routing, env, config.to_dict(), results=results, rocs=rocs)
