"""Query-budgeted black-box patch attacks.

Two engines share one geometry and bookkeeping layer:

* :func:`sparse_rs_patch_attack` -- random search over patch locations and
  RGB-corner pixel values.
* :func:`texture_patch_attack` -- hill climbing with restarts over (texture,
  crop offset, location) drawn from a per-class :class:`TextureDictionary`.

A query function maps an (H, W, 3) image to a class-probability vector.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

CORNERS = np.array(list(itertools.product((0.0, 1.0), repeat=3)))


class AttackError(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    """Square patch at (row, col); payload is either ``pixels`` or a texture crop."""

    row: int
    col: int
    side: int
    pixels: np.ndarray | None = field(default=None, compare=False)
    texture: int | None = None
    crop: tuple | None = None

    def to_json(self) -> dict:
        d = {"row": self.row, "col": self.col, "side": self.side}
        if self.texture is not None:
            d.update(texture=self.texture, crop=list(self.crop))
        return d


@dataclass(frozen=True, eq=False)
class TextureDictionary:
    textures: tuple  # arrays (T, T, 3)
    classes: tuple  # class id per texture
    provenance: tuple = ()

    def __post_init__(self):
        if len(self.textures) != len(self.classes):
            raise AttackError("one class id per texture required")

    def __len__(self):
        return len(self.textures)

    @property
    def size(self) -> int:
        return min(t.shape[0] for t in self.textures) if self.textures else 0

    def ids_for_class(self, c: int) -> list:
        return [i for i, k in enumerate(self.classes) if k == c]


@dataclass(frozen=True)
class AttackConfig:
    n_patches: int = 1
    area: float = 0.10
    budget: int = 2000
    targeted: bool = False
    target: int | None = None
    seed: int = 0
    # random search schedule
    p_loc: float = 0.25
    radius0: float = 0.5
    frac0: float = 0.5
    # texture search
    iterations: int = 40
    patience: int | None = None
    jitter: float = 0.25

    def __post_init__(self):
        if not 0 < self.area < 1:
            raise AttackError("area fraction must lie in (0, 1)")
        if self.budget < 1:
            raise AttackError("query budget must be >= 1")
        if self.n_patches < 1:
            raise AttackError("need at least one patch")
        if self.targeted and self.target is None:
            raise AttackError("targeted attacks need a target label")


@dataclass(eq=False)
class AttackResult:
    success: bool
    queries: int
    patches: list
    image: np.ndarray
    mask: np.ndarray
    trace: list
    label: int
    true_label: int
    target: int | None = None

    def to_json(self) -> dict:
        return {
            "success": bool(self.success),
            "queries": int(self.queries),
            "patches": [p.to_json() for p in self.patches],
            "trace": [float(v) for v in self.trace],
            "label": int(self.label),
            "true_label": int(self.true_label),
            "target": self.target,
        }


class QueryCounter:
    """Wraps a query function and refuses calls beyond the budget."""

    def __init__(self, fn, budget: int):
        self._fn = fn
        self.budget = budget
        self.count = 0

    def __call__(self, image) -> np.ndarray:
        if self.count >= self.budget:
            raise BudgetExhausted(f"query budget of {self.budget} exhausted")
        self.count += 1
        return np.asarray(self._fn(image), dtype=np.float64)

    @property
    def remaining(self) -> int:
        return self.budget - self.count


def patch_geometry(area: float, n_patches: int, height: int, width: int) -> int:
    """Common side length of ``n_patches`` squares sharing a total area budget."""
    side = int(np.floor(np.sqrt(area * height * width / n_patches) + 1e-9))
    if side < 1:
        raise AttackError(f"{n_patches} patches cannot share {area:.3%} of a {height}x{width} image")
    return side


def apply_patches(image: np.ndarray, patches, dictionary: TextureDictionary | None = None) -> tuple:
    """Paste patches in order; returns ``(patched image, mask)``."""
    h, w = image.shape[:2]
    out = np.array(image, dtype=np.float64, copy=True)
    mask = np.zeros((h, w), dtype=bool)
    for p in patches:
        if p.side < 1 or p.row < 0 or p.col < 0 or p.row + p.side > h or p.col + p.side > w:
            raise AttackError(f"patch {p.to_json()} lies outside the {h}x{w} image")
        if p.pixels is not None:
            payload = p.pixels
        else:
            if dictionary is None or p.texture is None:
                raise AttackError("texture patch needs a dictionary")
            tex = dictionary.textures[p.texture]
            dy, dx = p.crop
            if dy < 0 or dx < 0 or dy + p.side > tex.shape[0] or dx + p.side > tex.shape[1]:
                raise AttackError("texture crop outside the texture")
            payload = tex[dy:dy + p.side, dx:dx + p.side]
        out[p.row:p.row + p.side, p.col:p.col + p.side] = payload
        mask[p.row:p.row + p.side, p.col:p.col + p.side] = True
    return out, mask


def attack_loss(probs, true_label: int, targeted: bool = False, target: int | None = None) -> float:
    """Untargeted: p(true) - max_{y != true} p(y). Targeted: -p(target). Lower is better."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise AttackError("attack loss needs a probability vector")
    if targeted:
        return -float(p[target])
    others = np.delete(p, true_label)
    return float(p[true_label] - others.max())


def is_success(probs, true_label: int, targeted: bool = False, target: int | None = None) -> bool:
    p = np.asarray(probs)
    if targeted:
        return int(np.argmax(p)) == target
    return attack_loss(p, true_label) < 0


class _Search:
    """Shared bookkeeping: counted queries, best state and the best-loss trace."""

    def __init__(self, query_fn, image, true_label, config: AttackConfig, dictionary=None):
        self.q = QueryCounter(query_fn, config.budget)
        self.image = np.asarray(image, dtype=np.float64)
        self.true_label = true_label
        self.config = config
        self.dictionary = dictionary
        self.trace: list = []
        self.best = None  # (loss, patches, probs)

    def evaluate(self, patches) -> tuple:
        adv, _ = apply_patches(self.image, patches, self.dictionary)
        probs = self.q(adv)
        c = self.config
        loss = attack_loss(probs, self.true_label, c.targeted, c.target)
        if self.best is None or loss < self.best[0]:
            self.best = (loss, list(patches), probs)
        self.trace.append(self.best[0])
        return loss, probs

    @property
    def done(self) -> bool:
        c = self.config
        return self.q.remaining <= 0 or (
            self.best is not None and is_success(self.best[2], self.true_label, c.targeted, c.target))

    def result(self) -> AttackResult:
        loss, patches, probs = self.best
        adv, mask = apply_patches(self.image, patches, self.dictionary)
        c = self.config
        return AttackResult(
            success=is_success(probs, self.true_label, c.targeted, c.target),
            queries=self.q.count,
            patches=patches,
            image=adv,
            mask=mask,
            trace=self.trace,
            label=int(np.argmax(probs)),
            true_label=self.true_label,
            target=c.target if c.targeted else None,
        )


def sparse_rs_patch_attack(query_fn, image, true_label: int, config: AttackConfig) -> AttackResult:
    """Random search over patch locations and RGB-corner colours.

    Each step either moves one patch within a radius that shrinks linearly
    over the budget (probability ``p_loc``) or repaints a square window of
    one patch, whose area fraction also shrinks linearly, with a single
    corner colour. Proposals are kept only if the loss strictly improves.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    side = patch_geometry(config.area, config.n_patches, h, w)
    rng = np.random.default_rng(config.seed)
    search = _Search(query_fn, image, true_label, config)

    cur = [
        PatchSpec(int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side,
                  CORNERS[rng.integers(0, 8, size=(side, side))])
        for _ in range(config.n_patches)
    ]
    cur_loss, _ = search.evaluate(cur)
    while not search.done:
        t = search.q.count / config.budget
        j = int(rng.integers(config.n_patches))
        p = cur[j]
        if rng.random() < config.p_loc:
            r = max(1, int(round(config.radius0 * (1.0 - t) * max(h, w))))
            row = int(np.clip(p.row + rng.integers(-r, r + 1), 0, h - side))
            col = int(np.clip(p.col + rng.integers(-r, r + 1), 0, w - side))
            if (row, col) == (p.row, p.col):
                continue
            new = PatchSpec(row, col, side, p.pixels)
        else:
            frac = max(config.frac0 * (1.0 - t), 1.0 / side**2)
            s = max(1, int(round(side * np.sqrt(frac))))
            a, b = (int(v) for v in rng.integers(0, side - s + 1, size=2))
            color = CORNERS[rng.integers(8)]
            window = p.pixels[a:a + s, b:b + s]
            if np.all(window == color):
                continue
            pixels = p.pixels.copy()
            pixels[a:a + s, b:b + s] = color
            new = PatchSpec(p.row, p.col, side, pixels)
        prop = cur[:j] + [new] + cur[j + 1:]
        loss, _ = search.evaluate(prop)
        if loss < cur_loss:
            cur, cur_loss = prop, loss
    return search.result()


# -- texture dictionary and texture attack ---------------------------------------------


def _neutral_paste_score(query_fn, texture, side, size, c) -> float:
    canvas = np.full((size, size, 3), 0.5)
    r0 = (size - side) // 2
    canvas[r0:r0 + side, r0:r0 + side] = texture[:side, :side]
    return float(np.asarray(query_fn(canvas))[c])


def build_texture_dictionary(dataset, clusters: int, seed: int, *, texture_size: int | None = None,
                             crops_per_class: int = 64, query_fn=None, candidate_factor: int = 3) -> TextureDictionary:
    """Per-class textures: medoid crops of colour-statistics clusters.

    With ``query_fn``, ``candidate_factor * clusters`` candidate clusters are
    formed and the ``clusters`` whose medoid most raises the model's
    probability of the class when pasted on a grey canvas are kept.
    """
    images = dataset.images
    size = images.shape[1]
    T = texture_size or size // 2
    if T > min(images.shape[1:3]):
        raise AttackError("texture size exceeds the image size")
    rng = np.random.default_rng(seed)
    textures, classes, prov = [], [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            raise AttackError(f"class {c} has no images to cut textures from")
        src = rng.choice(idx, size=crops_per_class)
        ys = rng.integers(0, images.shape[1] - T + 1, size=crops_per_class)
        xs = rng.integers(0, images.shape[2] - T + 1, size=crops_per_class)
        crops = np.stack([images[i, y:y + T, x:x + T] for i, y, x in zip(src, ys, xs)])
        stats = np.concatenate([crops.mean(axis=(1, 2)), crops.std(axis=(1, 2))], axis=1)
        n_clusters = min(crops_per_class, clusters * (candidate_factor if query_fn is not None else 1))
        centroids, labels = kmeans2(stats, n_clusters, minit="++", seed=rng)
        members = []
        for j in range(n_clusters):
            mem = np.flatnonzero(labels == j)
            if mem.size == 0:
                continue
            medoid = mem[np.argmin(np.linalg.norm(stats[mem] - centroids[j], axis=1))]
            members.append((j, int(medoid), int(mem.size)))
        if query_fn is not None:
            side = min(T, size // 2)
            scored = [(_neutral_paste_score(query_fn, crops[m], side, size, c), j, m, n) for j, m, n in members]
            scored.sort(key=lambda s: (-s[0], s[1]))
            chosen = [(j, m, n, s) for s, j, m, n in scored[:clusters]]
        else:
            chosen = [(j, m, n, None) for j, m, n in members[:clusters]]
        for j, m, n, score in chosen:
            textures.append(crops[m].copy())
            classes.append(c)
            prov.append({"class": c, "image": int(src[m]), "row": int(ys[m]), "col": int(xs[m]),
                         "cluster_size": n, "score": score})
    return TextureDictionary(tuple(textures), tuple(classes), tuple(prov))


def texture_patch_attack(query_fn, image, true_label: int, dictionary: TextureDictionary,
                         config: AttackConfig) -> AttackResult:
    """Hill climbing with restarts over (texture, crop, location) per patch.

    One coordinate of one patch is mutated per query; improvements are kept.
    After ``patience`` consecutive failures the search restarts from a random
    state (the best state so far is retained). At most ``iterations``
    restarts are made.
    """
    if len(dictionary) == 0:
        raise AttackError("texture dictionary is empty")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    side = patch_geometry(config.area, config.n_patches, h, w)
    T = dictionary.size
    if side > T:
        raise AttackError(f"patch side {side} exceeds texture size {T}")
    if config.targeted:
        allowed = dictionary.ids_for_class(config.target)
    else:
        allowed = [i for i, c in enumerate(dictionary.classes) if c != true_label]
    if not allowed:
        allowed = list(range(len(dictionary)))
    patience = config.patience or max(1, config.budget // max(1, config.iterations))
    rng = np.random.default_rng(config.seed)
    search = _Search(query_fn, image, true_label, config, dictionary)

    def random_patch():
        return PatchSpec(int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side,
                         texture=int(allowed[rng.integers(len(allowed))]),
                         crop=(int(rng.integers(0, T - side + 1)), int(rng.integers(0, T - side + 1))))

    cur = [random_patch() for _ in range(config.n_patches)]
    cur_loss, _ = search.evaluate(cur)
    stall, restarts = 0, 0
    while not search.done:
        if stall >= patience:
            restarts += 1
            if restarts >= config.iterations:
                break
            cur = [random_patch() for _ in range(config.n_patches)]
            cur_loss, _ = search.evaluate(cur)
            stall = 0
            continue
        j = int(rng.integers(config.n_patches))
        p = cur[j]
        move = int(rng.integers(3))
        if move == 0 and len(allowed) > 1:
            choices = [t for t in allowed if t != p.texture]
            new = PatchSpec(p.row, p.col, side, texture=int(choices[rng.integers(len(choices))]), crop=p.crop)
        elif move == 1 and T > side:
            r = max(1, int(round(config.jitter * T)))
            dy = int(np.clip(p.crop[0] + rng.integers(-r, r + 1), 0, T - side))
            dx = int(np.clip(p.crop[1] + rng.integers(-r, r + 1), 0, T - side))
            new = PatchSpec(p.row, p.col, side, texture=p.texture, crop=(dy, dx))
        else:
            r = max(1, int(round(config.jitter * max(h, w))))
            row = int(np.clip(p.row + rng.integers(-r, r + 1), 0, h - side))
            col = int(np.clip(p.col + rng.integers(-r, r + 1), 0, w - side))
            new = PatchSpec(row, col, side, texture=p.texture, crop=p.crop)
        if new == p:
            stall += 1
            continue
        prop = cur[:j] + [new] + cur[j + 1:]
        loss, _ = search.evaluate(prop)
        if loss < cur_loss:
            cur, cur_loss, stall = prop, loss, 0
        else:
            stall += 1
    return search.result()
