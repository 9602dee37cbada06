"""``compdef`` command-line interface.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("compdef")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")


def _add_combiner(p):
    p.add_argument("--threshold", type=float, default=None, help="routing confidence threshold tau")
    p.add_argument("--temperature", type=float, default=None, help="routing softmax temperature T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compdef", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic dataset and background corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--clutter", type=float, default=0.5)
    p.add_argument("--n-per-class", type=int, default=40)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--fine-grained", action="store_true")
    p.add_argument("--background", type=int, default=100, help="number of background-corpus images")
    _add_seed(p)

    p = sub.add_parser("train", help="train a model bundle")
    p.add_argument("--data", required=True, help="dataset directory (manifest or class folders)")
    p.add_argument("--out", required=True, help="bundle directory to write")
    p.add_argument("--kind", required=True, choices=("plain", "patch-aug", "compnet", "compnet-ft", "combined"))
    p.add_argument("--background", default=None,
                   help="folder of background images (default: the dataset manifest's corpus)")
    p.add_argument("--size", type=int, default=None, help="resize class-folder images to this size")
    p.add_argument("--config", default=None, help="JSON file with training hyperparameters")
    p.add_argument("--area", type=float, default=None, help="patch area for --kind patch-aug")
    _add_combiner(p)
    _add_seed(p)

    p = sub.add_parser("attack", help="attack a bundle on the clean-correct test images")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--engine", choices=("sparse-rs", "texture"), default="sparse-rs")
    p.add_argument("--area", type=float, default=0.10)
    p.add_argument("--patches", type=int, default=1)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--targeted", action="store_true")
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="attack at most this many images")
    p.add_argument("--split", default="test", help="dataset split to attack (default test)")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--textures", type=int, default=4, help="textures per class for --engine texture")
    _add_combiner(p)
    _add_seed(p)

    p = sub.add_parser("evaluate", help="run an experiment config and write a report")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("visualize", help="image and occlusion-score overlay side by side")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--label", type=int, default=None, help="class whose model explains the object")
    return parser


class UsageError(Exception):
    pass


# -- commands ------------------------------------------------------------------------


def cmd_synth_data(args):
    from .data import SyntheticSpec, background_corpus, generate_synthetic_dataset, write_dataset

    spec = SyntheticSpec(n_classes=args.classes, size=args.size, clutter=args.clutter,
                         fine_grained=args.fine_grained, seed=args.seed, n_per_class=args.n_per_class,
                         test_fraction=args.test_fraction)
    ds = generate_synthetic_dataset(spec)
    bg = background_corpus(spec, args.background, args.seed)
    path = write_dataset(ds, args.out, spec, bg)
    print(f"wrote {len(ds)} images and {len(bg)} background images to {path}")


def _load(data, size):
    from .data import load_dataset

    return load_dataset(data, size=size)


def _train_split(ds):
    return ds.split("train") if ds.splits is not None and "train" in set(ds.splits) else ds


def cmd_train(args):
    from .combiner import CombinerConfig
    from .data import load_images, resize
    from .models import TrainConfig, save_bundle, train_bundle

    ds, background = _load(args.data, args.size)
    if args.background is not None:
        bdir = Path(args.background)
        files = sorted(f for f in bdir.rglob("*") if f.suffix.lower() in (".png", ".ppm"))
        background = load_images(files)
        if args.size is not None:
            background = [resize(im, args.size) for im in background]
    if args.kind in ("compnet", "compnet-ft", "combined") and not background:
        raise UsageError(f"--kind {args.kind} needs a background corpus: pass --background or use a manifest "
                         "that lists one")
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    cfg = replace(cfg, seed=args.seed)
    if args.area is not None:
        cfg = replace(cfg, aug_area=args.area)
    if args.threshold is not None or args.temperature is not None:
        c = cfg.combiner
        cfg = replace(cfg, combiner=CombinerConfig(c.threshold if args.threshold is None else args.threshold,
                                                   c.temperature if args.temperature is None else args.temperature))
    train = _train_split(ds)
    bundle = train_bundle(train, background, cfg, args.kind)
    save_bundle(bundle, args.out)
    clf = bundle.classifier()
    acc = float(np.mean([clf.predict(im) == y for im, y in zip(train.images, train.labels)]))
    print(f"kind={args.kind} classes={train.n_classes} train_images={len(train)} train_accuracy={acc:.4f}")
    for name, head in bundle.heads.items():
        if head.trace:
            print(f"head {name}: {len(head.trace)} epochs, loss {head.trace[0]:.4f} -> {head.trace[-1]:.4f}")
    if bundle.compnet is not None:
        traces = [m.trace for m in bundle.compnet.class_models if m.trace]
        if traces:
            print(f"class models: mean EM log-likelihood gain {np.mean([t[-1] - t[0] for t in traces]):.2f}")
    ft = bundle.hyperparameters.get("finetune_trace")
    if ft:
        print(f"part finetuning: loss {ft[0]:.4f} -> {ft[-1]:.4f} over {len(ft)} epochs")
    print(f"bundle written to {args.out}")


def _combiner_override(bundle, args):
    from .combiner import CombinerConfig

    if bundle.kind != "combined" or (args.threshold is None and args.temperature is None):
        return None
    c = bundle.combiner
    return CombinerConfig(c.threshold if args.threshold is None else args.threshold,
                          c.temperature if args.temperature is None else args.temperature)


def cmd_attack(args):
    from .attacks import AttackConfig, build_texture_dictionary, sparse_rs_patch_attack, texture_patch_attack
    from .data import save_image
    from .evaluation import cell_seed
    from .models import load_bundle

    if args.targeted and args.target is None:
        raise UsageError("--targeted requires --target")
    bundle = load_bundle(args.bundle)
    model = bundle.classifier(_combiner_override(bundle, args))
    ds, _ = _load(args.data, args.size)
    if args.target is not None and not 0 <= args.target < ds.n_classes:
        raise UsageError(f"--target must lie in [0, {ds.n_classes})")
    data = ds.split(args.split) if ds.splits is not None else ds
    correct = [i for i in range(len(data)) if model.predict(data.images[i]) == data.labels[i]]
    if args.targeted:
        correct = [i for i in correct if data.labels[i] != args.target]
    if args.limit is not None:
        correct = correct[:args.limit]
    base = AttackConfig(n_patches=args.patches, area=args.area, budget=args.budget, targeted=args.targeted,
                        target=args.target if args.targeted else None)
    dictionary = None
    if args.engine == "texture":
        dictionary = build_texture_dictionary(_train_split(ds), args.textures, args.seed, query_fn=model)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in correct:
        cfg = replace(base, seed=cell_seed(args.seed, bundle.kind, args.engine, i))
        if dictionary is not None:
            r = texture_patch_attack(model, data.images[i], int(data.labels[i]), dictionary, cfg)
        else:
            r = sparse_rs_patch_attack(model, data.images[i], int(data.labels[i]), cfg)
        save_image(out / "images" / f"{i:05d}_adv.png", r.image)
        save_image(out / "images" / f"{i:05d}_mask.png", np.repeat(r.mask[..., None].astype(float), 3, axis=2))
        records.append({"index": i, **r.to_json()})
    n = len(records)
    asr = (sum(r["success"] for r in records) / n) if n else None
    summary = {"bundle_kind": bundle.kind, "engine": args.engine, "config": {
        "area": args.area, "patches": args.patches, "budget": args.budget, "targeted": args.targeted,
        "target": args.target, "seed": args.seed}, "n_attacked": n, "asr": asr, "results": records}
    (out / "results.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"attacked {n} images, success rate {'n/a' if asr is None else f'{asr:.4f}'}; results in {out}")


def cmd_evaluate(args):
    from .evaluation import ExperimentConfig, run_experiment

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read --config: {exc}") from exc
    config = ExperimentConfig.from_json(text)
    report = run_experiment(config)
    report.write(args.out, figures=not args.no_figures)
    for name, a in report.accuracy.items():
        print(f"{name}: clean accuracy {a:.4f}")
    for c in report.cells:
        asr = "n/a" if c.asr is None else f"{c.asr:.4f}"
        print(f"{c.model} / {c.attack}: ASR {asr} over {c.n_attacked} images")
    for name, auc in report.localization.items():
        print(f"{name}: localization AUC {'n/a' if auc is None else f'{auc:.4f}'}")
    print(f"report written to {args.out}")


def cmd_visualize(args):
    from .backbone import extract_features
    from .data import load_image, save_image
    from .models import load_bundle
    from .plots import occlusion_overlay

    bundle = load_bundle(args.bundle)
    if bundle.compnet is None:
        raise UsageError(f"a {bundle.kind} bundle has no occlusion model; use a compnet, compnet-ft or combined bundle")
    image = load_image(args.image)
    F = extract_features(image, bundle.backbone)
    occ = bundle.compnet.score_map(F, args.label)
    geom = bundle.backbone.geometry(*image.shape[:2])
    save_image(args.out, occlusion_overlay(image, occ.score, geom))
    print(f"overlay written to {args.out} ({int(occ.occluded.sum())} occluded positions)")


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "attack": cmd_attack,
            "evaluate": cmd_evaluate, "visualize": cmd_visualize}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"compdef {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported and mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"compdef {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
