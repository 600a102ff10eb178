"""Command line entry point: ``grabdae {synth,segment,train,eval,embed}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, parse_config
from .data import (
    CheckpointError,
    EmptyDatasetError,
    FormatError,
    SynthSpec,
    load_checkpoint,
    load_dataset,
    read_ppm,
    synth_generate,
    write_mask,
    write_ppm,
)
from .grabmask import GrabMaskParams, apply_mask_blur, grabcut_segment, scaled_blur_sigma
from .train import embed, evaluate, train

log = logging.getLogger("grabdae")


def _is_labeled(root: Path) -> bool:
    return any(p.is_dir() for p in root.iterdir())


def cmd_synth(args) -> int:
    spec = parse_config(args.config, "synth") if args.config else SynthSpec()
    overrides = {}
    if args.per_class is not None:
        overrides["per_class"] = args.per_class
    if args.side is not None:
        overrides["side"] = args.side
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    src, tgt = synth_generate(spec, args.out)
    print(f"source: {src}\ntarget: {tgt}")
    return 0


def cmd_segment(args) -> int:
    img = read_ppm(args.input)
    side = min(img.shape[:2])
    params = GrabMaskParams(K=args.components, gamma=args.gamma, outer_iters=args.iters,
                            seed_frac=args.seed_frac, blur_sigma=scaled_blur_sigma(side))
    res = grabcut_segment(img, None, params, seed=args.seed or 0)
    write_mask(args.out_mask, res.mask)
    if res.fallback:
        log.warning("segmentation fell back to the seed rectangle: %s", res.reason)
    if args.apply_blur:
        write_ppm(args.apply_blur, apply_mask_blur(img, res.mask, params.blur_sigma))
    print(f"foreground pixels: {int(res.mask.sum())}/{res.mask.size}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, "train") if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    source = load_dataset(args.source, labeled=True, domain="source")
    target_root = Path(args.target)
    target = load_dataset(target_root, labeled=_is_labeled(target_root), domain="target")
    result = train(cfg, source, target, args.run, threads=args.threads)
    last = result.history[-1] if result.history else None
    if last is not None and last["target_avg_acc"] is not None:
        print(f"final target accuracy: {last['target_avg_acc']:.2f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _load_student(path):
    student, _teacher, meta = load_checkpoint(path)
    return student, meta


def cmd_eval(args) -> int:
    student, meta = _load_student(args.checkpoint)
    data = load_dataset(args.data, labeled=True, domain=args.domain)
    names = meta.get("class_names")
    if names is not None and list(names) != data.class_names:
        raise ValueError(f"dataset classes {data.class_names} differ from checkpoint classes {names}")
    report = evaluate(student, data.load_images(), data.labels, data.class_names)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count", "accuracy"])
        for name, n, acc in zip(report.class_names, report.counts, report.per_class):
            w.writerow([name, n, "" if acc is None else repr(acc)])
        w.writerow(["average", sum(report.counts), repr(report.average)])
    print(f"average accuracy: {report.average:.2f}")
    return 0


def cmd_embed(args) -> int:
    student, _ = _load_student(args.checkpoint)
    root = Path(args.data)
    data = load_dataset(root, labeled=_is_labeled(root), domain=args.domain)
    feats = embed(student, data.load_images())
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["domain", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for s, row in zip(data.samples, feats):
            w.writerow([s.domain, -1 if s.label is None else s.label] + [repr(float(v)) for v in row])
    print(f"wrote {len(feats)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grabdae", description=__doc__)
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for GrabMask precomputation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render the synthetic two-domain benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON SynthSpec overrides")
    p.add_argument("--per-class", type=int)
    p.add_argument("--side", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="GrabMask one PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--apply-blur", metavar="PPM", help="also write the background-blurred image here")
    p.add_argument("--gamma", type=float, default=50.0)
    p.add_argument("--components", type=int, default=5)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed-frac", type=float, default=0.6)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train student/teacher on source + target directories")
    p.add_argument("--config")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class accuracy of a checkpoint on a labelled directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export extractor features as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(func=cmd_embed)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, CheckpointError, EmptyDatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
