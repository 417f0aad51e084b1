"""Command-line entry point: ``steerer <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt corpus, image, annotation or checkpoint), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from steerer.checkpoint import CheckpointError, load_checkpoint
from steerer.config import ConfigError, RunConfig, format_config, load_config, set_key
from steerer.density import AnnotationError, format_annotations, gt_pyramid
from steerer.gradcheck import run_gradcheck
from steerer.harness import (CHECKPOINT_NAME, NumericError, evaluate, forward_levels, generate_data, localize,
                             pad_image, pad_multiple, predict_density, routing_report, train)
from steerer.serialize import FormatError
from steerer.steering import build_masks, pwsp_select
from steerer.synth import CorpusError, load_split, read_corpus, read_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("steerer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output path (meaning depends on the command)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="steerer", description="Scale-selective counting on synthetic multi-scale scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus (--out overrides data.root)")
    sub.add_parser("train", parents=[common], help="train; writes <out>/" + CHECKPOINT_NAME)
    e = sub.add_parser("eval", parents=[common], help="counting and localization metrics for a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    for name, text in (("predict", "level-0 density map for one image (.npy to --out)"),
                       ("localize", "point list for one image (x y lines to --out)")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--ckpt", required=True)
        q.add_argument("image", help="8-bit PGM or .npy image in [0, 1]")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    g.add_argument("--trials", type=int, default=100)
    d = sub.add_parser("diagnose-masks", parents=[common], help="PWSP labels and masks per scene")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--split", default="val")
    d.add_argument("--limit", type=int, default=4, help="scenes to dump in full")
    return p


def _config(args, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if args.config:
        loaded = load_config(args.config)
        if base is None:
            cfg = loaded
        else:
            # a checkpoint fixes the model; a config file may still move data and localization
            cfg.data, cfg.localize = loaded.data, loaded.localize
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        set_key(cfg, key.strip(), val.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.verbose = cfg.verbose or args.verbose
    cfg.validate()
    return cfg


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        try:
            img = np.load(p)
        except (OSError, ValueError) as exc:
            raise CorpusError(f"cannot read image {p}: {exc}") from exc
        if img.ndim != 2:
            raise CorpusError(f"{p}: expected a 2-D image, got shape {img.shape}")
        return img.astype(np.float64)
    return read_pgm(p).astype(np.float64) / 255.0


def _checkpoint(args):
    ckpt = load_checkpoint(args.ckpt)
    return ckpt, _config(args, ckpt.config)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.data.root = args.out
    manifest = generate_data(cfg)
    print(f"wrote {len(manifest.entries)} scenes to {cfg.data.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.out = args.out
    ckpt = train(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    last = ckpt.history[-1] if ckpt.history else {}
    print(json.dumps({"checkpoint": str(Path(cfg.out) / CHECKPOINT_NAME), "last_epoch": last}, default=float))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, cfg = _checkpoint(args)
    ckpt.config = cfg
    rep = evaluate(cfg, ckpt, args.split)
    rep.pop("counts", None)
    _emit(rep, args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, cfg = _checkpoint(args)
    img = _read_image(args.image)
    d = predict_density(ckpt.model, img, cfg)
    if args.out:
        np.save(args.out, d)
    print(json.dumps({"image": args.image, "count": float(d.sum()), "shape": list(d.shape)}))
    return EXIT_OK


def cmd_localize(args) -> int:
    ckpt, cfg = _checkpoint(args)
    img = _read_image(args.image)
    pts = localize(predict_density(ckpt.model, img, cfg), cfg)
    text = format_annotations(pts)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=0 if args.seed is None else args.seed, trials=args.trials)
    text = report.format()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_diagnose_masks(args) -> int:
    ckpt, cfg = _checkpoint(args)
    if cfg.model.fusion_mode != "steerer":
        raise ConfigError(f"diagnose-masks needs a steerer-mode checkpoint, got {cfg.model.fusion_mode!r}")
    manifest = read_corpus(cfg.data.root)
    scenes = load_split(cfg.data.root, manifest, args.split)
    entries = manifest.split(args.split)
    dumps = []
    for entry, (img, pts) in list(zip(entries, scenes))[:max(args.limit, 0)]:
        padded = pad_image(img, pad_multiple(cfg))
        preds = forward_levels(ckpt.model, padded, cfg)
        gts = [g.grid for g in gt_pyramid(pts, padded.shape, cfg.model.levels, cfg.density.sigma0)]
        grid = pwsp_select(gts, preds, cfg.loss.patch_px, cfg.loss.eps)
        masks = build_masks(grid, [g.shape for g in gts])
        dumps.append({"image": entry.image, "labels": grid.labels.tolist(),
                      "inherited": [m.astype(int).tolist() for m in masks.inherited]})
    report = {"split": args.split, "scenes": dumps}
    if scenes and all(p.radii is not None for _, p in scenes):
        report["routing"] = routing_report(ckpt.model, scenes, cfg)
    _emit(report, args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "localize": cmd_localize, "gradcheck": cmd_gradcheck, "diagnose-masks": cmd_diagnose_masks,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, AnnotationError, CheckpointError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
