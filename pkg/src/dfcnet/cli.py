"""Command-line entry point: synth, train, eval, predict, inspect, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import backbone as B
from . import checkpoint as C
from . import config as CFG
from . import data as D
from . import gradcheck as G
from . import inference as I
from . import model as M
from . import synth as S
from . import tensor as T
from . import train as TR

log = logging.getLogger("dfcnet")


class ValidationError(ValueError):
    pass


VALIDATION_ERRORS = (ValidationError, CFG.ConfigError, B.SpecError, M.ModelError, D.DataError)


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    # never more threads than cores: oversubscribed BLAS threads spin-wait
    return threadpool_limits(limits=max(1, min(int(n), os.cpu_count() or 1)))


def _parse_scales(text):
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"--scales expects comma-separated numbers, got {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise ValidationError("--scales must be a non-empty list of positive numbers")
    return scales


def _config(args, extra=None):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    overrides = CFG.deep_merge(overrides, extra or {})
    return CFG.load_config(args.config, overrides)


FUSION_RULE = "uniform mean of softmax probabilities over scales and checkpoints"


def _load_models(cfg, paths):
    if not paths:
        raise ValidationError("at least one --ckpt is required")
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ValidationError(f"checkpoint not found: {', '.join(missing)}")
    return [TR.model_from_checkpoint(cfg, p) for p in paths]


def _prepare_image(cfg, path):
    image = D.read_image(path).transpose(2, 0, 1).astype(np.float32) / 255.0
    return D.normalize_image(image, cfg["data"]["mean"], cfg["data"]["std"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    extra = {"synth": {}}
    if args.num_images is not None:
        extra["synth"]["num_images"] = args.num_images
    cfg = _config(args, extra)
    out = Path(args.out or cfg["data"]["root"])
    s = cfg["synth"]
    scfg = S.SyntheticConfig(num_images=s["num_images"], image_size=s["image_size"], num_classes=s["num_classes"],
                             cells=tuple(s["cells"]), road_density=s["road_density"], seed=cfg["seed"])
    CFG.materialize(cfg, out)
    summary = S.synth_generate(scfg, out, CFG.palette_from(cfg) if cfg["data"]["palette"] else None)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"land images: {summary['land_images']}  road images: {summary['road_images']}")
    for name, share in summary["class_share"].items():
        print(f"  {name:<12s} {share:.4f}")
    print(f"  {'road':<12s} {summary['road_share']:.4f}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = Path(cfg["out"])
    CFG.materialize(cfg, out)
    with _threads(cfg["threads"]):
        result = TR.train(cfg, out, resume=args.resume)
    last = result.records[-1] if result.records else {}
    print(f"finished at iteration {last.get('iter')} ; checkpoints: {[str(p) for p in result.checkpoints]}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    scales = _parse_scales(args.scales) if args.scales else cfg["inference"]["scales"]
    out = Path(cfg["out"])
    CFG.materialize(cfg, out)
    palette = CFG.palette_from(cfg)
    records = D.list_records(cfg["data"]["root"], "land")
    if cfg["data"]["eval_count"] > 0:
        _, records = D.split_records(records, cfg["data"]["eval_count"], cfg["seed"])
    if not records:
        raise ValidationError(f"no land records to evaluate under {cfg['data']['root']}")
    models = _load_models(cfg, args.ckpt)
    inf = cfg["inference"]
    log.info("multi-scale fusion: %s; scales %s", FUSION_RULE, scales)
    with _threads(cfg["threads"]):
        cm = TR.evaluate(models[0], records, palette, scales, inf["tile"], inf["overlap"],
                         (cfg["data"]["mean"], cfg["data"]["std"]), models=models)
    iou = cm.iou()
    report = {
        "checkpoints": [str(p) for p in args.ckpt],
        "scales": scales,
        "fusion": FUSION_RULE,
        "images": len(records),
        "classes": [{"name": n, "iou": None if np.isnan(v) else float(v)} for n, v in zip(palette.class_names, iou)],
        "miou": cm.miou(),
        "pixel_accuracy": cm.pixel_accuracy(),
    }
    with open(out / "eval_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    for row in report["classes"]:
        v = "n/a" if row["iou"] is None else f"{row['iou']:.4f}"
        print(f"{row['name']:<12s} {v}")
    print(f"{'mIoU':<12s} {report['miou']:.4f}")
    return 0


def cmd_predict(args):
    cfg = _config(args)
    inf = cfg["inference"]
    scales = _parse_scales(args.scales) if args.scales else inf["scales"]
    out = Path(cfg["out"])
    CFG.materialize(cfg, out)
    palette = CFG.palette_from(cfg)
    models = _load_models(cfg, args.ckpt)
    image = _prepare_image(cfg, args.image)
    log.info("multi-scale fusion: %s; scales %s", FUSION_RULE, scales)
    with _threads(cfg["threads"]):
        probs = I.ensemble_fuse(models, image, scales, inf["tile"], inf["overlap"])
    pred = probs.argmax(axis=0).astype(np.uint8)
    stem = Path(args.image).stem
    D.save_gray(out / f"{stem}_index.png", pred)
    D.save_rgb(out / f"{stem}_color.png", palette.encode(pred))
    print(f"wrote {out / (stem + '_index.png')} and {out / (stem + '_color.png')}")
    return 0


def feature_to_gray(channel):
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.full(channel.shape, 128, dtype=np.uint8)
    return np.round((channel - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_inspect(args):
    cfg = _config(args)
    out = Path(cfg["out"])
    CFG.materialize(cfg, out)
    (net,) = _load_models(cfg, [args.ckpt])
    image = _prepare_image(cfg, args.image)
    f = net.input_factor
    _, h, w = image.shape
    ph, pw = -(-h // f) * f, -(-w // f) * f
    image = np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    with T.no_grad():
        output = net.forward(image[None], training=False, keep_features=True)
    feats = output.features.data[0]
    fdir = out / "features"
    for c in range(feats.shape[0]):
        D.save_gray(fdir / f"channel_{c:03d}.png", feature_to_gray(feats[c]))
    print(f"wrote {feats.shape[0]} feature maps of size {feats.shape[1]}x{feats.shape[2]} to {fdir}")
    return 0


def cmd_gradcheck(args):
    try:
        reports = G.run_suite(args.op, double=not args.f32, seed=args.seed or 0)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from None
    failed = 0
    print(f"{'operator':<24s} {'max rel err':>12s} {'tol':>8s} {'checked':>8s} {'excluded':>8s}  result")
    for r in reports:
        print(f"{r.op:<24s} {r.max_rel_error:12.3e} {r.tolerance:8.0e} {r.checked:8d} {r.excluded:8d}  "
              f"{'pass' if r.passed else 'FAIL'}")
        failed += not r.passed
    return 2 if failed else 0


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--threads", type=int, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dfcnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic land/road dataset")
    s.add_argument("--num-images", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="per-class IoU and mIoU on the evaluation split")
    s.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeat to ensemble)")
    s.add_argument("--scales", help="comma-separated inference scales")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="write index and colour masks for an image")
    s.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeat to ensemble)")
    s.add_argument("--image", required=True)
    s.add_argument("--scales", help="comma-separated inference scales")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("inspect", parents=[common], help="dump the deepest shared feature map as PNGs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    s.add_argument("--op", action="append", help="restrict to one operator (repeatable)")
    s.add_argument("--f32", action="store_true", help="check in float32 at the looser tolerance")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"dfcnet {args.command}: validation error: {exc}", file=sys.stderr)
        return 1
    except (C.CheckpointError, TR.TrainError, OSError, RuntimeError, ValueError) as exc:
        print(f"dfcnet {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
