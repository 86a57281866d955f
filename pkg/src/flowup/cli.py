"""Command-line entry point: ``flowup <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import fileio
from .checkpoint import load_checkpoint
from .errors import ConfigError
from .evaluation import bucket_report
from .gradcheck import DEFAULT_TOL, run_suite, suite_names
from .hull import representability_study
from .pipeline import MODES, _MODE_ALIASES
from .synthesis import gen_sample
from .tcu import UpsamplerConfig
from .tensor import no_grad
from .training import TrainConfig, continue_without_interpolation, save_run, train

log = logging.getLogger("flowup")

THREADS_ENV = "FLOWUP_THREADS"


def worker_count(default: Optional[int] = None) -> int:
    """Thread cap from ``FLOWUP_THREADS`` (falls back to the CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return default or os.cpu_count() or 1


def _parallel_map(fn, items: Sequence) -> list:
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size(text: str) -> tuple:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def scene_shapes(seed: int, max_shapes: int) -> int:
    """Per-scene object count, between 1 and ``max_shapes``."""
    if max_shapes <= 1:
        return max(0, max_shapes)
    return int(np.random.default_rng([seed, 99]).integers(1, max_shapes + 1))


# subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    h, w = args.size
    seeds = [args.seed * 1_000_003 + i for i in range(args.count)]
    samples = _parallel_map(lambda s: gen_sample(s, h, w, scene_shapes(s, args.shapes)), seeds)
    fileio.write_dataset(args.out, ((s.image, s.flow) for s in samples))
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(iterations=args.steps, batch_size=args.batch_size, seed=args.seed, mode=args.mode,
                      eval_every=args.eval_every,
                      upsampler=UpsamplerConfig(mask_sizes=tuple(args.mask_sizes), inject_features=args.inject_features,
                                                rel_bias=not args.no_rel_bias))
    if args.no_interp_aug:
        cfg.aug.interpolation_enabled = False
    return cfg


def cmd_train(args) -> int:
    data = fileio.read_dataset(args.data)
    cfg = _train_config(args)
    metrics = args.metrics or str(args.out) + ".metrics.csv"
    result = train(cfg, data, metrics_path=metrics)
    save_run(args.out, result, cfg, {"data_dir": str(Path(args.data).resolve())})
    print(f"saved {args.out}; final validation EPE {result.final_val_epe:.4f}; metrics in {metrics}")
    return 0


def cmd_continue(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    if "train" not in meta:
        raise ConfigError(f"{args.ckpt} carries no training configuration")
    cfg = TrainConfig.from_dict(meta["train"])
    data_dir = args.data or meta.get("data_dir")
    if not data_dir:
        raise ConfigError("checkpoint does not record its dataset; pass --data")
    out = args.out or _noaug_name(args.ckpt)
    metrics = str(out) + ".metrics.csv"
    result = continue_without_interpolation(model, cfg, fileio.read_dataset(data_dir), steps=args.steps,
                                            metrics_path=metrics)
    cont = TrainConfig.from_dict(meta["train"])
    cont.aug.interpolation_enabled = False
    save_run(out, result, cont, {"data_dir": data_dir, "continued_from": str(args.ckpt)})
    print(f"saved {out}; resize calls during continuation: {result.resize_calls}")
    return 0


def _noaug_name(ckpt) -> str:
    p = Path(ckpt)
    return str(p.with_name(p.stem + "-noaug" + p.suffix))


def cmd_upsample(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    flow_lr = fileio.flo_read(args.flow_lr)
    image = fileio.ppm_read(args.image)
    _, h, w = image.shape
    if flow_lr.shape[1:] != (h // 8, w // 8):
        raise ConfigError(f"low-resolution flow {flow_lr.shape[1:]} does not match image {h}x{w} at 1/8")
    with no_grad():
        out = model.forward(image, flow_lr).data
    fileio.flo_write(args.out, out)
    print(f"wrote {args.out} ({out.shape[1]}x{out.shape[2]})")
    return 0


def cmd_eval_detail(args) -> int:
    names = fileio.list_flo(args.gt)
    if not names:
        raise ConfigError(f"no .flo files in {args.gt}")
    missing = [n for n in names if not (Path(args.pred) / n).exists()]
    if missing:
        raise ConfigError(f"{len(missing)} predictions missing from {args.pred}, e.g. {missing[0]}")
    preds = [fileio.flo_read(Path(args.pred) / n) for n in names]
    gts = [fileio.flo_read(Path(args.gt) / n) for n in names]
    report = bucket_report(preds, gts)
    report.to_csv(args.out)
    print(report.to_text())
    return 0


def cmd_hull_study(args) -> int:
    flows = [fileio.flo_read(Path(args.data) / n) for n in fileio.list_flo(args.data)]
    if not flows:
        raise ConfigError(f"no .flo files in {args.data}")
    masks = sorted(args.masks)
    rows = _parallel_map(lambda f: representability_study(f, args.factor, masks), flows)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene"] + [f"m{m}" for m in masks])
        for i, r in enumerate(rows):
            writer.writerow([i] + [f"{r[m]:.6f}" for m in masks])
        writer.writerow(["mean"] + [f"{np.mean([r[m] for r in rows]):.6f}" for m in masks])
    for m in masks:
        print(f"m={m}: mean representable fraction {np.mean([r[m] for r in rows]):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    results = run_suite(names)
    ok = True
    for r in results:
        passed = r.passed(DEFAULT_TOL)
        ok &= passed
        print(f"{r.name:24s} max rel err {r.max_rel_error:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowup", description="Convex and attention-based flow upsampling toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(96, 96), help="HxW, multiples of 8")
    g.add_argument("--shapes", type=int, default=6, help="maximum moving objects per scene")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=list(MODES) + list(_MODE_ALIASES), default="dc-tcu")
    t.add_argument("--mask-sizes", type=_int_list, default=[9, 7, 5])
    t.add_argument("--inject-features", action="store_true")
    t.add_argument("--no-rel-bias", action="store_true", help="drop the relative position bias")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    t.add_argument("--no-interp-aug", action="store_true", help="disable resize augmentation")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("continue-noaug", help="resume training with interpolation augmentation disabled")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--steps", type=int, default=None, help="default: 40%% of the original step count")
    c.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
    c.add_argument("--out", help="output checkpoint (default: <ckpt>-noaug)")
    c.set_defaults(func=cmd_continue)

    u = sub.add_parser("upsample", help="upsample a 1/8-resolution .flo with a trained model")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--flow-lr", required=True)
    u.add_argument("--image", required=True)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upsample)

    e = sub.add_parser("eval-detail", help="detail-bucket EPE report over matching .flo files")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_detail)

    h = sub.add_parser("hull-study", help="fraction of convex-hull-representable pixels per mask size")
    h.add_argument("--data", required=True)
    h.add_argument("--masks", type=_int_list, default=[3, 5, 7, 9])
    h.add_argument("--factor", type=int, default=8)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hull_study)

    gc = sub.add_parser("gradcheck", help="64-bit finite-difference gradient checks")
    gc.add_argument("--op", choices=suite_names(), help="check a single op")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"flowup {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
