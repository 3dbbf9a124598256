"""Command-line entry point: ``prfnet <command> ...``.

Exit codes: 0 success, 1 internal failure (including failed gradient
checks), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, data
from .checkpoint import CheckpointError, CheckpointMismatch, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .model import PRFNet, score_triplet
from .trainer import STAGES, correct_mask, predict, train_stage

log = logging.getLogger("prfnet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


_INPUT_ERRORS = (InputError, ConfigError, CheckpointError, CheckpointMismatch, data.PPMError, FileNotFoundError, ValueError)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_dataset(path) -> data.TripletDataset:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    if not data.read_manifest(path):
        raise InputError(f"manifest {path} has no triplets")
    return data.TripletDataset.from_manifest(path)


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #
def cmd_synth(args) -> int:
    kinds = tuple(k for part in args.kinds for k in part.split(",") if k) if args.kinds else data.KINDS
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    manifest = data.generate_synthetic_dataset(
        args.n, out, size=args.size, image_source=args.image_source, kinds=kinds, seed=args.seed
    )
    hard = [e["hard_label"] for e in data.read_manifest(manifest)]
    print(f"wrote {len(hard)} triplets to {manifest} (fraction with B closer: {np.mean(hard):.3f})")
    return EXIT_OK


def _train_model(cfg: RunConfig, args) -> tuple[PRFNet, int]:
    tc = cfg.stage(args.stage, seed=args.seed)
    if args.resume:
        model, meta = load_checkpoint(args.resume, cfg.model)
        log.info("resumed %s (stages %s)", args.resume, ",".join(model.trained_stages) or "none")
    else:
        if args.stage == "fine":
            raise InputError("the fine stage needs --resume with a coarse-stage checkpoint")
        model = PRFNet(cfg.model, seed=tc.seed)
    if args.stage == "fine" and "coarse" not in model.trained_stages:
        raise InputError(f"checkpoint {args.resume} was not produced by a coarse stage")
    return model, tc.seed


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.data.train_manifest is None:
        raise InputError("[data] train_manifest is required for training")
    model, seed = _train_model(cfg, args)
    tc = cfg.stage(args.stage, seed=seed)
    train = _load_dataset(cfg.data.train_manifest)
    val = _load_dataset(cfg.data.val_manifest) if cfg.data.val_manifest else None
    ckdir, report = cfg.io.checkpoint_dir, cfg.io.report_dir
    ckdir.mkdir(parents=True, exist_ok=True)
    report.mkdir(parents=True, exist_ok=True)

    def on_epoch(rec, is_best):
        if is_best:
            save_checkpoint(ckdir / f"{tc.stage}_best.prfn", model, tc.stage, rec.epoch, seed)

    model, record = train_stage(model, train, tc, val=val, on_epoch=on_epoch)
    save_checkpoint(ckdir / f"{tc.stage}_final.prfn", model, tc.stage, tc.epochs - 1, seed)
    csv_path = report / f"{tc.stage}_record.csv"
    record.write_csv(csv_path)
    last = record.epochs[-1] if record.epochs else None
    summary = f"stage {tc.stage}: {len(record.epochs)} epochs"
    if last is not None:
        summary += f", final loss {last.loss:.6f}"
        if not np.isnan(last.val_accuracy):
            summary += f", val accuracy {last.val_accuracy:.4f}"
    print(f"{summary}; checkpoint {ckdir / f'{tc.stage}_final.prfn'}; record {csv_path}")
    return EXIT_OK


def _model_for_eval(args) -> PRFNet:
    cfg = load_config(args.config, check_paths=False).model if args.config else None
    model, _ = load_checkpoint(args.checkpoint, cfg)
    return model


def cmd_eval(args) -> int:
    model = _model_for_eval(args)
    ds = _load_dataset(args.manifest)
    if not ds.has_hard_labels:
        raise InputError("evaluation needs a hard label on every triplet")
    shape = ds.image_shape
    s = model.cfg.backbone.total_stride
    if shape[1] % s or shape[2] % s:
        raise InputError(f"image size {shape[1]}x{shape[2]} is not divisible by {s}")
    q = predict(model, ds)
    ok = correct_mask(q, ds.hard)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    _write_csv(out, ("q", "label", "correct"), ((f"{qi:.6f}", int(y), int(c)) for qi, y, c in zip(q, ds.hard, ok)))
    print(f"accuracy={ok.mean():.4f} n={len(ds)} report={out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    imgs = [data.load_image(p) for p in (args.ref, args.a, args.b)]
    if not (imgs[0].shape == imgs[1].shape == imgs[2].shape):
        raise InputError(f"image sizes differ: {[i.shape[1:] for i in imgs]}")
    s = model.cfg.backbone.total_stride
    _, h, w = imgs[0].shape
    if h % s or w % s:
        raise InputError(f"image size {h}x{w} is not divisible by {s}")
    q = float(score_triplet(*imgs, model))
    print(f"q={q:.6f} choice={'B' if q > 0.5 else 'A'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck

    model_cfg = load_config(args.config, check_paths=False).model if args.config else None
    rows = run_gradcheck(model_cfg, seed=args.seed, eps=args.eps, samples=args.samples, components=args.component)
    if not rows:
        raise InputError(f"no gradient check matches {args.component}")
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_baseline(args) -> int:
    ds = _load_dataset(args.manifest)
    if not ds.has_hard_labels:
        raise InputError("baseline accuracy needs a hard label on every triplet")
    if min(ds.image_shape[1:]) < baselines.WINDOW and args.metric != "psnr":
        raise InputError(f"images of {ds.image_shape[1:]} are too small for {args.metric}")
    acc, rows = baselines.baseline_accuracy((ds.triplet(i) for i in range(len(ds))), args.metric)
    out = Path(args.out) if args.out else Path(args.manifest).with_name(f"baseline_{args.metric}.csv")
    _write_csv(
        out,
        ("metric_a", "metric_b", "choice", "label", "correct"),
        ((repr(r.value_a), repr(r.value_b), r.choice, label, int(ok)) for r, label, ok in rows),
    )
    print(f"metric={args.metric} accuracy={acc:.4f} n={len(rows)} report={out}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prfnet", description="Pairwise full-reference image quality assessment.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--kinds", action="append", help="distortion kinds, comma separated (default: all)")
    s.add_argument("--image-source", choices=data.IMAGE_SOURCES, default="procedural-texture")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--resume", help="checkpoint to start from (required for the fine stage)")
    t.add_argument("--seed", type=int, help="override the configured seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="2AFC accuracy of a checkpoint on a manifest")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="per-triplet CSV (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="score one triplet")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("ref")
    i.add_argument("a")
    i.add_argument("b")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--samples", type=int, default=3, help="coordinates checked per parameter tensor")
    g.add_argument("--component", action="append", help="run only this check (repeatable)")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("baseline", help="2AFC accuracy of a classical metric")
    b.add_argument("--metric", choices=sorted(baselines.METRICS), required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", help="per-triplet CSV (default: next to the manifest)")
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit-code contract
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
