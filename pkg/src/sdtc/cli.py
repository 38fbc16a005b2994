"""Command-line entry point.

Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .losses import JOINT_NAMES
from .model import SDTCModel
from .render import overlay, pgm_bytes, ppm_bytes
from .tensor import ContractError, NumericError, faulty_adjoint
from .train import Trainer, evaluate, load_params, model_grad_check, predict

log = logging.getLogger("sdtc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRAD = 0, 2, 3, 4
CONFIG_NAME = "config.txt"
METRICS_NAME = "metrics.log"


class UsageError(Exception):
    pass


def _load_config(args, fallback: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    return config.load(path, args.set or [])


def _model_from_checkpoint(args) -> SDTCModel:
    ckpt = Path(args.checkpoint)
    cfg = _load_config(args, ckpt.parent / CONFIG_NAME)
    model = SDTCModel(cfg)
    load_params(model.ps, checkpoint.load(ckpt))
    return model


def _writable_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    n = cfg.data.num_samples if args.n is None else args.n
    if n < 0:
        raise UsageError("sample count must be non-negative")
    if n == 0:
        log.warning("writing an empty dataset (0 samples)")
    samples = generate_dataset(n, cfg.model, cfg.data)
    try:
        digest = write_dataset(samples, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"samples={n} sha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _writable_dir(args.out)
    samples = read_dataset(args.data)
    if not samples:
        raise UsageError(f"{args.data} holds no samples")
    eval_samples = read_dataset(args.eval_data) if args.eval_data else None
    (out / CONFIG_NAME).write_text(cfg.dumps(), encoding="utf-8")
    trainer = Trainer(cfg)
    mode = "w"
    if args.resume:
        trainer.load(args.resume)
        mode = "a"
        log.info("resumed from %s at step %d", args.resume, trainer.step)
    milestones = set(cfg.train.milestones)
    with open(out / METRICS_NAME, mode, encoding="utf-8") as metrics:
        def on_epoch(entry, tr):
            metrics.write(entry.format() + "\n")
            metrics.flush()
            if entry.epoch in milestones:
                tr.save(out / f"epoch_{entry.epoch:03d}.sdtc")

        trainer.fit(samples, eval_samples=eval_samples, on_epoch=on_epoch)
    trainer.save(out / "final.sdtc")
    print(f"steps={trainer.step} checkpoint={out / 'final.sdtc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _model_from_checkpoint(args)
    report = evaluate(model, read_dataset(args.data))
    sys.stdout.write(report.format())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _model_from_checkpoint(args)
    samples = read_dataset(args.data)
    out = _writable_dir(args.out)
    heatmaps, joints = predict(model, samples)
    for i in range(len(samples)):
        checkpoint.save(out / f"sample_{i:04d}.sdtc",
                        {"heatmaps": heatmaps[i], "joints": joints[i].astype(np.float32)})
    print(f"samples={len(samples)} out={out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    if args.corrupt_adjoint:
        with faulty_adjoint(args.corrupt_adjoint):
            report = model_grad_check(cfg, args.coords, args.step, args.tol)
    else:
        report = model_grad_check(cfg, args.coords, args.step, args.tol)
    sys.stdout.write(report.format())
    return EXIT_OK if report.passed else EXIT_GRAD


def _prediction_files(directory: str) -> list[Path]:
    files = sorted(Path(directory).glob("sample_*.sdtc"))
    if not files:
        raise UsageError(f"no sample_*.sdtc files in {directory}")
    return files


def cmd_render(args) -> int:
    out = _writable_dir(args.out)
    written = 0
    if args.heatmaps:
        for path in _prediction_files(args.heatmaps):
            maps = checkpoint.load(path)["heatmaps"]
            for k, hm in enumerate(maps):
                name = JOINT_NAMES[k] if k < len(JOINT_NAMES) else f"joint{k}"
                (out / f"{path.stem}_{k:02d}_{name}.pgm").write_bytes(pgm_bytes(hm))
                written += 1
    if args.data:
        samples = read_dataset(args.data)
        preds = None
        if args.pred:
            preds = [checkpoint.load(p)["joints"] for p in _prediction_files(args.pred)]
            if len(preds) != len(samples):
                raise UsageError(f"{len(preds)} predictions for {len(samples)} samples")
        for i, s in enumerate(samples):
            key = s.keyframe
            img = overlay(s.frames[key], s.joints[key], s.visible[key])
            if preds is not None:
                img = overlay(img, preds[i], np.ones(len(preds[i]), bool), color=(1.0, 0.15, 0.1))
            (out / f"sample_{i:04d}.ppm").write_bytes(ppm_bytes(img))
            written += 1
    if not (args.data or args.heatmaps):
        raise UsageError("render needs --data and/or --heatmaps")
    print(f"images={written} out={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of 'section.key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting; repeatable")

    p = argparse.ArgumentParser(prog="sdtc", description="Video pose estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, help="sample count (default: data.num_samples)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train and checkpoint a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--eval-data", help="dataset for the per-epoch accuracy (default: training set)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="print the keypoint accuracy report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="write per-sample heatmaps and joints")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the model")
    c.add_argument("--coords", type=int, default=8, help="probed coordinates per tensor")
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--corrupt-adjoint", metavar="OP", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("render", parents=[common], help="write PPM overlays or PGM heatmaps")
    r.add_argument("--data", help="dataset whose keyframes get a skeleton overlay")
    r.add_argument("--pred", help="infer output directory; adds predicted joints to overlays")
    r.add_argument("--heatmaps", help="infer output directory; one PGM per joint")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
