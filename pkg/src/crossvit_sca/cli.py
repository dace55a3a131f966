"""Command-line entry point: ``crossvit-sca {gen-data,train,eval,roc,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import PRESETS, format_config, parse_config
from .data import SyntheticSpec, generate_synthetic, load_dataset, split, stack, write_dataset
from .gradcheck import gradcheck_model
from .metrics import metrics_report, roc_curve, write_metrics_json, write_roc_csv
from .model import CrossViT
from .train import TrainConfig, evaluate, fit, restore

log = logging.getLogger("crossvit_sca")


def _configs(args):
    if args.config:
        return parse_config(args.config)
    return PRESETS["desk"]


def cmd_gen_data(args) -> int:
    model_cfg, _ = _configs(args)
    spec = SyntheticSpec(n_samples=args.n, image_size=model_cfg.image_size,
                         seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out, generate_synthetic(spec))
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    log_path = out / "train_log.jsonl"
    train_cfg = replace(train_cfg, checkpoint_path=str(ckpt_path), log_path=str(log_path))
    (out / "config.txt").write_text(format_config(model_cfg, train_cfg))

    _, samples = load_dataset(args.data, model_cfg.image_size)
    train_s, val_s = split(samples, train_cfg.val_fraction, train_cfg.seed)
    model = CrossViT(model_cfg)
    resume = ckpt_path if args.resume and ckpt_path.is_file() else None
    if resume is None and log_path.exists():
        log_path.unlink()
    records = fit(model, stack(train_s), stack(val_s), train_cfg, resume_from=resume)
    last = records[-1] if records else {}
    print(f"trained {len(records)} epochs; last: {json.dumps(last)}; checkpoint {ckpt_path}")
    return 0


def _evaluate_checkpoint(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, _, _ = restore(ckpt, _train_config_of(ckpt))
    _, samples = load_dataset(args.data, model.config.image_size)
    images, labels = stack(samples)
    res = evaluate(model, images, labels)
    return res, metrics_report(res.labels, res.predictions, res.scores)


def _train_config_of(ckpt):
    return TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig()


def cmd_eval(args) -> int:
    _, report = _evaluate_checkpoint(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", report)
    print(json.dumps({k: report[k] for k in ("accuracy", "recall", "precision", "f1", "auc")}))
    return 0


def cmd_roc(args) -> int:
    res, report = _evaluate_checkpoint(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", report)
    write_roc_csv(out / "roc.csv", roc_curve(res.scores, res.labels))
    print(f"auc {report['auc']}; wrote {out / 'roc.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    model_cfg, _ = _configs(args)
    seed = args.seed if args.seed is not None else 0
    model = CrossViT(replace(model_cfg, seed=seed))
    spec = SyntheticSpec(n_samples=2, image_size=model_cfg.image_size, seed=seed)
    images, labels = stack(generate_synthetic(spec))
    report = gradcheck_model(model, images, labels, coords_per_tensor=None if args.full else 48, seed=seed)
    ok = report.passed(1e-3)
    print(f"max relative error {report.max_rel_err:.3e} at {report.worst[0]}{report.worst[1]} "
          f"({report.checked} checks over {len(report.per_tensor)} tensors, {report.seconds:.1f}s) "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossvit-sca", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=False, ckpt=False):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR")
        if data:
            p.add_argument("--data", metavar="DIR", required=True)
        if ckpt:
            p.add_argument("--checkpoint", metavar="PATH", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic PGM dataset")
    common(p)
    p.add_argument("--n", type=int, default=400, metavar="N")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and checkpoint a model")
    common(p, data=True)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write metrics.json for a checkpoint on a dataset")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="like eval, plus roc.csv")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    common(p)
    p.add_argument("--full", action="store_true", help="check every coordinate (slow)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "n", 1) is not None and getattr(args, "n", 1) < 1:
        print("error: --n must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # one-line reason, nonzero exit
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
