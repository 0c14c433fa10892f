"""Command-line surface: seeded training runs, gradient checks, run comparison.

Exit codes: 0 success, 1 runtime failure (message names the failing task or
run), 2 configuration problems (message names the offending field).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import continual as C
from . import data as D
from .config import ConfigError, RunConfig, config_to_dict, parse_config
from .gradcheck import run_all_checks
from .model import IncrementalModel, ModelConfig
from .seeding import stream_rng, stream_seed


def build_datasets(cfg: RunConfig, master_seed: int) -> tuple[D.Dataset, D.Dataset]:
    if cfg.dataset_type == "synthetic":
        s = cfg.synthetic
        seed = s.seed if s.seed is not None else stream_seed(master_seed, "dataset")
        noise = s.class_noise if s.class_noise is not None else (0.05,) * s.classes
        train = D.generate_synthetic(D.SyntheticSpec(
            n_classes=s.classes, samples_per_class=s.samples_per_class, side=s.side,
            channels=s.channels, class_noise=noise, seed=seed, split="train"))
        test = D.generate_synthetic(D.SyntheticSpec(
            n_classes=s.classes, samples_per_class=s.test_samples_per_class, side=s.side,
            channels=s.channels, class_noise=noise, seed=seed, split="test"))
        return train, test
    return D.load_cifar100_binary(cfg.cifar.train_path, cfg.cifar.test_path)


def build_trainer_config(cfg: RunConfig) -> C.TrainerConfig:
    t = cfg.trainer
    return C.TrainerConfig(
        alpha1=t.alpha1, alpha2=t.alpha2, learning_rate=t.learning_rate,
        momentum=t.momentum, epochs_per_task=t.epochs_per_task,
        batch_size=t.batch_size, memory_capacity=t.memory_capacity,
        memory_mode=t.memory_mode, per_class_quota=t.per_class_quota,
        uniform_weights=t.uniform_weights,
        flip_augment=cfg.cifar.horizontal_flip if cfg.cifar else False,
        loss=cfg.losses,
    )


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return 2
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(raw)
        train_set, test_set = build_datasets(cfg, args.seed)
        order_seed = (cfg.stream.class_order_seed
                      if cfg.stream.class_order_seed is not None
                      else stream_seed(args.seed, "class-order-root"))
        stream = D.split_tasks(train_set.n_classes, cfg.stream.tasks,
                               cfg.stream.base_fraction, order_seed)
        model_cfg = ModelConfig(
            image_side=train_set.side, channels=train_set.channels,
            patch_side=cfg.model.patch_side, embed_dim=cfg.model.embed_dim,
            heads=cfg.model.heads, msa_blocks=cfg.model.msa_blocks,
            tsa_blocks=cfg.model.tsa_blocks, mlp_ratio=cfg.model.mlp_ratio,
            classifier_input=cfg.model.classifier_input)
        model = IncrementalModel(model_cfg, stream.task_sizes[0],
                                 stream_rng(args.seed, "init"))
        trainer_cfg = build_trainer_config(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2

    try:
        report = C.run_stream(stream, train_set, test_set, model, trainer_cfg,
                              master_seed=args.seed, out_dir=args.out,
                              config_echo=config_to_dict(cfg))
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"run complete: avg top-1 {report.avg_incremental:.4f}, "
          f"fh {report.fh:.6f}; reports in {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all_checks()
    width = max(len(r.name) for r in results)
    offenders = []
    for r in results:
        ok = r.rel_err < args.tolerance
        print(f"{r.name:<{width}}  {r.rel_err:12.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            offenders.append(r.name)
    if offenders:
        print(f"exceeded tolerance {args.tolerance:g}: {', '.join(offenders)}",
              file=sys.stderr)
        return 1
    print(f"all {len(results)} checks within tolerance {args.tolerance:g}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for run_dir in args.runs:
        summary_path = Path(run_dir) / "summary.json"
        try:
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
            rows.append((Path(run_dir).name,
                         float(summary["avg_incremental_acc"]),
                         float(summary["fh"])))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"error: cannot read run {run_dir}: {exc}", file=sys.stderr)
            return 1
    rows.sort(key=lambda r: -r[1])
    name_width = max(len(r[0]) for r in rows)
    print(f"{'variant':<{name_width}}  {'avg_acc':>10}  {'fh':>12}")
    for name, acc, fh in rows:
        print(f"{name:<{name_width}}  {acc:>10.4f}  {fh:>12.6f}")
    with open(args.out, "w", newline="") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["variant", "avg_acc", "fh"])
        for name, acc, fh in rows:
            writer.writerow([name, repr(acc), repr(fh)])
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfclab",
                                     description="class-incremental learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a seeded incremental training stream")
    p_train.add_argument("--config", required=True, help="path to run config JSON")
    p_train.add_argument("--out", required=True, help="output directory for reports")
    p_train.add_argument("--seed", type=int, default=0, help="master seed")
    p_train.set_defaults(func=cmd_train)

    p_check = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p_check.add_argument("--tolerance", type=float, default=1e-4)
    p_check.set_defaults(func=cmd_gradcheck)

    p_cmp = sub.add_parser("compare", help="tabulate finished runs")
    p_cmp.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p_cmp.add_argument("--out", default="comparison.csv", help="comparison CSV path")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
