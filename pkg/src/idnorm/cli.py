"""Command-line entry point: ``idnorm <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .classifier import VARIANTS, ClassifierModel
from .diffcore import make_rng
from .errors import IdnormError
from .experiment import (PIPELINES, ExperimentConfig, MetricsReport, ablate, build_data,
                         build_streams, evaluate, load_normalizer, pretrain_normalizer, report,
                         run_comparison, run_experiment, run_seed)
from .gradsuite import run_suite
from .io import load_checkpoint, output_root, read_config, write_config
from .synthdata import save_jsonl
from .tasks import TASK_KINDS

log = logging.getLogger("idnorm")


def load_config(args):
    flat = read_config(args.config) if args.config else {}
    config = ExperimentConfig.from_flat(flat)
    if getattr(args, "task", None):
        config = replace(config, task=args.task)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seeds=(args.seed,))
    variant = getattr(args, "variant", None)
    if variant and variant != "all":
        if variant in PIPELINES:
            config = replace(config, pipeline=variant)
        else:
            config = replace(config, model_variant=variant)
    return config


def cmd_gradcheck(args):
    first = args.seed or 0
    results, seconds = run_suite(seeds=range(first, first + 5))
    for r in results:
        print(f"{r.name:<26} seed {r.seed}  {r.report}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    return 1 if failed else 0


def cmd_gen_data(args):
    config = load_config(args)
    out = output_root(args.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for seed in config.seeds:
        train, test, _ = build_data(config, seed)
        meta = {"seed": seed, "config_hash": config.hash}
        save_jsonl(out / f"{config.task}_seed{seed}_train.jsonl", train, {**meta, "split": "train"})
        save_jsonl(out / f"{config.task}_seed{seed}_test.jsonl", test, {**meta, "split": "test"})
        print(f"seed {seed}: {len(train)} train / {len(test)} test records -> {out}")
    return 0


def cmd_train_normalizer(args):
    config = replace(load_config(args), pipeline="idn-trained")
    root = output_root(args.out)
    for seed in config.seeds:
        out = root / "normalizer" / f"seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        write_config(out / "config.txt", config.to_flat())
        pretrain_normalizer(config, seed, out)
        print(f"seed {seed}: checkpoint and loss curves in {out}")
    return 0


def cmd_train_classifier(args):
    config = load_config(args)
    root = output_root(args.out)
    if args.variant == "all":
        reports = run_comparison(config, out_root=root)
        flat = [r for rs in reports.values() for r in rs]
    elif config.pipeline == "idn-trained" and args.normalizer:
        normalizer, _ = load_normalizer(args.normalizer)
        flat = [run_seed(config, s, root, normalizer) for s in config.seeds]
    else:
        flat = run_experiment(config, root)
    for r in flat:
        print(f"{r.pipeline}/{r.model_variant} seed {r.seed}: {r.headline} = {r.score:.4f}")
    return 0


def cmd_eval(args):
    """Re-evaluate saved classifier checkpoints on their regenerated test split."""
    status = 0
    for run in args.runs:
        run = Path(run)
        state, doc = load_checkpoint(run / "classifier.json", kind="classifier")
        config = ExperimentConfig.from_flat(doc["config"])
        seed = doc["seed"]
        model = ClassifierModel(config.classifier_config, config.task_spec, make_rng(0, "eval"))
        model.load_state_dict(state)
        train, test, target = build_data(config, seed)
        normalizer = None
        if config.pipeline == "idn-trained":
            normalizer, _ = load_normalizer(run / "normalizer.json")
        _, test_s = build_streams(config, train, test, target, normalizer)
        rep, _ = evaluate(config, seed, model, test_s)
        saved = run / "metrics.json"
        line = f"{run}: {rep.headline} = {rep.score:.4f}"
        if saved.exists():
            same = MetricsReport.from_json(saved.read_text()).aggregate == rep.aggregate
            line += "  (matches saved report)" if same else "  (DIFFERS from saved report)"
            status |= 0 if same else 1
        print(line)
    return status


def cmd_ablate(args):
    config = load_config(args)
    root = output_root(args.out)
    variants = VARIANTS if args.variant in (None, "all") else [config.model_variant]
    dirs = []
    for v in variants:
        for r in ablate(v, config, root):
            print(f"{v} seed {r.seed}: {r.headline} = {r.score:.4f}")
        dirs.append(root / f"{config.task}__{config.pipeline}__{v.replace('=', '')}")
    text, _ = report(dirs, root / f"ablation_{config.task}")
    print(text, end="")
    return 0


def cmd_report(args):
    runs = args.runs or [output_root(args.out)]
    text, _ = report(runs, args.out)
    print(text, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="idnorm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, task=True, variant=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="output root (default: $IDNORM_OUT or ./runs)")
        if task:
            p.add_argument("--task", choices=TASK_KINDS)
        if variant:
            p.add_argument("--variant", help=f"pipeline {PIPELINES}, model variant {VARIANTS} "
                                             "or 'all'")
        return p

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seed", type=int, help="first of five seeds")
    p.set_defaults(func=cmd_gradcheck)
    common(sub.add_parser("gen-data", help="write train/test JSON-lines datasets"),
           variant=False).set_defaults(func=cmd_gen_data)
    common(sub.add_parser("train-normalizer", help="pre-train the identity normalizer"),
           variant=False).set_defaults(func=cmd_train_normalizer)
    p = common(sub.add_parser("train-classifier", help="train and evaluate classifiers"))
    p.add_argument("--normalizer", help="normalizer checkpoint to reuse for idn-trained")
    p.set_defaults(func=cmd_train_classifier)
    p = sub.add_parser("eval", help="re-evaluate saved classifier checkpoints")
    p.add_argument("runs", nargs="+", help="run directories holding classifier.json")
    p.set_defaults(func=cmd_eval)
    common(sub.add_parser("ablate", help="MoE ablation over classifier variants")) \
        .set_defaults(func=cmd_ablate)
    p = sub.add_parser("report", help="comparison table over finished runs")
    p.add_argument("runs", nargs="*", help="run directories or parents of them")
    p.add_argument("--out", help="also write report.txt / report.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IdnormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
