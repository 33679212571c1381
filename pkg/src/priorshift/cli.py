"""Command-line entry points.

Subcommands: synth (materialize a prior-shifted corpus), train (one model),
eval (score a checkpoint), ensemble (one bagged ensemble), compare (the full
benchmark). Everything is driven by an experiment config JSON plus a few
overrides, and every command is deterministic given the config's seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmark
from .benchmark import (ExperimentConfig, build_vocabs, load_data,
                        load_experiment_config, worker_count)
from .correction import METHODS, CorrectionSpec, PredictionVector
from .data import CLASSES, estimate_distribution, parse_tsv, write_tsv
from .errors import PriorShiftError
from .evaluation import evaluate, micro_f1_all_classes, report_from_vectors
from .model import EmotionClassifier


def _load_config(args) -> ExperimentConfig:
    if args.config:
        return load_experiment_config(args.config)
    return ExperimentConfig()


def _emit(payload: dict, out_path: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_synth(args) -> int:
    config = _load_config(args)
    overrides = {}
    for name in ("n_train", "n_dev", "n_test", "seed"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = load_data(config)
    counts = {}
    for name, split in zip(("train", "dev", "test"), splits):
        write_tsv(split, out / f"{name}.tsv")
        dist = estimate_distribution(split)
        counts[name] = {CLASSES[c]: int(n) for c, n in enumerate(dist.counts)}
    manifest = {"seed": config.seed, "generator": config.generator.to_json(),
                "train_priors": config.train_priors.to_json(),
                "eval_priors": config.eval_priors.to_json(),
                "class_counts": counts}
    with open(out / "synth_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    method = args.method
    if method == "threshold":
        # Thresholding never trains; the underlying model is the baseline one.
        method = "none"
    datasets = load_data(config)
    vocabs = build_vocabs(datasets[0])
    payload = benchmark._single_payload(config, method, args.run, datasets, vocabs)
    result = benchmark._train_worker(payload)
    model = EmotionClassifier(dataclasses.replace(config.model), *vocabs)
    model.load_state_arrays(result["state"])
    model.save(args.out)
    _emit({"checkpoint": str(args.out), "method": method, "run": args.run,
           "best_epoch": result["best_epoch"],
           "best_val_f1": result["best_val_f1"],
           "epochs_run": len(result["history"])}, None)
    return 0


def _parse_any_tsv(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
    return parse_tsv(path, has_label="label" in header)


def cmd_eval(args) -> int:
    config = _load_config(args)
    model = EmotionClassifier.load(args.checkpoint)
    if args.data:
        dataset = _parse_any_tsv(Path(args.data))
    else:
        datasets = load_data(config)
        dataset = datasets[{"train": 0, "dev": 1, "test": 2}[args.split]]
    correction = None
    if args.method not in (None, "none"):
        train_set, dev_set, _ = load_data(config)
        correction = CorrectionSpec(method=args.method,
                                    p_r=estimate_distribution(train_set),
                                    p_s=estimate_distribution(dev_set))
    report = evaluate(model, dataset, correction, seed=config.seed)
    payload = report.to_json()
    if args.all_classes:
        golds = np.array([c.label_index for c in dataset])
        preds = np.array([v.predicted_class for v in model.predict(dataset)])
        f1_all, _ = micro_f1_all_classes(preds, golds)
        payload["micro_f1_all_classes"] = f1_all
    _emit(payload, args.out)
    return 0


def cmd_ensemble(args) -> int:
    config = _load_config(args)
    if args.members is not None:
        config = dataclasses.replace(config, ensemble_members=args.members)
    datasets = load_data(config)
    train_set, dev_set, test_set = datasets
    vocabs = build_vocabs(train_set)
    method = "none" if args.method in (None, "none", "threshold") else args.method
    payloads = benchmark._member_payloads(config, method, datasets, vocabs)
    results = benchmark._run_jobs(payloads, worker_count(len(payloads)))
    correction = None
    if args.method not in (None, "none"):
        correction = CorrectionSpec(method=args.method,
                                    p_r=estimate_distribution(train_set),
                                    p_s=estimate_distribution(dev_set))
    mean_probs = np.mean([r["test_probs"] for r in results], axis=0)
    report = report_from_vectors([PredictionVector(row) for row in mean_probs],
                                 test_set, correction, seed=config.seed)
    payload = report.to_json()
    payload["n_members"] = config.ensemble_members
    payload["member_val_f1"] = [r["best_val_f1"] for r in results]
    _emit(payload, args.out)
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    overrides = {}
    if args.seeds is not None:
        overrides["n_seeds"] = args.seeds
    if args.members is not None:
        overrides["ensemble_members"] = args.members
    if overrides:
        config = dataclasses.replace(config, **overrides)
    result = benchmark.run_compare(config, args.out)
    summary = {
        "out_dir": str(result.out_dir),
        "single_models": [a.to_json() for a in result.single_models],
        "ensembles": [{"method": r.method, "accuracy": r.accuracy,
                       "micro_f1_emotional": r.micro_f1_emotional,
                       "tv_distance": r.tv_distance} for r in result.ensembles],
        "timings": {k: round(v, 2) for k, v in result.timings.items()},
    }
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="priorshift",
        description="Train/test class-distribution mismatch correction on a "
                    "3-turn conversation emotion classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate prior-shifted train/dev/test TSVs")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-dev", dest="n_dev", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and save its checkpoint")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--method", default="none", choices=METHODS)
    p.add_argument("--run", type=int, default=0,
                   help="run index; matches the compare command's seed derivation")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="none", choices=METHODS)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--data", help="explicit TSV to evaluate instead of a config split")
    p.add_argument("--all-classes", action="store_true",
                   help="also report 4-class micro F1")
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="train and evaluate one bagged ensemble")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--method", default="none", choices=METHODS)
    p.add_argument("--members", type=int)
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("compare", help="run the full method comparison benchmark")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seeds", type=int, help="override n_seeds")
    p.add_argument("--members", type=int, help="override ensemble_members")
    p.add_argument("--out", required=True, help="experiment directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PriorShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
