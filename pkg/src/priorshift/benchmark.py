"""The comparison benchmark: every correction method, single and ensemble.

One invocation materializes (or loads) a prior-shifted corpus, trains
baseline / oversample / undersample / cost-sensitive models over several
seeds plus 10-member bagged ensembles, scores thresholding on the already
trained baseline models, and writes the tables, distribution gap data,
figures, manifest and best checkpoints into one experiment directory.

Training jobs are independent and run in a process pool; PRIORSHIFT_THREADS
caps the worker count. Every job is seeded by derivation from the experiment
seed, so results do not depend on scheduling order and reruns are
byte-identical in all CSV outputs.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .correction import CorrectionSpec, PredictionVector, make_bags, threshold_adjust
from .data import (CLASSES, ClassDistribution, Conversation, GeneratorConfig,
                   Vocabulary, build_world, char_token_iter, estimate_distribution,
                   generate_split, parse_tsv, word_token_iter, write_tsv)
from .errors import ConfigError, ContractError
from .evaluation import (AggregateReport, EvalReport, aggregate_reports,
                         micro_f1_emotional, report_from_vectors)
from .model import EmotionClassifier, ModelConfig
from .reporting import (plot_distributions, plot_f1_comparison, plot_history,
                        write_distributions_csv, write_eval_reports_csv,
                        write_history_csv, write_single_models_csv, write_ensembles_csv)
from .seeding import derive_seed
from .training import TrainConfig, train

# Methods that need their own training runs; thresholding reuses the
# baseline models and differs only at inference.
TRAINED_METHODS = ("none", "oversample", "undersample", "cost_sensitive")
REPORT_ORDER = ("baseline", "oversample", "undersample", "threshold", "cost_sensitive")
DIST_KEY = {"baseline": "baseline", "oversample": "oversample",
            "undersample": "undersample", "threshold": "threshold",
            "cost_sensitive": "cost"}


def _default_train_priors() -> ClassDistribution:
    return ClassDistribution.from_probs([1 / 6, 1 / 6, 1 / 6, 0.5])


def _default_eval_priors() -> ClassDistribution:
    return ClassDistribution.from_probs([0.05, 0.05, 0.05, 0.85])


@dataclass
class ExperimentConfig:
    """Everything one benchmark invocation needs, JSON round-trippable."""

    # Benchmark recipe: a corpus ambiguous enough that priors matter (higher
    # noise and template overlap than the generator defaults), and a fixed
    # 18-epoch budget with best-epoch selection on dev. With early stopping or
    # fewer epochs the cost-sensitive runs are cut off mid-climb; their
    # effective objective matches oversampling but sees 3.3x fewer steps.
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(
        noise_rate=0.40, template_overlap=0.65))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        max_epochs=18, patience=0, batch_size=32))
    n_train: int = 600
    n_dev: int = 400
    n_test: int = 600
    train_priors: ClassDistribution = field(default_factory=_default_train_priors)
    eval_priors: ClassDistribution = field(default_factory=_default_eval_priors)
    n_seeds: int = 10
    ensemble_members: int = 10
    seed: int = 0
    data_dir: str | None = None

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.ensemble_members < 1:
            raise ConfigError("ensemble_members must be >= 1")
        if min(self.n_train, self.n_dev, self.n_test) < len(CLASSES):
            raise ConfigError("each split needs at least one example per class")

    def to_json(self) -> dict:
        return {
            "generator": self.generator.to_json(),
            "model": self.model.to_json(),
            "train": self.train.to_json(),
            "n_train": self.n_train,
            "n_dev": self.n_dev,
            "n_test": self.n_test,
            "train_priors": self.train_priors.to_json(),
            "eval_priors": self.eval_priors.to_json(),
            "n_seeds": self.n_seeds,
            "ensemble_members": self.ensemble_members,
            "seed": self.seed,
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentConfig":
        kwargs = dict(payload)
        if "generator" in kwargs:
            kwargs["generator"] = GeneratorConfig.from_json(kwargs["generator"])
        if "model" in kwargs:
            kwargs["model"] = ModelConfig.from_json(kwargs["model"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig.from_json(kwargs["train"])
        for key in ("train_priors", "eval_priors"):
            if key in kwargs:
                kwargs[key] = ClassDistribution.from_probs(kwargs[key])
        return cls(**kwargs)


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_json(json.load(fh))


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("PRIORSHIFT_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


# ---------------------------------------------------------------------------
# Data and vocabularies
# ---------------------------------------------------------------------------

def load_data(config: ExperimentConfig) -> tuple[list[Conversation], list[Conversation],
                                                 list[Conversation]]:
    """Parse the three splits from data_dir, or synthesize them."""
    if config.data_dir is not None:
        base = Path(config.data_dir)
        paths = {name: base / f"{name}.tsv" for name in ("train", "dev", "test")}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise ConfigError(f"data_dir is missing {missing}")
        return tuple(parse_tsv(paths[name]) for name in ("train", "dev", "test"))
    world = build_world(config.generator, config.seed)
    train_set = generate_split(world, config.generator, config.n_train,
                               config.train_priors, config.seed, "train")
    dev_set = generate_split(world, config.generator, config.n_dev,
                             config.eval_priors, config.seed, "dev")
    test_set = generate_split(world, config.generator, config.n_test,
                              config.eval_priors, config.seed, "test")
    return train_set, dev_set, test_set


def build_vocabs(train_set: list[Conversation]) -> tuple[Vocabulary, Vocabulary]:
    return (Vocabulary.build(word_token_iter(train_set)),
            Vocabulary.build(char_token_iter(train_set)))


# ---------------------------------------------------------------------------
# Training jobs
# ---------------------------------------------------------------------------

def single_seeds(base_seed: int, method: str, run: int) -> dict[str, int]:
    """Seed bundle for one single-model run; shared with the train command so
    a lone training reproduces the benchmark's run bit for bit."""
    return {name: derive_seed(base_seed, "single", method, run, name)
            for name in ("init", "train", "resample")}


def member_seeds(base_seed: int, method: str, member: int) -> dict[str, int]:
    return {name: derive_seed(base_seed, "ensemble", method, member, name)
            for name in ("init", "train")}


def _correction_for(method: str, p_r: ClassDistribution, p_s: ClassDistribution,
                    resample_seed: int) -> CorrectionSpec | None:
    if method == "none":
        return None
    return CorrectionSpec(method=method, p_r=p_r, p_s=p_s, seed=resample_seed)


def _train_worker(payload: dict) -> dict:
    """Train one model and score it on dev and test. Runs in a worker process;
    everything needed arrives in the payload and everything produced returns
    as plain arrays."""
    word_vocab = Vocabulary.from_json(payload["word_vocab"])
    char_vocab = Vocabulary.from_json(payload["char_vocab"])
    model = EmotionClassifier(payload["model_config"], word_vocab, char_vocab,
                              seed=payload["init_seed"])
    result = train(model, payload["train_set"], payload["dev_set"],
                   payload["train_config"], payload["correction"])
    out = {
        "tag": payload["tag"],
        "history": result.history,
        "best_epoch": result.best_epoch,
        "best_val_f1": result.best_val_f1,
        "test_probs": model.predict_proba(payload["test_set"], batch_size=256),
    }
    if payload.get("need_dev_probs", True):
        out["dev_probs"] = model.predict_proba(payload["dev_set"], batch_size=256)
    if payload["return_state"]:
        out["state"] = model.state_arrays()
    return out


def _single_payload(config: ExperimentConfig, method: str, run: int,
                    datasets, vocabs) -> dict:
    train_set, dev_set, test_set = datasets
    word_vocab, char_vocab = vocabs
    p_r = estimate_distribution(train_set)
    p_s = estimate_distribution(dev_set)
    seeds = single_seeds(config.seed, method, run)
    return {
        "tag": ("single", method, run),
        "train_set": train_set,
        "dev_set": dev_set,
        "test_set": test_set,
        "word_vocab": word_vocab.to_json(),
        "char_vocab": char_vocab.to_json(),
        "model_config": config.model,
        "train_config": dataclasses.replace(config.train, seed=seeds["train"]),
        "correction": _correction_for(method, p_r, p_s, seeds["resample"]),
        "init_seed": seeds["init"],
        # Only ensemble members need dev posteriors (for mixed-ensemble
        # member ranking); skipping them here keeps single runs leaner.
        "need_dev_probs": False,
        "return_state": True,
    }


def _member_payloads(config: ExperimentConfig, method: str, datasets, vocabs) -> list[dict]:
    """Bootstrap bags plus per-member training configs for one ensemble.

    Sampling corrections are applied to the bags here; cost-sensitive members
    carry their correction into the loss; baseline members train plain.
    """
    train_set, dev_set, test_set = datasets
    word_vocab, char_vocab = vocabs
    p_r = estimate_distribution(train_set)
    p_s = estimate_distribution(dev_set)
    bag_correction = CorrectionSpec(method=method, p_r=p_r, p_s=p_s, seed=0) \
        if method != "none" else CorrectionSpec(method="none", p_r=p_r, p_s=p_s)
    bags = make_bags(train_set, config.ensemble_members, bag_correction,
                     derive_seed(config.seed, "ensemble", method, "bags"))
    member_correction = bag_correction if method == "cost_sensitive" else None
    payloads = []
    for m, bag in enumerate(bags):
        seeds = member_seeds(config.seed, method, m)
        payloads.append({
            "tag": ("member", method, m),
            "train_set": bag,
            "dev_set": dev_set,
            "test_set": test_set,
            "word_vocab": word_vocab.to_json(),
            "char_vocab": char_vocab.to_json(),
            "model_config": config.model,
            "train_config": dataclasses.replace(config.train, seed=seeds["train"]),
            "correction": member_correction,
            "init_seed": seeds["init"],
            "return_state": False,
        })
    return payloads


def _run_jobs(payloads: list[dict], max_workers: int) -> list[dict]:
    if max_workers <= 1 or len(payloads) <= 1:
        return [_train_worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_train_worker, payloads))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _vectors(probs: np.ndarray) -> list[PredictionVector]:
    return [PredictionVector(row) for row in probs]


@dataclass
class CompareResult:
    out_dir: Path
    single_models: list[AggregateReport]
    ensembles: list[EvalReport]
    single_reports: dict[str, list[EvalReport]]
    distributions: dict[str, ClassDistribution]
    actual_distribution: ClassDistribution
    manifest: dict
    # Wall-clock seconds per phase: single_runs covers data generation
    # through the per-seed method tables; ensemble_runs the bagged members
    # and their reports; reporting the file outputs. Kept off the manifest
    # so reruns stay byte-comparable.
    timings: dict[str, float] = field(default_factory=dict)


def run_compare(config: ExperimentConfig, out_dir) -> CompareResult:
    started = time.perf_counter()
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)

    datasets = load_data(config)
    train_set, dev_set, test_set = datasets
    for name, split in zip(("train", "dev", "test"), datasets):
        write_tsv(split, out / "data" / f"{name}.tsv")
    vocabs = build_vocabs(train_set)
    p_r = estimate_distribution(train_set)
    p_s = estimate_distribution(dev_set)
    threshold_spec = CorrectionSpec(method="threshold", p_r=p_r, p_s=p_s)

    single_payloads = []
    for method in TRAINED_METHODS:
        for run in range(config.n_seeds):
            single_payloads.append(_single_payload(config, method, run, datasets,
                                                   vocabs))
    results = {r["tag"]: r
               for r in _run_jobs(single_payloads, worker_count(len(single_payloads)))}

    # Single-model reports; thresholding rescales the baseline runs' posteriors.
    single_reports: dict[str, list[EvalReport]] = {m: [] for m in REPORT_ORDER}
    for run in range(config.n_seeds):
        for method in TRAINED_METHODS:
            res = results[("single", method, run)]
            correction = _correction_for(method, p_r, p_s, 0)
            report = report_from_vectors(_vectors(res["test_probs"]), test_set,
                                         correction, seed=run)
            single_reports[report.method].append(report)
        base = results[("single", "none", run)]
        single_reports["threshold"].append(
            report_from_vectors(_vectors(base["test_probs"]), test_set,
                                threshold_spec, seed=run))
    single_models = [aggregate_reports(single_reports[m]) for m in REPORT_ORDER]
    singles_done = time.perf_counter()

    member_payloads = []
    for method in TRAINED_METHODS:
        member_payloads.extend(_member_payloads(config, method, datasets, vocabs))
    results.update({r["tag"]: r
                    for r in _run_jobs(member_payloads,
                                       worker_count(len(member_payloads)))})

    # Ensemble reports from mean member posteriors.
    dev_labels = np.array([c.label_index for c in dev_set], dtype=np.int64)
    member_test = {m: [results[("member", m, i)]["test_probs"]
                       for i in range(config.ensemble_members)]
                   for m in TRAINED_METHODS}
    member_dev = {m: [results[("member", m, i)]["dev_probs"]
                      for i in range(config.ensemble_members)]
                  for m in TRAINED_METHODS}
    ensembles: list[EvalReport] = []
    for method in REPORT_ORDER:
        trained = "none" if method in ("baseline", "threshold") else method
        mean_probs = np.mean(member_test[trained], axis=0)
        correction = threshold_spec if method == "threshold" \
            else _correction_for(trained, p_r, p_s, 0)
        ensembles.append(report_from_vectors(_vectors(mean_probs), test_set,
                                             correction, seed=0))
    ensembles.append(_mixed_ensemble_report(config, member_dev, member_test,
                                            dev_labels, test_set, threshold_spec))

    distributions = {DIST_KEY[m]: ClassDistribution.from_probs(
        np.mean([r.predicted_distribution.probs for r in single_reports[m]], axis=0))
        for m in REPORT_ORDER}
    actual = single_reports["baseline"][0].gold_distribution
    ensembles_done = time.perf_counter()

    manifest = _write_outputs(config, out, datasets, vocabs, p_r, p_s, results,
                              single_reports, single_models, ensembles, distributions, actual)
    finished = time.perf_counter()
    timings = {
        "single_runs": singles_done - started,
        "ensemble_runs": ensembles_done - singles_done,
        "reporting": finished - ensembles_done,
        "total": finished - started,
    }
    return CompareResult(out_dir=out, single_models=single_models, ensembles=ensembles,
                         single_reports=single_reports, distributions=distributions,
                         actual_distribution=actual, manifest=manifest,
                         timings=timings)


def _mixed_ensemble_report(config: ExperimentConfig, member_dev, member_test,
                           dev_labels, test_set, threshold_spec) -> EvalReport:
    """The pooled ensemble: each method contributes its best members by dev F1.

    Threshold members are the baseline members scored after rescaling; their
    pooled test predictions are the renormalized adjusted posteriors, so every
    member contributes a proper distribution to the average.
    """
    quota = max(1, config.ensemble_members // len(REPORT_ORDER))
    pooled: list[np.ndarray] = []
    for method in REPORT_ORDER:
        trained = "none" if method in ("baseline", "threshold") else method
        scored = []
        for i in range(config.ensemble_members):
            dev_probs = member_dev[trained][i]
            if method == "threshold":
                preds = [threshold_adjust(PredictionVector(row), threshold_spec.p_r,
                                          threshold_spec.p_s).predicted_class
                         for row in dev_probs]
            else:
                preds = np.argmax(dev_probs, axis=1)
            f1, _ = micro_f1_emotional(np.asarray(preds), dev_labels)
            scored.append((f1, i))
        scored.sort(key=lambda s: (-s[0], s[1]))
        for _, i in scored[:quota]:
            probs = member_test[trained][i]
            if method == "threshold":
                probs = np.vstack([threshold_adjust(PredictionVector(row),
                                                    threshold_spec.p_r,
                                                    threshold_spec.p_s,
                                                    renormalize=True).probs
                                   for row in probs])
            pooled.append(probs)
    report = report_from_vectors(_vectors(np.mean(pooled, axis=0)), test_set,
                                 None, seed=0)
    return dataclasses.replace(report, method="mixed")


def _write_outputs(config, out: Path, datasets, vocabs, p_r, p_s, results,
                   single_reports, single_models, ensembles, distributions, actual) -> dict:
    train_set, dev_set, test_set = datasets
    write_single_models_csv(single_models, out / "single_models.csv")
    write_ensembles_csv(ensembles, config.ensemble_members, out / "ensembles.csv")
    write_distributions_csv(actual, distributions, out / "distributions.csv")
    all_reports = [r for m in REPORT_ORDER for r in single_reports[m]]
    write_eval_reports_csv(all_reports, out / "runs.csv")
    baseline_history = results[("single", "none", 0)]["history"]
    write_history_csv(baseline_history, out / "history_baseline_run0.csv")

    plot_distributions(actual, distributions, out / "distributions.png")
    plot_f1_comparison(single_models, ensembles, out / "f1_comparison.png")
    plot_history(baseline_history, out / "training_curve.png")

    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2)

    word_vocab, char_vocab = vocabs
    for method in TRAINED_METHODS:
        runs = [(results[("single", method, r)]["best_val_f1"], r)
                for r in range(config.n_seeds)]
        best_run = max(runs, key=lambda s: (s[0], -s[1]))[1]
        model = EmotionClassifier(dataclasses.replace(config.model), word_vocab,
                                  char_vocab)
        model.load_state_arrays(results[("single", method, best_run)]["state"])
        model.save(out / "checkpoints" / f"single_{method}_best.json")

    manifest = {
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "package_version": __version__,
        "config": config.to_json(),
        "split_sizes": {"train": len(train_set), "dev": len(dev_set),
                        "test": len(test_set)},
        "split_class_counts": {
            name: {CLASSES[c]: int(n) for c, n in
                   enumerate(estimate_distribution(split).counts)}
            for name, split in zip(("train", "dev", "test"), datasets)},
        "p_r": p_r.to_json(),
        "p_s": p_s.to_json(),
        "runs": [{"kind": tag[0], "method": tag[1], "index": tag[2],
                  "best_epoch": res["best_epoch"],
                  "best_val_f1": res["best_val_f1"]}
                 for tag, res in sorted(results.items(),
                                        key=lambda kv: (kv[0][0], kv[0][1], kv[0][2]))],
        "outputs": sorted(p.name for p in out.iterdir() if p.is_file()),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
