"""Task metrics and per-run reports.

The headline metric pools true/false positives and false negatives over the
three emotional classes only; others acts as a reject class and never pools.
A plain 4-class micro-F1 is available for comparison. Reports also carry
the predicted-vs-gold class distributions and their total-variation gap,
which is what the correction methods are supposed to shrink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correction import CorrectionSpec, PredictionVector, threshold_adjust
from .data import CLASSES, ClassDistribution, Conversation, EMOTIONAL_INDICES
from .errors import ContractError


def _pooled_f1(preds: np.ndarray, golds: np.ndarray,
               pooled: tuple[int, ...]) -> tuple[float, bool]:
    tp = fp = fn = 0
    for c in pooled:
        tp += int(np.count_nonzero((preds == c) & (golds == c)))
        fp += int(np.count_nonzero((preds == c) & (golds != c)))
        fn += int(np.count_nonzero((preds != c) & (golds == c)))
    if tp == 0 and fp == 0 and fn == 0:
        return 0.0, True
    return 2.0 * tp / (2.0 * tp + fp + fn), False


def _as_label_array(labels, what: str) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{what} must be a non-empty 1-D sequence of class indices")
    return arr


def micro_f1_emotional(preds, golds) -> tuple[float, bool]:
    """Micro-averaged F1 pooled over happy/sad/angry; others never pools.

    Returns (f1, degenerate): degenerate means the pool was empty (no
    emotional predictions and no emotional golds), reported as 0.
    """
    preds, golds = _as_label_array(preds, "preds"), _as_label_array(golds, "golds")
    if preds.shape != golds.shape:
        raise ContractError(f"{preds.size} predictions but {golds.size} golds")
    return _pooled_f1(preds, golds, EMOTIONAL_INDICES)


def micro_f1_all_classes(preds, golds) -> tuple[float, bool]:
    """4-class variant: every class pools, so this equals plain accuracy."""
    preds, golds = _as_label_array(preds, "preds"), _as_label_array(golds, "golds")
    if preds.shape != golds.shape:
        raise ContractError(f"{preds.size} predictions but {golds.size} golds")
    return _pooled_f1(preds, golds, tuple(range(len(CLASSES))))


def tv_distance(a: ClassDistribution, b: ClassDistribution) -> float:
    """Total variation distance: half the L1 gap between two distributions."""
    return float(0.5 * np.sum(np.abs(a.probs - b.probs)))


def per_class_metrics(preds: np.ndarray, golds: np.ndarray) -> dict[str, dict[str, float]]:
    out = {}
    for c, name in enumerate(CLASSES):
        tp = int(np.count_nonzero((preds == c) & (golds == c)))
        fp = int(np.count_nonzero((preds == c) & (golds != c)))
        fn = int(np.count_nonzero((preds != c) & (golds == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[name] = {"precision": precision, "recall": recall, "f1": f1}
    return out


EVAL_CSV_HEADER = (
    ["method", "seed", "n_examples", "accuracy", "micro_f1_emotional",
     "degenerate", "tv_distance"]
    + [f"{name}_{metric}" for name in CLASSES
       for metric in ("precision", "recall", "f1")]
    + [f"predicted_{name}" for name in CLASSES]
    + [f"gold_{name}" for name in CLASSES]
)


@dataclass
class EvalReport:
    method: str
    seed: int
    n_examples: int
    accuracy: float
    micro_f1_emotional: float
    degenerate: bool
    per_class: dict[str, dict[str, float]]
    predicted_distribution: ClassDistribution
    gold_distribution: ClassDistribution
    tv_distance: float

    def __post_init__(self):
        rates = [self.accuracy, self.micro_f1_emotional, self.tv_distance]
        rates += [v for stats in self.per_class.values() for v in stats.values()]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ContractError("evaluation rates must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "n_examples": self.n_examples,
            "accuracy": self.accuracy,
            "micro_f1_emotional": self.micro_f1_emotional,
            "degenerate": self.degenerate,
            "per_class": self.per_class,
            "predicted_distribution": self.predicted_distribution.to_json(),
            "gold_distribution": self.gold_distribution.to_json(),
            "tv_distance": self.tv_distance,
        }

    def csv_row(self) -> list:
        row = [self.method, self.seed, self.n_examples,
               repr(self.accuracy), repr(self.micro_f1_emotional),
               int(self.degenerate), repr(self.tv_distance)]
        for name in CLASSES:
            stats = self.per_class[name]
            row += [repr(stats["precision"]), repr(stats["recall"]), repr(stats["f1"])]
        row += [repr(float(p)) for p in self.predicted_distribution.probs]
        row += [repr(float(p)) for p in self.gold_distribution.probs]
        return row


def evaluate(predictor, dataset: list[Conversation],
             correction: CorrectionSpec | None = None, seed: int = 0) -> EvalReport:
    """Score one model or ensemble on a labeled dataset.

    ``predictor`` needs a ``predict`` method returning PredictionVectors.
    Thresholding happens here, at inference: each prediction's scores are
    rescaled by p_s/p_r before the argmax. All other methods act during
    training and leave inference untouched.
    """
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    return report_from_vectors(predictor.predict(dataset), dataset, correction, seed)


def report_from_vectors(vectors: list[PredictionVector], dataset: list[Conversation],
                        correction: CorrectionSpec | None = None,
                        seed: int = 0) -> EvalReport:
    """Build the report from already-computed predictions (same semantics as
    ``evaluate``; lets callers reuse one forward pass across methods)."""
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    if any(c.label is None for c in dataset):
        raise ContractError("evaluation data must be labeled")
    if len(vectors) != len(dataset):
        raise ContractError(f"{len(vectors)} predictions for {len(dataset)} examples")
    golds = np.array([c.label_index for c in dataset], dtype=np.int64)

    if correction is not None and correction.method == "threshold":
        vectors = [threshold_adjust(v, correction.p_r, correction.p_s) for v in vectors]
    preds = np.array([v.predicted_class for v in vectors], dtype=np.int64)

    method = "baseline" if correction is None or correction.method == "none" \
        else correction.method
    pred_counts = np.bincount(preds, minlength=len(CLASSES))
    gold_counts = np.bincount(golds, minlength=len(CLASSES))
    pred_dist = ClassDistribution.from_counts(pred_counts)
    gold_dist = ClassDistribution.from_counts(gold_counts)
    f1, degenerate = micro_f1_emotional(preds, golds)
    return EvalReport(
        method=method,
        seed=seed,
        n_examples=len(dataset),
        accuracy=float(np.mean(preds == golds)),
        micro_f1_emotional=f1,
        degenerate=degenerate,
        per_class=per_class_metrics(preds, golds),
        predicted_distribution=pred_dist,
        gold_distribution=gold_dist,
        tv_distance=tv_distance(pred_dist, gold_dist),
    )


@dataclass
class AggregateReport:
    """Mean and population standard deviation over one method's seeded runs."""

    method: str
    n_runs: int
    accuracy_mean: float
    accuracy_std: float
    micro_f1_mean: float
    micro_f1_std: float
    tv_distance_mean: float
    tv_distance_std: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def aggregate_reports(reports: list[EvalReport]) -> AggregateReport:
    if not reports:
        raise ContractError("cannot aggregate zero reports")
    methods = {r.method for r in reports}
    if len(methods) != 1:
        raise ContractError(f"refusing to aggregate mixed methods {sorted(methods)}")
    acc = np.array([r.accuracy for r in reports])
    f1 = np.array([r.micro_f1_emotional for r in reports])
    tv = np.array([r.tv_distance for r in reports])
    return AggregateReport(
        method=reports[0].method,
        n_runs=len(reports),
        accuracy_mean=float(acc.mean()), accuracy_std=float(acc.std()),
        micro_f1_mean=float(f1.mean()), micro_f1_std=float(f1.std()),
        tv_distance_mean=float(tv.mean()), tv_distance_std=float(tv.std()),
    )
