"""Classifier-agnostic operators that correct train/test class-prior mismatch.

Four families: resampling the training set toward a target distribution,
posterior thresholding by the class-ratio factor p_s(c)/p_r(c), cost weights
for the loss (the same factor, applied at training time), and bagging
ensembles whose bags carry a resampling correction. All operators are pure
and deterministic given their seeds.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import CLASSES, ClassDistribution, Conversation, estimate_distribution
from .errors import ConfigError, ContractError
from .seeding import derive_seed, spawn_rng

METHODS = ("none", "oversample", "undersample", "threshold", "cost_sensitive")


@dataclass
class CorrectionSpec:
    """Which mismatch method to apply, plus the source (training-time) and
    target (validation-estimated) class distributions it needs."""

    method: str
    p_r: ClassDistribution
    p_s: ClassDistribution
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown correction method {self.method!r}")
        if self.method in ("threshold", "cost_sensitive"):
            bad = [CLASSES[c] for c in range(len(CLASSES))
                   if self.p_s[c] > 0 and self.p_r[c] == 0]
            if bad:
                raise ConfigError(f"{self.method} needs p_r > 0 for classes {bad}")

    def to_json(self) -> dict:
        return {"method": self.method, "p_r": self.p_r.to_json(),
                "p_s": self.p_s.to_json(), "seed": self.seed}

    @classmethod
    def from_json(cls, payload: dict) -> "CorrectionSpec":
        return cls(method=payload["method"],
                   p_r=ClassDistribution.from_probs(payload["p_r"]),
                   p_s=ClassDistribution.from_probs(payload["p_s"]),
                   seed=int(payload.get("seed", 0)))


class PredictionVector:
    """Per-example class scores. ``predicted_class`` defaults to the argmax
    with lowest-index tie-break; ensemble voting may override it. Scores are
    a probability distribution when ``normalized`` is True, otherwise raw
    rescaled scores whose argmax is still meaningful."""

    __slots__ = ("probs", "normalized", "_predicted")

    def __init__(self, probs, normalized: bool = True, predicted_class: int | None = None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(CLASSES),):
            raise ContractError(f"expected {len(CLASSES)} scores, got shape {probs.shape}")
        if np.any(probs < 0):
            raise ContractError("negative class scores")
        if normalized and abs(probs.sum() - 1.0) > 1e-9:
            raise ContractError(f"normalized scores must sum to 1, got {probs.sum()!r}")
        self.probs = probs
        self.normalized = normalized
        self._predicted = predicted_class

    @property
    def predicted_class(self) -> int:
        if self._predicted is not None:
            return self._predicted
        return int(np.argmax(self.probs))

    def __repr__(self):
        return (f"PredictionVector({np.round(self.probs, 4).tolist()}, "
                f"predicted={CLASSES[self.predicted_class]})")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def resample(train: list[Conversation], target: ClassDistribution, mode: str,
             seed: int = 0) -> list[Conversation]:
    """Random over- or undersampling toward ``target``.

    The anchor class keeps its count unchanged: in over mode the class most
    over-represented relative to the target (so every other class only gains
    examples), in under mode the most under-represented one (so every other
    class only loses examples). Oversampling keeps all originals and appends
    duplicates drawn uniformly with replacement; undersampling keeps a
    uniform subset in the original order.
    """
    if mode not in ("over", "under"):
        raise ConfigError(f"resample mode must be 'over' or 'under', got {mode!r}")
    current = estimate_distribution(train)
    counts = current.counts.astype(np.float64)
    present = counts > 0
    wanted = target.probs > 0
    if np.any(wanted & ~present):
        missing = [CLASSES[c] for c in np.nonzero(wanted & ~present)[0]]
        raise ConfigError(f"target assigns probability to absent classes {missing}")
    if mode == "over" and np.any(present & ~wanted):
        extra = [CLASSES[c] for c in np.nonzero(present & ~wanted)[0]]
        raise ConfigError(f"oversampling cannot reach a zero target for present "
                          f"classes {extra}")

    ratios = np.where(wanted, counts / np.where(wanted, target.probs, 1.0), np.nan)
    if mode == "over":
        anchor = int(np.nanargmax(ratios))
    else:
        anchor = int(np.nanargmin(ratios))
    scale = counts[anchor] / target.probs[anchor]

    new_counts = np.zeros(len(CLASSES), dtype=np.int64)
    for c in range(len(CLASSES)):
        if not wanted[c]:
            new_counts[c] = counts[c] if mode == "over" else 0
            continue
        ideal = scale * target.probs[c]
        if mode == "over":
            new_counts[c] = max(int(counts[c]), int(np.floor(ideal + 0.5)))
        else:
            new_counts[c] = min(int(counts[c]), int(np.floor(ideal)))

    by_class = [[] for _ in CLASSES]
    for i, conv in enumerate(train):
        by_class[conv.label_index].append(i)

    rng = spawn_rng(seed, "resample", mode)
    if mode == "over":
        out = list(train)
        for c in range(len(CLASSES)):
            extra = int(new_counts[c]) - len(by_class[c])
            if extra > 0:
                picks = rng.integers(0, len(by_class[c]), size=extra)
                out.extend(train[by_class[c][j]] for j in picks)
        return out
    keep: set[int] = set()
    for c in range(len(CLASSES)):
        idx = by_class[c]
        if new_counts[c] >= len(idx):
            keep.update(idx)
        else:
            chosen = rng.choice(len(idx), size=int(new_counts[c]), replace=False)
            keep.update(idx[j] for j in chosen)
    return [conv for i, conv in enumerate(train) if i in keep]


# ---------------------------------------------------------------------------
# Thresholding and cost weights
# ---------------------------------------------------------------------------

def class_weights(p_r: ClassDistribution, p_s: ClassDistribution) -> np.ndarray:
    """Per-class factor p_s(c)/p_r(c).

    Equals (N^r/N_c^r) * (N_c^s/N^s): the inverse training class ratio times
    the estimated target ratio. Used as loss weights by cost-sensitive
    training and as the posterior rescaling factor by thresholding.
    """
    if np.any(p_r.probs == 0):
        zero = [CLASSES[c] for c in np.nonzero(p_r.probs == 0)[0]]
        raise ContractError(f"training distribution has zero mass on {zero}")
    return p_s.probs / p_r.probs


def threshold_adjust(p: PredictionVector, p_r: ClassDistribution,
                     p_s: ClassDistribution, renormalize: bool = False) -> PredictionVector:
    """Rescale posteriors by p_s(c)/p_r(c) and re-take the argmax.

    Scores are returned raw by default; the dropped evidence term is constant
    across classes, so normalization can never change the decision.
    """
    factors = np.zeros(len(CLASSES), dtype=np.float64)
    for c in range(len(CLASSES)):
        if p_r.probs[c] > 0:
            factors[c] = p_s.probs[c] / p_r.probs[c]
        elif p.probs[c] > 0:
            raise ContractError(f"zero training prior for predicted class {CLASSES[c]}")
    scores = factors * p.probs
    if renormalize:
        total = scores.sum()
        if total <= 0:
            raise ContractError("all adjusted scores are zero; cannot renormalize")
        return PredictionVector(scores / total, normalized=True)
    return PredictionVector(scores, normalized=False)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def bag_ensemble(member_predictions: list[list[PredictionVector]],
                 combine: str = "prob_mean") -> list[PredictionVector]:
    """Combine per-member predictions example by example.

    prob_mean averages score vectors and argmaxes; majority_vote takes the
    modal predicted class, falling back to the averaged scores (then lowest
    index) on ties.
    """
    if combine not in ("prob_mean", "majority_vote"):
        raise ConfigError(f"unknown combine rule {combine!r}")
    if not member_predictions:
        raise ContractError("ensemble needs at least one member")
    n = len(member_predictions[0])
    if any(len(m) != n for m in member_predictions):
        raise ContractError("members predicted different numbers of examples")

    combined = []
    for i in range(n):
        votes = [m[i] for m in member_predictions]
        mean_probs = np.mean([v.probs for v in votes], axis=0)
        normalized = all(v.normalized for v in votes)
        if combine == "prob_mean":
            combined.append(PredictionVector(mean_probs, normalized=normalized))
        else:
            tally = Counter(v.predicted_class for v in votes)
            top = max(tally.values())
            tied = sorted(c for c, k in tally.items() if k == top)
            winner = tied[0] if len(tied) == 1 else max(
                tied, key=lambda c: (mean_probs[c], -c))
            combined.append(PredictionVector(mean_probs, normalized=normalized,
                                             predicted_class=int(winner)))
    return combined


def make_bags(train: list[Conversation], n_members: int,
              per_member_correction: CorrectionSpec, seed: int = 0) -> list[list[Conversation]]:
    """Bootstrap bags (with replacement, |bag| = |train|), one per member,
    each followed by the member's resampling correction when the correction
    method is a sampling one. Member seeds are derived independently."""
    if n_members < 1:
        raise ContractError("need at least one ensemble member")
    bags = []
    for m in range(n_members):
        rng = spawn_rng(seed, "bootstrap", m)
        picks = rng.integers(0, len(train), size=len(train))
        bag = [train[i] for i in picks]
        if per_member_correction.method == "oversample":
            bag = resample(bag, per_member_correction.p_s, "over",
                           derive_seed(seed, "bag-correction", m))
        elif per_member_correction.method == "undersample":
            bag = resample(bag, per_member_correction.p_s, "under",
                           derive_seed(seed, "bag-correction", m))
        bags.append(bag)
    return bags
