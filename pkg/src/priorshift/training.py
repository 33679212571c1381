"""Optimization loop: class-weighted cross entropy, Adam, gradient clipping,
and validation-based checkpoint selection.

Correction methods hook in at fixed points. Resampling methods rewrite the
training set before the first epoch; cost_sensitive sets the loss weights to
p_s/p_r; threshold leaves training alone entirely and acts at inference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correction import CorrectionSpec, class_weights, resample
from .data import CLASSES, Conversation, EncodedBatch
from .errors import ConfigError, ContractError
from .evaluation import micro_f1_emotional
from .model import EmotionClassifier
from .seeding import spawn_rng

PROB_FLOOR = 1e-12

# Running count of probabilities clamped at PROB_FLOOR instead of raising.
clamp_events = 0


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    grad_clip_norm: float = 3.0
    max_epochs: int = 50
    patience: int = 10
    class_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if any(w < 0 for w in self.class_weights):
            raise ConfigError("class weights must be >= 0")
        if len(self.class_weights) != len(CLASSES):
            raise ConfigError(f"need {len(CLASSES)} class weights")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")

    def to_json(self) -> dict:
        payload = self.__dict__.copy()
        payload["class_weights"] = list(self.class_weights)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "class_weights" in payload:
            payload["class_weights"] = tuple(payload["class_weights"])
        return cls(**payload)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def weighted_cross_entropy(probs, labels, weights) -> float:
    """-(1/N) * sum_i w[y_i] * ln p(y_i | x_i) on given probabilities.

    Zero probabilities are clamped at 1e-12 and counted in ``clamp_events``
    with a warning rather than raising. Training itself goes through the
    log-softmax form on logits; this is the probability-space reference.
    """
    global clamp_events
    rows = np.asarray([p.probs if hasattr(p, "probs") else p for p in probs],
                      dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if rows.shape[0] != labels.shape[0]:
        raise ContractError(f"{rows.shape[0]} predictions but {labels.shape[0]} labels")
    picked = rows[np.arange(rows.shape[0]), labels]
    low = int(np.count_nonzero(picked < PROB_FLOOR))
    if low:
        clamp_events += low
        warnings.warn(f"clamped {low} zero probabilities at {PROB_FLOOR}",
                      RuntimeWarning, stacklevel=2)
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.sum(weights[labels] * np.log(picked)) / rows.shape[0])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, learning_rate: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    correct1 = 1.0 - state.beta1 ** state.t
    correct2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= learning_rate * (m / correct1) / (np.sqrt(v / correct2) + state.epsilon)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 3.0) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm if the global L2 norm exceeds it."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EmotionClassifier
    history: list[dict]
    best_epoch: int
    best_val_f1: float


def _slice_batch(full: EncodedBatch, idx: np.ndarray) -> EncodedBatch:
    return EncodedBatch(word_ids=[w[idx] for w in full.word_ids],
                        char_ids=[c[idx] for c in full.char_ids],
                        labels=None if full.labels is None else full.labels[idx])


def train(model: EmotionClassifier, train_set: list[Conversation],
          val_set: list[Conversation], config: TrainConfig,
          correction: CorrectionSpec | None = None) -> TrainResult:
    """Mini-batch training with per-epoch validation micro-F1 model selection.

    Returns the model restored to its best-validation-F1 checkpoint (ties go
    to the earlier epoch). patience <= 0 disables early stopping.
    """
    if not train_set or not val_set:
        raise ContractError("train and validation sets must be non-empty")

    weights = np.asarray(config.class_weights, dtype=np.float64)
    effective = train_set
    if correction is not None:
        if correction.method == "oversample":
            effective = resample(train_set, correction.p_s, "over", correction.seed)
        elif correction.method == "undersample":
            effective = resample(train_set, correction.p_s, "under", correction.seed)
        elif correction.method == "cost_sensitive":
            weights = class_weights(correction.p_r, correction.p_s)

    full = model.encode_conversations(effective)
    if full.labels is None:
        raise ContractError("training set must be fully labeled")
    n = full.size
    val_labels = np.array([c.label_index for c in val_set], dtype=np.int64)
    val_batches = [model.encode_conversations(val_set[lo:lo + 256])
                   for lo in range(0, len(val_set), 256)]

    state = AdamState()
    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = 0
    best_arrays = model.state_arrays()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        perm = spawn_rng(config.seed, "shuffle", epoch).permutation(n)
        drop_rng = spawn_rng(config.seed, "dropout", epoch)
        loss_sum = 0.0
        hits = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            batch = _slice_batch(full, idx)
            logits = model.forward_batch(batch, training=True, rng=drop_rng)
            loss = T.weighted_cross_entropy_logits(logits, batch.labels, weights)
            T.zero_grad(model.params.values())
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            clip_gradients(grads, config.grad_clip_norm)
            adam_step(model.params, grads, state, config.learning_rate)
            loss_sum += float(loss.values) * len(idx)
            hits += int(np.count_nonzero(np.argmax(logits.values, axis=1) == batch.labels))

        with T.no_grad():
            val_probs = np.vstack([T.softmax(model.forward_batch(vb), axis=1).values
                                   for vb in val_batches])
        val_pred = np.argmax(val_probs, axis=1)
        val_f1, _ = micro_f1_emotional(val_pred, val_labels)
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "train_acc": hits / n,
            "val_acc": float(np.mean(val_pred == val_labels)),
            "val_micro_f1": val_f1,
        })

        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_arrays = model.state_arrays()
            since_best = 0
        else:
            since_best += 1
            if config.patience > 0 and since_best >= config.patience:
                break

    model.load_state_arrays(best_arrays)
    return TrainResult(model=model, history=history,
                       best_epoch=best_epoch, best_val_f1=best_f1)
