"""Conversation ingestion, tokenization, vocabularies, and synthetic corpora.

The synthetic generator exists so the full benchmark can run without any
external dataset: each class owns a pool of templates over class-specific
and shared tokens, and token-level noise controls how separable the classes
are. Split priors are matched exactly via largest-remainder rounding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .seeding import spawn_rng

CLASSES = ("happy", "sad", "angry", "others")
CLASS_TO_INDEX = {c: i for i, c in enumerate(CLASSES)}
EMOTIONAL_INDICES = (0, 1, 2)
OTHERS_INDEX = 3

PAD_ID = 0
UNK_ID = 1


class ClassDistribution:
    """Probability vector over the four classes, with raw counts when known."""

    __slots__ = ("probs", "counts")

    def __init__(self, probs, counts=None):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(CLASSES),):
            raise ContractError(f"expected {len(CLASSES)} class probabilities, "
                                f"got shape {probs.shape}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ContractError(f"invalid class distribution {probs.tolist()}")
        self.probs = probs
        self.counts = None if counts is None else np.asarray(counts, dtype=np.int64)

    @classmethod
    def from_counts(cls, counts) -> "ClassDistribution":
        counts = np.asarray(counts, dtype=np.int64)
        total = counts.sum()
        if total <= 0 or np.any(counts < 0):
            raise ContractError(f"counts must be non-negative with positive total, "
                                f"got {counts.tolist()}")
        return cls(counts / total, counts)

    @classmethod
    def from_probs(cls, probs) -> "ClassDistribution":
        return cls(probs)

    def __getitem__(self, c: int) -> float:
        return float(self.probs[c])

    def __eq__(self, other):
        return isinstance(other, ClassDistribution) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"ClassDistribution({np.round(self.probs, 4).tolist()})"

    def to_json(self) -> list[float]:
        return [float(p) for p in self.probs]


@dataclass
class Conversation:
    """One 3-turn example; ``turns`` holds token sequences, label may be absent."""

    id: str
    turns: tuple[list[str], list[str], list[str]]
    label: str | None = None

    def __post_init__(self):
        if len(self.turns) != 3:
            raise ContractError(f"conversation {self.id} needs exactly 3 turns")
        if self.label is not None and self.label not in CLASS_TO_INDEX:
            raise ContractError(f"unknown label {self.label!r}")

    @property
    def label_index(self) -> int:
        if self.label is None:
            raise ContractError(f"conversation {self.id} has no label")
        return CLASS_TO_INDEX[self.label]


# ---------------------------------------------------------------------------
# Tokenization and TSV I/O
# ---------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    """Lowercase and whitespace-split, peeling punctuation and emoji off as
    standalone single-codepoint tokens. Apostrophes stay inside words, so
    contractions survive intact."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        word: list[str] = []
        for ch in chunk:
            if ch.isalnum() or ch == "'":
                word.append(ch)
            else:
                if word:
                    tokens.append("".join(word))
                    word = []
                tokens.append(ch)
        if word:
            tokens.append("".join(word))
    return tokens


def _detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def parse_tsv(path, has_label: bool = True) -> list[Conversation]:
    """Read an EmoContext-format TSV; raises ParseError with the 1-based file
    line number on any malformed row."""
    expected = ["id", "turn1", "turn2", "turn3"] + (["label"] if has_label else [])
    conversations = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != expected:
            raise ParseError(f"line 1: expected header {expected}, got {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != len(expected):
                raise ParseError(f"line {lineno}: expected {len(expected)} "
                                 f"tab-separated fields, got {len(fields)}")
            label = None
            if has_label:
                label = fields[4]
                if label not in CLASS_TO_INDEX:
                    raise ParseError(f"line {lineno}: unknown label {label!r}")
            conversations.append(Conversation(
                id=fields[0],
                turns=(tokenize(fields[1]), tokenize(fields[2]), tokenize(fields[3])),
                label=label,
            ))
    return conversations


def write_tsv(conversations: Sequence[Conversation], path, include_label: bool = True) -> None:
    header = ["id", "turn1", "turn2", "turn3"] + (["label"] if include_label else [])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for conv in conversations:
            fields = [conv.id] + [_detokenize(t) for t in conv.turns]
            if include_label:
                if conv.label is None:
                    raise ContractError(f"conversation {conv.id} has no label to write")
                fields.append(conv.label)
            fh.write("\t".join(fields) + "\n")


# ---------------------------------------------------------------------------
# Vocabularies
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token ids with 0 reserved for padding and 1 for unknown tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = ["<pad>", "<unk>"] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, token_iter: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        """Most frequent tokens first; ties broken lexicographically for
        run-to-run stability."""
        counts = Counter(token_iter)
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls(ranked)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def to_json(self) -> list[str]:
        return self.id_to_token[2:]

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def word_token_iter(conversations: Iterable[Conversation]) -> Iterable[str]:
    for conv in conversations:
        for turn in conv.turns:
            yield from turn


def char_token_iter(conversations: Iterable[Conversation]) -> Iterable[str]:
    for conv in conversations:
        for turn in conv.turns:
            for token in turn:
                yield from token


def estimate_distribution(labeled: Sequence[Conversation]) -> ClassDistribution:
    """Empirical class distribution of a labeled set."""
    if not labeled:
        raise ContractError("cannot estimate a distribution from an empty set")
    counts = np.zeros(len(CLASSES), dtype=np.int64)
    for conv in labeled:
        counts[conv.label_index] += 1
    return ClassDistribution.from_counts(counts)


def largest_remainder_counts(n: int, probs) -> np.ndarray:
    """Integer counts summing to n, apportioned by probs via largest remainder.

    Remainder ties go to the lowest class index."""
    probs = np.asarray(probs, dtype=np.float64)
    ideal = n * probs
    counts = np.floor(ideal).astype(np.int64)
    shortfall = n - int(counts.sum())
    if shortfall > 0:
        remainders = ideal - counts
        order = sorted(range(len(probs)), key=lambda c: (-remainders[c], c))
        for c in order[:shortfall]:
            counts[c] += 1
    return counts


# ---------------------------------------------------------------------------
# Synthetic corpus generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Knobs for the synthetic conversation generator.

    template_overlap is the fraction of template slots drawn from the shared
    token pool; noise_rate is the per-token chance of replacement with a
    uniformly random token from the whole vocabulary, which is what leaks
    class tokens across classes and makes posteriors prior-sensitive.
    """

    vocab_size: int = 120
    templates_per_class: int = 6
    template_overlap: float = 0.5
    noise_rate: float = 0.25
    utterance_length_range: tuple[int, int] = (3, 7)

    def __post_init__(self):
        if self.vocab_size < 5 * 2:
            raise ConfigError("vocab_size too small to partition into pools")
        if not 0.0 <= self.template_overlap <= 1.0:
            raise ConfigError("template_overlap must be in [0, 1]")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("noise_rate must be in [0, 1)")
        lo, hi = self.utterance_length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad utterance_length_range {self.utterance_length_range}")

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "templates_per_class": self.templates_per_class,
            "template_overlap": self.template_overlap,
            "noise_rate": self.noise_rate,
            "utterance_length_range": list(self.utterance_length_range),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "GeneratorConfig":
        payload = dict(payload)
        if "utterance_length_range" in payload:
            payload["utterance_length_range"] = tuple(payload["utterance_length_range"])
        return cls(**payload)


@dataclass
class SyntheticWorld:
    """Token pools and fixed templates shared by all splits of one corpus."""

    class_pools: list[list[str]]
    common_pool: list[str]
    class_templates: list[list[list[str]]]
    context_templates: list[list[str]]

    @property
    def all_tokens(self) -> list[str]:
        return [t for pool in self.class_pools for t in pool] + self.common_pool


def build_world(config: GeneratorConfig, seed: int) -> SyntheticWorld:
    rng = spawn_rng(seed, "world")
    n_common = max(1, int(round(config.vocab_size * 0.4)))
    per_class = max(1, (config.vocab_size - n_common) // len(CLASSES))
    class_pools = [[f"{name[:3]}{i:02d}" for i in range(per_class)] for name in CLASSES]
    common_pool = [f"com{i:02d}" for i in range(n_common)]

    lo, hi = config.utterance_length_range

    def make_template(pool: list[str]) -> list[str]:
        length = int(rng.integers(lo, hi + 1))
        slots = rng.random(length) < config.template_overlap
        if slots.all():
            slots[rng.integers(length)] = False
        return [common_pool[rng.integers(len(common_pool))] if is_common
                else pool[rng.integers(len(pool))]
                for is_common in slots]

    class_templates = [[make_template(class_pools[c]) for _ in range(config.templates_per_class)]
                       for c in range(len(CLASSES))]
    context_templates = [[common_pool[rng.integers(len(common_pool))]
                          for _ in range(int(rng.integers(lo, hi + 1)))]
                         for _ in range(2 * config.templates_per_class)]
    return SyntheticWorld(class_pools, common_pool, class_templates, context_templates)


def _instantiate(template: list[str], all_tokens: list[str], noise_rate: float,
                 rng: np.random.Generator) -> list[str]:
    out = list(template)
    if noise_rate > 0:
        for i in range(len(out)):
            if rng.random() < noise_rate:
                out[i] = all_tokens[rng.integers(len(all_tokens))]
    return out


def generate_split(world: SyntheticWorld, config: GeneratorConfig, n: int,
                   dist: ClassDistribution, seed: int, id_prefix: str) -> list[Conversation]:
    """One split with class counts exactly largest-remainder(n * probs)."""
    if n < 1:
        raise ConfigError("split size must be >= 1")
    counts = largest_remainder_counts(n, dist.probs)
    for c, count in enumerate(counts):
        if count > 0 and dist.probs[c] == 0:
            raise ConfigError(f"class {CLASSES[c]} has probability 0 but count {count}")
    rng = spawn_rng(seed, "split", id_prefix)
    all_tokens = world.all_tokens
    conversations = []
    for c, count in enumerate(counts):
        templates = world.class_templates[c]
        for _ in range(count):
            turn1 = _instantiate(world.context_templates[rng.integers(len(world.context_templates))],
                                 all_tokens, config.noise_rate, rng)
            turn2 = _instantiate(world.context_templates[rng.integers(len(world.context_templates))],
                                 all_tokens, config.noise_rate, rng)
            turn3 = _instantiate(templates[rng.integers(len(templates))],
                                 all_tokens, config.noise_rate, rng)
            conversations.append(Conversation(
                id="", turns=(turn1, turn2, turn3), label=CLASSES[c]))
    order = rng.permutation(len(conversations))
    shuffled = [conversations[i] for i in order]
    for i, conv in enumerate(shuffled):
        conv.id = f"{id_prefix}-{i + 1:05d}"
    return shuffled


def synthesize(config: GeneratorConfig, n_train: int, n_test: int,
               train_dist: ClassDistribution, test_dist: ClassDistribution,
               seed: int) -> tuple[list[Conversation], list[Conversation]]:
    """Train and test splits over a shared synthetic world; deterministic per seed."""
    world = build_world(config, seed)
    train = generate_split(world, config, n_train, train_dist, seed, "train")
    test = generate_split(world, config, n_test, test_dist, seed, "test")
    return train, test


# ---------------------------------------------------------------------------
# Batch encoding for the model
# ---------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    """Padded id arrays for one batch: per turn, word ids [B, T] and char ids
    [B, T, L]; pad id 0 throughout. An empty turn becomes a single pad token."""

    word_ids: list[np.ndarray]
    char_ids: list[np.ndarray]
    labels: np.ndarray | None

    @property
    def size(self) -> int:
        return self.word_ids[0].shape[0]


def encode_batch(conversations: Sequence[Conversation], word_vocab: Vocabulary,
                 char_vocab: Vocabulary, max_turn_len: int = 24,
                 max_word_len: int = 12, min_word_len: int = 5) -> EncodedBatch:
    if not conversations:
        raise ContractError("cannot encode an empty batch")
    word_ids, char_ids = [], []
    for m in range(3):
        turns = [conv.turns[m][:max_turn_len] for conv in conversations]
        t_max = max(1, max(len(t) for t in turns))
        l_max = max(min_word_len,
                    min(max_word_len, max((len(tok) for t in turns for tok in t), default=1)))
        w = np.full((len(turns), t_max), PAD_ID, dtype=np.int64)
        ch = np.full((len(turns), t_max, l_max), PAD_ID, dtype=np.int64)
        for b, tokens in enumerate(turns):
            for t, token in enumerate(tokens):
                w[b, t] = word_vocab.encode(token)
                for k, c in enumerate(token[:max_word_len][:l_max]):
                    ch[b, t, k] = char_vocab.encode(c)
        word_ids.append(w)
        char_ids.append(ch)
    labels = None
    if all(conv.label is not None for conv in conversations):
        labels = np.array([conv.label_index for conv in conversations], dtype=np.int64)
    return EncodedBatch(word_ids, char_ids, labels)
