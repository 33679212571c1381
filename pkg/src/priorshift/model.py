"""Semi-hierarchical 3-turn conversation classifier.

One shared utterance encoder (two parallel shortcut-stacked BiLSTM channels
over independent trainable word embeddings, channel A augmented with
char-CNN features, integrated by multi-dimensional source-to-token attention
plus max pooling) feeds a conversation-level BiLSTM. The final representation
concatenates u1, u2, u3, u1-u2+u3 and the context summary, and a two-layer
ReLU MLP with shortcut (input-concatenation) connections produces the
4-class logits.

All forward code is batched: sequences are lists over time of [B, d]
tensors, padding uses token id 0, and the model learns that padding is
uninformative rather than masking it out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .correction import PredictionVector, bag_ensemble
from .data import PAD_ID, Conversation, EncodedBatch, Vocabulary, encode_batch
from .errors import ConfigError, ContractError
from .seeding import spawn_rng

MODEL_FORMAT = "priorshift-model"
MODEL_VERSION = 1
N_CLASSES = 4


@dataclass
class ModelConfig:
    word_emb_dim: int = 16
    char_emb_dim: int = 15
    char_cnn_filter_widths: tuple[int, ...] = (1, 3, 5)
    char_cnn_maps_per_width: int = 8
    lstm_hidden_per_direction: int = 8
    lstm_layers: int = 2
    context_lstm_hidden: int = 8
    context_lstm_layers: int = 1
    context_summary: str = "max_pool"
    mlp_hidden: int = 32
    dropout_p: float = 0.1
    max_turn_len: int = 24
    max_word_len: int = 12
    word_vocab_size: int = 0
    char_vocab_size: int = 0

    def __post_init__(self):
        dims = (self.word_emb_dim, self.char_emb_dim, self.char_cnn_maps_per_width,
                self.lstm_hidden_per_direction, self.lstm_layers,
                self.context_lstm_hidden, self.context_lstm_layers, self.mlp_hidden)
        if any(d < 1 for d in dims):
            raise ConfigError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.context_summary not in ("max_pool", "last_state"):
            raise ConfigError(f"unknown context_summary {self.context_summary!r}")
        if any(w < 1 for w in self.char_cnn_filter_widths):
            raise ConfigError("filter widths must be >= 1")

    @property
    def char_feature_dim(self) -> int:
        return len(self.char_cnn_filter_widths) * self.char_cnn_maps_per_width

    @property
    def state_dim(self) -> int:
        """Per-timestep encoder output: both channels' bidirectional states."""
        return 4 * self.lstm_hidden_per_direction

    @property
    def utterance_dim(self) -> int:
        """Attention output and max-pool output, concatenated."""
        return 2 * self.state_dim

    @property
    def context_dim(self) -> int:
        return 4 * self.utterance_dim + 2 * self.context_lstm_hidden

    @property
    def min_word_len(self) -> int:
        return max(self.char_cnn_filter_widths)

    def to_json(self) -> dict:
        payload = self.__dict__.copy()
        payload["char_cnn_filter_widths"] = list(self.char_cnn_filter_widths)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        if "char_cnn_filter_widths" in payload:
            payload["char_cnn_filter_widths"] = tuple(payload["char_cnn_filter_widths"])
        return cls(**payload)


# ---------------------------------------------------------------------------
# Parameter initialization helpers
# ---------------------------------------------------------------------------

def _uniform(rng, shape, limit) -> T.Tensor:
    return T.Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

def _glorot(rng, fan_in, fan_out) -> T.Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

def _zeros(shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _init_lstm(params, prefix, d_in, hidden, rng):
    """Fused-gate LSTM weights (i, f, o, g blocks); forget-gate bias +1."""
    limit = 1.0 / np.sqrt(hidden)
    params[f"{prefix}.Wx"] = _uniform(rng, (d_in, 4 * hidden), limit)
    params[f"{prefix}.Wh"] = _uniform(rng, (hidden, 4 * hidden), limit)
    bias = rng.uniform(-limit, limit, size=4 * hidden)
    bias[hidden:2 * hidden] = 1.0
    params[f"{prefix}.b"] = T.Tensor(bias, requires_grad=True)


def _run_lstm(params, prefix, inputs, hidden, reverse=False):
    """One direction over a list of [B, d_in] tensors; returns [B, h] per step."""
    t_len = len(inputs)
    batch = inputs[0].shape[0]
    x = T.concat(inputs, axis=0) if t_len > 1 else inputs[0]
    out = T.lstm_scan(x, params[f"{prefix}.Wx"], params[f"{prefix}.Wh"],
                      params[f"{prefix}.b"], t_len, reverse=reverse)
    return [T.take_rows(out, np.arange(batch) + t * batch) for t in range(t_len)]


def _run_bilstm_flat(params, prefix, x, t_len):
    """Bidirectional layer on a time-major [T*B, d] stack -> [T*B, 2h]."""
    return T.bilstm_scan(x, params[f"{prefix}.fwd.Wx"], params[f"{prefix}.fwd.Wh"],
                         params[f"{prefix}.fwd.b"], params[f"{prefix}.bwd.Wx"],
                         params[f"{prefix}.bwd.Wh"], params[f"{prefix}.bwd.b"], t_len)


def _run_bilstm(params, prefix, inputs, hidden):
    # Both directions read the same time-major stack, so build it once and
    # slice per-step [fwd | bwd] states back out of the joined result.
    t_len = len(inputs)
    batch = inputs[0].shape[0]
    x = T.concat(inputs, axis=0) if t_len > 1 else inputs[0]
    both = _run_bilstm_flat(params, prefix, x, t_len)
    return [T.take_rows(both, np.arange(batch) + t * batch) for t in range(t_len)]


def _reduce_max(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = T.maximum(out, t)
    return out


def _reduce_sum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = T.add(out, t)
    return out


class EmotionClassifier:
    """Holds the parameter map and the batched forward pass."""

    def __init__(self, config: ModelConfig, word_vocab: Vocabulary,
                 char_vocab: Vocabulary, seed: int = 0):
        if config.word_vocab_size == 0:
            config = replace(config, word_vocab_size=len(word_vocab))
        if config.char_vocab_size == 0:
            config = replace(config, char_vocab_size=len(char_vocab))
        if config.word_vocab_size != len(word_vocab) or config.char_vocab_size != len(char_vocab):
            raise ConfigError("config vocab sizes disagree with the supplied vocabularies")
        self.config = config
        self.word_vocab = word_vocab
        self.char_vocab = char_vocab
        self.params: dict[str, T.Tensor] = {}
        self._init_params(spawn_rng(seed, "model-init"))

    def _init_params(self, rng):
        cfg = self.config
        p = self.params
        h = cfg.lstm_hidden_per_direction
        p["emb.word_a"] = _uniform(rng, (cfg.word_vocab_size, cfg.word_emb_dim), 0.1)
        p["emb.word_b"] = _uniform(rng, (cfg.word_vocab_size, cfg.word_emb_dim), 0.1)
        p["emb.char"] = _uniform(rng, (cfg.char_vocab_size, cfg.char_emb_dim), 0.1)
        for w in cfg.char_cnn_filter_widths:
            p[f"cnn.w{w}.filters"] = _glorot(rng, w * cfg.char_emb_dim,
                                             cfg.char_cnn_maps_per_width)
            p[f"cnn.w{w}.bias"] = _zeros(cfg.char_cnn_maps_per_width)
        d_in_a = cfg.word_emb_dim + cfg.char_feature_dim
        d_in_b = cfg.word_emb_dim
        for channel, d_in in (("a", d_in_a), ("b", d_in_b)):
            for layer in range(cfg.lstm_layers):
                # Shortcut stacking: layer k sees the raw input plus every
                # lower layer's bidirectional output.
                layer_in = d_in + layer * 2 * h
                for direction in ("fwd", "bwd"):
                    _init_lstm(p, f"enc{channel}.l{layer}.{direction}", layer_in, h, rng)
        d = cfg.state_dim
        p["att.W1"] = _glorot(rng, d, d)
        p["att.b1"] = _zeros(d)
        p["att.W2"] = _glorot(rng, d, d)
        p["att.b2"] = _zeros(d)
        d_u = cfg.utterance_dim
        hc = cfg.context_lstm_hidden
        for layer in range(cfg.context_lstm_layers):
            layer_in = d_u if layer == 0 else 2 * hc
            for direction in ("fwd", "bwd"):
                _init_lstm(p, f"ctx.l{layer}.{direction}", layer_in, hc, rng)
        d_ctx = cfg.context_dim
        m = cfg.mlp_hidden
        p["mlp.W1"] = _glorot(rng, d_ctx, m)
        p["mlp.b1"] = _zeros(m)
        p["mlp.W2"] = _glorot(rng, d_ctx + m, m)
        p["mlp.b2"] = _zeros(m)
        p["mlp.W3"] = _glorot(rng, d_ctx + 2 * m, N_CLASSES)
        p["mlp.b3"] = _zeros(N_CLASSES)

    # -- building blocks -------------------------------------------------

    def char_features(self, char_ids: np.ndarray) -> T.Tensor:
        """[N, L] char ids -> [N, char_feature_dim] conv + max-pool features.

        Repeated tokens share one convolution: the conv runs on the unique
        char-id rows and the results are gathered back per occurrence, which
        is the same computation because features depend only on the row.
        """
        uniq, inverse = np.unique(char_ids, axis=0, return_inverse=True)
        outputs = []
        for w in self.config.char_cnn_filter_widths:
            outputs.append(T.char_conv_max(self.params["emb.char"], uniq,
                                           self.params[f"cnn.w{w}.filters"],
                                           self.params[f"cnn.w{w}.bias"], w))
        return T.take_rows(T.concat(outputs, axis=1), inverse.reshape(-1))

    def shortcut_stacked_bilstm(self, channel: str, x_flat: T.Tensor, t_len: int) -> T.Tensor:
        """Final layer's bidirectional states for one channel, as a
        time-major [T*B, 2h] stack.

        Shortcut stacking: layer k reads the raw input concatenated with
        every lower layer's output, all kept in the flat layout so no
        per-step splitting happens between layers.
        """
        cfg = self.config
        feed = x_flat
        outputs = []
        for layer in range(cfg.lstm_layers):
            if layer:
                feed = T.concat([x_flat] + outputs, axis=1)
            outputs.append(_run_bilstm_flat(self.params, f"enc{channel}.l{layer}", feed, t_len))
        return outputs[-1]

    def source2token_attention(self, states_flat: T.Tensor, t_len: int, batch: int) -> T.Tensor:
        """Per-dimension attention over time: softmax across the T slots of
        each feature independently, then a weighted sum of the states.

        The two-layer logit map runs once on the [T*B, d] stack; only the
        softmax-and-combine walks the T steps.
        """
        p = self.params
        logits_flat = T.add_bias(
            T.matmul(T.tanh(T.add_bias(T.matmul(states_flat, p["att.W1"]), p["att.b1"])),
                     p["att.W2"]), p["att.b2"])
        base = np.arange(batch)
        logits = [T.take_rows(logits_flat, base + t * batch) for t in range(t_len)]
        states = [T.take_rows(states_flat, base + t * batch) for t in range(t_len)]
        peak = _reduce_max(logits)
        exps = [T.exp(T.sub(l, peak)) for l in logits]
        total = _reduce_sum(exps)
        return _reduce_sum([T.mul(T.div(e, total), s) for e, s in zip(exps, states)])

    def encode_utterance(self, word_ids: np.ndarray, char_ids: np.ndarray,
                         training: bool = False, rng=None) -> T.Tensor:
        """[B, T] word ids + [B, T, L] char ids -> [B, utterance_dim]."""
        cfg = self.config
        batch, t_len = word_ids.shape
        # Time-major flat layout: row t*B+b is step t of conversation b.
        flat_ids = word_ids.T.reshape(batch * t_len)
        wa = T.dropout(T.embedding_lookup(self.params["emb.word_a"], flat_ids),
                       cfg.dropout_p, training, rng)
        wb = T.dropout(T.embedding_lookup(self.params["emb.word_b"], flat_ids),
                       cfg.dropout_p, training, rng)
        char_flat = char_ids.transpose(1, 0, 2).reshape(batch * t_len, -1)
        a_flat = T.concat([wa, self.char_features(char_flat)], axis=1)
        out_a = self.shortcut_stacked_bilstm("a", a_flat, t_len)
        out_b = self.shortcut_stacked_bilstm("b", wb, t_len)
        states_flat = T.concat([out_a, out_b], axis=1)
        pooled = _reduce_max([T.take_rows(states_flat, np.arange(batch) + t * batch)
                              for t in range(t_len)])
        return T.concat([self.source2token_attention(states_flat, t_len, batch), pooled],
                        axis=1)

    def encode_context(self, u1: T.Tensor, u2: T.Tensor, u3: T.Tensor) -> T.Tensor:
        """Concatenation of the three utterance vectors, u1-u2+u3, and the
        context BiLSTM summary."""
        if not (u1.shape == u2.shape == u3.shape):
            raise ContractError(f"utterance dims disagree: {u1.shape}, {u2.shape}, {u3.shape}")
        cfg = self.config
        hc = cfg.context_lstm_hidden
        states = [u1, u2, u3]
        for layer in range(cfg.context_lstm_layers):
            states = _run_bilstm(self.params, f"ctx.l{layer}", states, hc)
        if cfg.context_summary == "max_pool":
            summary = _reduce_max(states)
        else:
            summary = T.concat([T.slice_cols(states[-1], 0, hc),
                                T.slice_cols(states[0], hc, 2 * hc)], axis=1)
        combo = T.add(T.sub(u1, u2), u3)
        return T.concat([u1, u2, u3, combo, summary], axis=1)

    def classify(self, context: T.Tensor) -> T.Tensor:
        """MLP head with shortcut connections; returns [B, 4] logits."""
        p = self.params
        h1 = T.relu(T.add_bias(T.matmul(context, p["mlp.W1"]), p["mlp.b1"]))
        h2 = T.relu(T.add_bias(T.matmul(T.concat([context, h1], axis=1), p["mlp.W2"]),
                    p["mlp.b2"]))
        return T.add_bias(T.matmul(T.concat([context, h1, h2], axis=1), p["mlp.W3"]),
                          p["mlp.b3"])

    # -- end-to-end ------------------------------------------------------

    def forward_batch(self, batch: EncodedBatch, training: bool = False, rng=None) -> T.Tensor:
        # The encoder is shared across turns, so all three run as one stacked
        # batch of 3B rows; the turn vectors are sliced back out afterwards.
        t_max = max(w.shape[1] for w in batch.word_ids)
        l_max = max(c.shape[2] for c in batch.char_ids)
        words = np.vstack([
            np.pad(w, ((0, 0), (0, t_max - w.shape[1])), constant_values=PAD_ID)
            for w in batch.word_ids])
        chars = np.vstack([
            np.pad(c, ((0, 0), (0, t_max - c.shape[1]), (0, l_max - c.shape[2])),
                   constant_values=PAD_ID)
            for c in batch.char_ids])
        stacked = self.encode_utterance(words, chars, training, rng)
        size = batch.size
        us = [T.take_rows(stacked, np.arange(m * size, (m + 1) * size))
              for m in range(3)]
        return self.classify(self.encode_context(*us))

    def encode_conversations(self, conversations: Sequence[Conversation]) -> EncodedBatch:
        cfg = self.config
        return encode_batch(conversations, self.word_vocab, self.char_vocab,
                            max_turn_len=cfg.max_turn_len, max_word_len=cfg.max_word_len,
                            min_word_len=cfg.min_word_len)

    def predict_proba(self, conversations: Sequence[Conversation],
                      batch_size: int = 64) -> np.ndarray:
        """[N, 4] posterior probabilities; deterministic (no dropout, no graph)."""
        rows = []
        with T.no_grad():
            for lo in range(0, len(conversations), batch_size):
                chunk = conversations[lo:lo + batch_size]
                logits = self.forward_batch(self.encode_conversations(chunk))
                rows.append(T.softmax(logits, axis=1).values)
        return np.vstack(rows)

    def predict(self, conversations: Sequence[Conversation],
                batch_size: int = 64) -> list[PredictionVector]:
        return [PredictionVector(row) for row in self.predict_proba(conversations, batch_size)]

    # -- persistence -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ContractError("checkpoint parameter names do not match the model")
        for name, values in arrays.items():
            if values.shape != self.params[name].values.shape:
                raise ContractError(f"shape mismatch for {name}")
            self.params[name].values = values.astype(np.float64).copy()

    def save(self, path) -> None:
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_json(),
            "word_vocab": self.word_vocab.to_json(),
            "char_vocab": self.char_vocab.to_json(),
            "checkpoint": T.params_to_dict(self.params),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "EmotionClassifier":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != MODEL_FORMAT:
            raise ContractError(f"not a {MODEL_FORMAT} file")
        model = cls(ModelConfig.from_json(payload["config"]),
                    Vocabulary.from_json(payload["word_vocab"]),
                    Vocabulary.from_json(payload["char_vocab"]))
        model.load_state_arrays(T.params_from_dict(payload["checkpoint"]))
        return model


class Ensemble:
    """Bag of trained classifiers combined per example.

    prob_mean averages member posteriors; majority_vote takes the modal
    member decision. Inference-time thresholding is applied downstream to
    the combined scores, which for the linear p_s/p_r rescaling decides
    identically to thresholding each member first.
    """

    def __init__(self, members: Sequence[EmotionClassifier], combine: str = "prob_mean"):
        if not members:
            raise ContractError("ensemble needs at least one member")
        self.members = list(members)
        self.combine = combine

    def predict_proba(self, conversations: Sequence[Conversation],
                      batch_size: int = 64) -> np.ndarray:
        stacked = [m.predict_proba(conversations, batch_size) for m in self.members]
        return np.mean(stacked, axis=0)

    def predict(self, conversations: Sequence[Conversation],
                batch_size: int = 64) -> list[PredictionVector]:
        per_member = [m.predict(conversations, batch_size) for m in self.members]
        return bag_ensemble(per_member, self.combine)
