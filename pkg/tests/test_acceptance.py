"""Headline checks for the whole package, one test per claim.

Each test prints a single [PASS]/[FAIL] line with the measured numbers, so a
plain pytest run doubles as the project's scorecard. The benchmark-backed
claims share one full comparison run through a session fixture.
"""
import contextlib
import io
import json
import time

import numpy as np
import pytest

import priorshift.tensor as T
from priorshift.benchmark import ExperimentConfig, load_data, run_compare
from priorshift.cli import main as cli_main
from priorshift.correction import (CorrectionSpec, PredictionVector, class_weights,
                                   resample, threshold_adjust)
from priorshift.data import (CLASSES, ClassDistribution, Conversation,
                             GeneratorConfig, Vocabulary, char_token_iter,
                             largest_remainder_counts, word_token_iter)
from priorshift.model import EmotionClassifier, ModelConfig
from priorshift.training import TrainConfig, train, weighted_cross_entropy

from gradcheck import fd_gradient, fd_gradient_sample, relative_errors


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

def _signed(rng, shape, low=0.2, high=2.0):
    """Values bounded away from zero, so kinked ops see no crossings."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_registry(rng):
    """(name, input arrays, forward fn) for every differentiable operation."""
    b23 = [rng.uniform(0.5, 2.0, size=(2, 3)) for _ in range(2)]
    entries = [
        ("add", b23, T.add),
        ("sub", b23, T.sub),
        ("mul", b23, T.mul),
        ("div", b23, T.div),
        ("add_bias", [rng.standard_normal((3, 4)), rng.standard_normal(4)], T.add_bias),
        ("neg", [rng.standard_normal((2, 3))], T.neg),
        ("tanh", [rng.standard_normal((2, 3))], T.tanh),
        ("sigmoid", [rng.standard_normal((2, 3))], T.sigmoid),
        ("relu", [_signed(rng, (3, 4))], T.relu),
        ("exp", [rng.uniform(-1, 1, size=(2, 3))], T.exp),
        ("log", [rng.uniform(0.3, 3.0, size=(2, 3))], T.log),
        ("maximum", [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))],
         T.maximum),
        ("matmul", [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
         T.matmul),
        ("concat", [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))],
         lambda a, b: T.concat([a, b], axis=-1)),
        ("slice_cols", [rng.standard_normal((3, 5))],
         lambda a: T.slice_cols(a, 1, 4)),
        ("take_rows", [rng.standard_normal((4, 3))],
         lambda a: T.take_rows(a, np.array([0, 2, 2, 1]))),
        ("tsum", [rng.standard_normal((3, 3))], T.tsum),
        ("mean", [rng.standard_normal((3, 3))], T.mean),
        ("softmax", [rng.standard_normal((3, 4))], T.softmax),
        ("max_pool_time", [rng.standard_normal((5, 3))], T.max_pool_time),
        ("embedding_lookup", [rng.standard_normal((6, 3))],
         lambda t: T.embedding_lookup(t, np.array([[0, 2, 5], [1, 1, 4]]))),
        ("dropout", [rng.standard_normal((4, 5))],
         lambda a: T.dropout(a, 0.3, True, np.random.default_rng(99))),
        ("char_conv_max",
         [rng.standard_normal((8, 3)), rng.standard_normal((6, 2)),
          rng.standard_normal(2)],
         lambda tab, f, b: T.char_conv_max(
             tab, np.array([[0, 3, 1, 7, 2], [5, 2, 2, 0, 6]]), f, b, 2)),
        ("lstm_cell",
         [rng.standard_normal((2, 4)), rng.standard_normal((2, 3)),
          rng.standard_normal((2, 3)), rng.standard_normal((4, 12)),
          rng.standard_normal((3, 12)), rng.standard_normal(12)],
         T.lstm_cell),
        ("lstm_scan",
         [rng.standard_normal((6, 3)), rng.standard_normal((3, 8)),
          rng.standard_normal((2, 8)), rng.standard_normal(8)],
         lambda x, wx, wh, b: T.lstm_scan(x, wx, wh, b, t_len=3)),
        ("lstm_scan_reverse",
         [rng.standard_normal((6, 3)), rng.standard_normal((3, 8)),
          rng.standard_normal((2, 8)), rng.standard_normal(8)],
         lambda x, wx, wh, b: T.lstm_scan(x, wx, wh, b, t_len=3, reverse=True)),
        ("bilstm_scan",
         [rng.standard_normal((6, 3))]
         + [rng.standard_normal(s) for s in
            ((3, 8), (2, 8), 8, (3, 8), (2, 8), 8)],
         lambda x, *w: T.bilstm_scan(x, *w, t_len=3)),
        ("weighted_cross_entropy_logits",
         [rng.standard_normal((4, 4))],
         lambda lg: T.weighted_cross_entropy_logits(
             lg, np.array([0, 3, 1, 2]), np.array([0.3, 0.3, 0.3, 1.7]))),
    ]
    return entries


def _check_op(inputs, forward, rng, step, tol):
    tensors = [T.Tensor(v.copy(), requires_grad=True) for v in inputs]
    out = forward(*tensors)
    if out.values.ndim:
        # Mix with fixed coefficients: a plain sum has blind spots (softmax
        # rows always sum to one, so its summed gradient vanishes).
        mix = T.Tensor(rng.standard_normal(out.values.shape))
        T.tsum(T.mul(out, mix)).backward()
    else:
        mix = None
        out.backward()

    def loss_of():
        o = forward(*[T.Tensor(v) for v in inputs])
        return float((T.tsum(T.mul(o, mix)) if mix is not None else o).values)

    worst = 0.0
    for k, tensor in enumerate(tensors):
        fd = fd_gradient(loss_of, inputs[k], step)
        worst = max(worst, float(relative_errors(tensor.grad, fd).max()))
    assert worst < tol
    return worst


def _tiny_model():
    rng = np.random.default_rng(5)
    words = ["glad", "fine", "rain", "gray", "mad", "why", "ok", "sun"]
    corpus = []
    for i in range(4):
        turns = tuple(
            [str(w) for w in rng.choice(words, size=int(rng.integers(2, 5)))]
            for _ in range(3))
        corpus.append(Conversation(f"a-{i}", turns, CLASSES[i % 4]))
    config = ModelConfig(word_emb_dim=5, char_emb_dim=4,
                         char_cnn_filter_widths=(1, 2), char_cnn_maps_per_width=3,
                         lstm_hidden_per_direction=3, lstm_layers=2,
                         context_lstm_hidden=3, context_lstm_layers=1,
                         mlp_hidden=7, max_turn_len=6, max_word_len=5)
    model = EmotionClassifier(config, Vocabulary.build(word_token_iter(corpus)),
                              Vocabulary.build(char_token_iter(corpus)), seed=5)
    return model, corpus


def test_every_gradient_matches_finite_differences(capsys):
    started = time.perf_counter()
    rng = np.random.default_rng(4242)
    per_op_worst = 0.0
    entries = _op_registry(rng)
    for name, inputs, forward in entries:
        worst = _check_op(inputs, forward, rng, step=1e-3, tol=1e-4)
        per_op_worst = max(per_op_worst, worst)

    model, corpus = _tiny_model()
    batch = model.encode_conversations(corpus)
    weights = np.array([0.3, 0.3, 0.3, 1.7])

    def loss_value():
        return float(T.weighted_cross_entropy_logits(
            model.forward_batch(batch), batch.labels, weights).values)

    T.weighted_cross_entropy_logits(model.forward_batch(batch), batch.labels,
                                    weights).backward()
    coord_errors = []
    sample_rng = np.random.default_rng(7)
    for name, tensor in model.params.items():
        coords, fd = fd_gradient_sample(loss_value, tensor.values, sample_rng, 8,
                                        step=1e-3)
        analytic = tensor.grad.reshape(-1)[coords]
        coord_errors.extend(relative_errors(analytic, fd).tolist())
    coord_errors = np.array(coord_errors)
    hit_rate = float(np.mean(coord_errors < 1e-3))
    elapsed = time.perf_counter() - started

    ok = per_op_worst < 1e-4 and hit_rate >= 0.99 and elapsed < 60.0
    report(capsys, "gradient checks", ok,
           f"{len(entries)} ops worst rel err {per_op_worst:.2e} (tol 1e-4); "
           f"end-to-end {hit_rate:.1%} of {coord_errors.size} sampled coords "
           f"within 1e-3; {elapsed:.1f}s (budget 60s)")


# ---------------------------------------------------------------------------
# Correction algebra
# ---------------------------------------------------------------------------

def test_cost_weights_equal_threshold_factors(capsys):
    rng = np.random.default_rng(31)
    identical = 0
    for _ in range(100):
        p_r = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)))
        p_s = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)))
        weights = class_weights(p_r, p_s)
        # Unit scores turn the adjusted vector into the bare factor vector.
        factors = threshold_adjust(PredictionVector(np.ones(4), normalized=False),
                                   p_r, p_s).probs
        identical += int(np.array_equal(weights, factors))

    unchanged = 0
    for _ in range(1000):
        shared = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)))
        vec = PredictionVector(rng.dirichlet(np.ones(4)))
        adjusted = threshold_adjust(vec, shared, shared)
        unchanged += int(adjusted.predicted_class == vec.predicted_class)

    ok = identical == 100 and unchanged == 1000
    report(capsys, "cost weights = threshold factors", ok,
           f"{identical}/100 pairs bitwise-identical; equal-priors argmax "
           f"unchanged on {unchanged}/1000 vectors")


def test_resampling_matches_largest_remainder(capsys):
    rng = np.random.default_rng(32)
    worst_gap = 0
    originals_kept = 0
    for case in range(100):
        counts = rng.integers(1, 40, size=4)
        corpus = [Conversation(f"{case}-{c}-{i}", (["a"], ["b"], ["c"]), CLASSES[c])
                  for c in range(4) for i in range(counts[c])]
        target = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)))
        mode = "over" if case % 2 == 0 else "under"
        result = resample(corpus, target, mode, seed=case)
        achieved = np.bincount([c.label_index for c in result], minlength=4)
        expected = largest_remainder_counts(len(result), target.probs)
        worst_gap = max(worst_gap, int(np.abs(achieved - expected).max()))
        if mode == "over":
            ids = [c.id for c in result]
            originals_kept += int(all(c.id in set(ids) for c in corpus))

    ok = worst_gap <= 1 and originals_kept == 50
    report(capsys, "resampling ratios", ok,
           f"100 cases within +-{worst_gap} of largest-remainder targets; "
           f"oversampling kept all originals in {originals_kept}/50 cases")


def test_weighted_loss_unit_values(capsys):
    probs = np.array([0.5, 0.3, 0.1, 0.1])
    loss = weighted_cross_entropy([probs], [0], np.array([1.7, 1.0, 1.0, 1.0]))
    worked_gap = abs(loss - 1.7 * np.log(2.0))

    rng = np.random.default_rng(33)
    ones_gap = 0.0
    for _ in range(20):
        batch = rng.dirichlet(np.ones(4), size=12)
        labels = rng.integers(0, 4, size=12)
        weighted = weighted_cross_entropy(batch, labels, np.ones(4))
        plain = -float(np.mean(np.log(batch[np.arange(12), labels])))
        ones_gap = max(ones_gap, abs(weighted - plain))

    ok = worked_gap < 1e-12 and ones_gap < 1e-12
    report(capsys, "loss unit values", ok,
           f"w=1.7, p=0.5 example off by {worked_gap:.1e}; all-ones weights "
           f"match unweighted within {ones_gap:.1e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# Capacity and determinism
# ---------------------------------------------------------------------------

def test_model_memorizes_noise_free_corpus(capsys):
    started = time.perf_counter()
    uniform = ClassDistribution.from_probs((0.25, 0.25, 0.25, 0.25))
    config = ExperimentConfig(
        generator=GeneratorConfig(noise_rate=0.0, template_overlap=0.0),
        train=TrainConfig(max_epochs=200, patience=0),
        n_train=200, n_dev=8, n_test=8,
        train_priors=uniform, eval_priors=uniform)
    train_set, _, _ = load_data(config)
    model = EmotionClassifier(config.model,
                              Vocabulary.build(word_token_iter(train_set)),
                              Vocabulary.build(char_token_iter(train_set)), seed=0)
    result = train(model, train_set, train_set, config.train)
    accs = [row["train_acc"] for row in result.history]
    best = max(accs)
    hit_epoch = next((i + 1 for i, a in enumerate(accs) if a >= 0.99), None)
    elapsed = time.perf_counter() - started

    ok = best >= 0.99 and len(result.history) <= 200 and elapsed < 120.0
    report(capsys, "capacity", ok,
           f"train accuracy {best:.3f} on 200 noise-free examples "
           f"(>=0.99 first hit at epoch {hit_epoch}); {elapsed:.1f}s (budget 120s)")


def _determinism_config():
    return ExperimentConfig(
        generator=GeneratorConfig(vocab_size=60, templates_per_class=3),
        model=ModelConfig(word_emb_dim=5, char_emb_dim=4,
                          char_cnn_filter_widths=(1, 2), char_cnn_maps_per_width=3,
                          lstm_hidden_per_direction=3, lstm_layers=1,
                          context_lstm_hidden=3, context_lstm_layers=1,
                          mlp_hidden=7, max_turn_len=6, max_word_len=5),
        train=TrainConfig(max_epochs=2, patience=0, batch_size=16),
        n_train=60, n_dev=32, n_test=32, n_seeds=2, ensemble_members=2, seed=3)


def test_compare_rerun_is_byte_identical(capsys, tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(_determinism_config().to_json()),
                        encoding="utf-8")
    outs = []
    for leg in ("first", "second"):
        out = tmp_path / leg
        with contextlib.redirect_stdout(io.StringIO()):
            rc = cli_main(["compare", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        outs.append(out)

    csvs = ["single_models.csv", "ensembles.csv", "distributions.csv", "runs.csv",
            "history_baseline_run0.csv"]
    identical = [name for name in csvs
                 if (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()]
    manifests = [json.loads((o / "manifest.json").read_text()) for o in outs]
    stamps = [m.pop("created") for m in manifests]

    ok = len(identical) == len(csvs) and manifests[0] == manifests[1]
    report(capsys, "determinism", ok,
           f"{len(identical)}/{len(csvs)} CSVs byte-identical across a rerun; "
           f"manifests differ only in the timestamp "
           f"({'distinct' if stamps[0] != stamps[1] else 'equal'} stamps)")


# ---------------------------------------------------------------------------
# Benchmark-backed claims (one shared full run)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    config = ExperimentConfig()
    started = time.perf_counter()
    result = run_compare(config, out)
    elapsed = time.perf_counter() - started
    return config, result, elapsed


def _single_means(result):
    return {agg.method: agg for agg in result.single_models}


def test_correction_shrinks_distribution_gap(capsys, benchmark_run):
    config, result, elapsed = benchmark_run
    agg = _single_means(result)
    base = agg["baseline"].tv_distance_mean
    gaps = {m: agg[m].tv_distance_mean
            for m in ("oversample", "threshold", "cost_sensitive")}
    # The budget covers producing these per-seed method means; the bagged
    # ensembles timed separately are a different claim with no budget.
    phase = result.timings["single_runs"]
    ok = (config.n_seeds >= 10 and phase < 600.0
          and all(v < base for v in gaps.values()))
    detail = ", ".join(f"{m} {v:.4f}" for m, v in gaps.items())
    report(capsys, "distribution gap", ok,
           f"baseline TV {base:.4f} vs {detail} over {config.n_seeds} seeds; "
           f"{phase:.0f}s for the per-seed runs (budget 600s), "
           f"{elapsed:.0f}s with ensembles and reports")


def test_correction_lifts_emotional_f1(capsys, benchmark_run):
    _, result, _ = benchmark_run
    agg = _single_means(result)
    base = agg["baseline"].micro_f1_mean
    lifts = {m: agg[m].micro_f1_mean - base
             for m in ("threshold", "cost_sensitive", "oversample")}
    ok = all(v > 0 for v in lifts.values())
    detail = ", ".join(f"{m} {v:+.4f}" for m, v in lifts.items())
    report(capsys, "single-model F1", ok,
           f"baseline {base:.4f}; margins {detail} (undersampling exempt)")


def test_ensembles_meet_their_single_model_means(capsys, benchmark_run):
    config, result, _ = benchmark_run
    agg = _single_means(result)
    ensembles = {r.method: r for r in result.ensembles}
    deltas = {}
    for method in ("baseline", "oversample", "undersample", "threshold",
                   "cost_sensitive"):
        deltas[method] = (ensembles[method].micro_f1_emotional
                          - agg[method].micro_f1_mean)
    ok = all(v >= 0 for v in deltas.values())
    detail = ", ".join(f"{m} {v:+.4f}" for m, v in deltas.items())
    report(capsys, "ensemble uplift", ok,
           f"{config.ensemble_members}-member ensembles vs single means: {detail}")
