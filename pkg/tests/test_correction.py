"""Correction operators: resampling, thresholding, cost weights, bagging."""
import numpy as np
import pytest

from priorshift.correction import (METHODS, CorrectionSpec, PredictionVector,
                                   bag_ensemble, class_weights, make_bags, resample,
                                   threshold_adjust)
from priorshift.data import (CLASSES, ClassDistribution, Conversation,
                             estimate_distribution, largest_remainder_counts)
from priorshift.errors import ConfigError, ContractError

P_R = ClassDistribution.from_probs((1 / 6, 1 / 6, 1 / 6, 0.5))
P_S = ClassDistribution.from_probs((0.05, 0.05, 0.05, 0.85))


def corpus(counts):
    """Labeled dummy conversations with the requested per-class counts."""
    out = []
    for c, n in enumerate(counts):
        for i in range(n):
            out.append(Conversation(f"{CLASSES[c]}-{i}", (["a"], ["b"], ["c"]), CLASSES[c]))
    return out


def label_counts(convs):
    return np.bincount([c.label_index for c in convs], minlength=4).tolist()


class TestCorrectionSpec:
    def test_methods_roster(self):
        assert METHODS == ("none", "oversample", "undersample", "threshold",
                           "cost_sensitive")

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            CorrectionSpec("downsample", P_R, P_S)

    def test_zero_train_prior_rejected_for_ratio_methods(self):
        p_r = ClassDistribution.from_probs((0.0, 0.2, 0.3, 0.5))
        with pytest.raises(ConfigError):
            CorrectionSpec("threshold", p_r, P_S)
        with pytest.raises(ConfigError):
            CorrectionSpec("cost_sensitive", p_r, P_S)
        CorrectionSpec("oversample", p_r, P_S)  # sampling methods unaffected

    def test_json_round_trip(self):
        spec = CorrectionSpec("threshold", P_R, P_S, seed=11)
        again = CorrectionSpec.from_json(spec.to_json())
        assert again.method == "threshold" and again.seed == 11
        assert np.array_equal(again.p_r.probs, P_R.probs)


class TestPredictionVector:
    def test_argmax_tie_breaks_low(self):
        assert PredictionVector((0.4, 0.4, 0.1, 0.1)).predicted_class == 0
        assert PredictionVector((0.1, 0.4, 0.4, 0.1)).predicted_class == 1

    def test_override_wins(self):
        p = PredictionVector((0.7, 0.1, 0.1, 0.1), predicted_class=3)
        assert p.predicted_class == 3

    def test_validation(self):
        with pytest.raises(ContractError):
            PredictionVector((0.5, 0.5))
        with pytest.raises(ContractError):
            PredictionVector((0.9, 0.2, -0.1, 0.0))
        with pytest.raises(ContractError):
            PredictionVector((0.9, 0.3, 0.1, 0.1))
        PredictionVector((0.9, 0.3, 0.1, 0.1), normalized=False)  # raw scores ok


class TestClassWeights:
    def test_benchmark_priors_give_point_three_and_one_seven(self):
        w = class_weights(P_R, P_S)
        assert w == pytest.approx([0.3, 0.3, 0.3, 1.7], abs=1e-12)

    def test_identity_when_priors_match(self):
        assert np.array_equal(class_weights(P_R, P_R), np.ones(4))

    def test_equals_threshold_factor_exactly(self):
        """Same vector drives both corrections; equality must be bitwise."""
        rng = np.random.default_rng(31)
        for _ in range(25):
            p_r = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)) * 0.98 + 0.005)
            p_s = ClassDistribution.from_probs(rng.dirichlet(np.ones(4)) * 0.98 + 0.005)
            w = class_weights(p_r, p_s)
            probs = rng.dirichlet(np.ones(4))
            adjusted = threshold_adjust(PredictionVector(probs), p_r, p_s)
            assert np.array_equal(adjusted.probs, w * probs)

    def test_zero_prior_rejected(self):
        with pytest.raises(ContractError):
            class_weights(ClassDistribution.from_probs((0, 0.2, 0.3, 0.5)), P_S)


class TestThresholdAdjust:
    def test_adjustment_flips_borderline_happy_to_others(self):
        adjusted = threshold_adjust(PredictionVector((0.40, 0.30, 0.20, 0.10)), P_R, P_S)
        assert adjusted.probs == pytest.approx([0.12, 0.09, 0.06, 0.17], abs=1e-12)
        assert adjusted.predicted_class == 3
        assert not adjusted.normalized

    def test_confident_happy_survives(self):
        adjusted = threshold_adjust(PredictionVector((0.60, 0.20, 0.10, 0.10)), P_R, P_S)
        assert adjusted.probs == pytest.approx([0.18, 0.06, 0.03, 0.17], abs=1e-12)
        assert adjusted.predicted_class == 0

    def test_matching_priors_keep_argmax(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            probs = rng.dirichlet(np.ones(4))
            p = PredictionVector(probs)
            assert threshold_adjust(p, P_S, P_S).predicted_class == p.predicted_class

    def test_renormalize_returns_distribution(self):
        adjusted = threshold_adjust(PredictionVector((0.40, 0.30, 0.20, 0.10)), P_R, P_S,
                                    renormalize=True)
        assert adjusted.normalized
        assert adjusted.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert adjusted.predicted_class == 3

    def test_zero_prior_with_mass_rejected(self):
        p_r = ClassDistribution.from_probs((0.0, 0.2, 0.3, 0.5))
        with pytest.raises(ContractError):
            threshold_adjust(PredictionVector((0.4, 0.2, 0.2, 0.2)), p_r, P_S)


class TestResample:
    def test_oversample_reaches_17000(self):
        train = corpus((1000, 1000, 1000, 3000))
        out = resample(train, P_S, "over", seed=4)
        assert label_counts(out) == [1000, 1000, 1000, 17000]

    def test_oversample_preserves_every_original(self):
        train = corpus((30, 20, 10, 60))
        out = resample(train, P_S, "over", seed=5)
        out_ids = {id(c) for c in out}
        assert all(id(c) in out_ids for c in train)

    def test_undersample_reaches_176(self):
        train = corpus((1000, 1000, 1000, 3000))
        out = resample(train, P_S, "under", seed=6)
        assert label_counts(out) == [176, 176, 176, 3000]

    def test_undersample_never_duplicates_and_keeps_order(self):
        train = corpus((50, 50, 50, 150))
        out = resample(train, P_S, "under", seed=7)
        kept = [c.id for c in out]
        assert len(kept) == len(set(kept))
        positions = {c.id: i for i, c in enumerate(train)}
        assert kept == sorted(kept, key=positions.__getitem__)

    def test_identity_target_is_noop_both_modes(self):
        train = corpus((10, 10, 10, 30))
        current = estimate_distribution(train)
        for mode in ("over", "under"):
            out = resample(train, current, mode, seed=8)
            assert [c.id for c in out] == [c.id for c in train]

    def test_random_cases_match_largest_remainder_within_one(self):
        rng = np.random.default_rng(33)
        for _ in range(20):
            counts = rng.integers(5, 80, size=4)
            target = ClassDistribution.from_probs(rng.dirichlet(np.ones(4) * 3))
            train = corpus(counts.tolist())
            for mode in ("over", "under"):
                out = resample(train, target, mode, seed=int(rng.integers(1 << 16)))
                achieved = np.array(label_counts(out))
                expected = largest_remainder_counts(int(achieved.sum()), target.probs)
                assert np.all(np.abs(achieved - expected) <= 1)

    def test_deterministic_per_seed(self):
        train = corpus((9, 9, 9, 23))
        a = resample(train, P_S, "under", seed=12)
        b = resample(train, P_S, "under", seed=12)
        c = resample(train, P_S, "under", seed=13)
        assert [x.id for x in a] == [x.id for x in b]
        assert [x.id for x in a] != [x.id for x in c]

    def test_error_paths(self):
        train = corpus((5, 5, 5, 15))
        with pytest.raises(ConfigError):
            resample(train, P_S, "sideways", seed=0)
        with pytest.raises(ConfigError):
            resample(corpus((0, 5, 5, 15)), P_S, "over", seed=0)
        zero_target = ClassDistribution.from_probs((0.0, 0.1, 0.1, 0.8))
        with pytest.raises(ConfigError):
            resample(train, zero_target, "over", seed=0)


class TestBagEnsemble:
    def test_single_member_identity(self):
        member = [PredictionVector((0.7, 0.1, 0.1, 0.1))]
        out = bag_ensemble([member])
        assert np.array_equal(out[0].probs, member[0].probs)

    def test_prob_mean_tie_breaks_low(self):
        a = [PredictionVector((1.0, 0.0, 0.0, 0.0))]
        b = [PredictionVector((0.0, 0.0, 0.0, 1.0))]
        out = bag_ensemble([a, b], combine="prob_mean")
        assert out[0].probs == pytest.approx([0.5, 0.0, 0.0, 0.5])
        assert out[0].predicted_class == 0

    def test_majority_vote(self):
        happy = PredictionVector((0.6, 0.2, 0.1, 0.1))
        others = PredictionVector((0.1, 0.1, 0.1, 0.7))
        out = bag_ensemble([[happy], [happy], [others]], combine="majority_vote")
        assert out[0].predicted_class == 0

    def test_majority_vote_tie_uses_mean_probs(self):
        confident_sad = PredictionVector((0.0, 0.9, 0.05, 0.05))
        weak_happy = PredictionVector((0.4, 0.3, 0.15, 0.15))
        out = bag_ensemble([[weak_happy], [confident_sad]], combine="majority_vote")
        assert out[0].predicted_class == 1  # mean prob favors sad

    def test_errors(self):
        with pytest.raises(ContractError):
            bag_ensemble([])
        with pytest.raises(ContractError):
            bag_ensemble([[PredictionVector((1, 0, 0, 0))], []])
        with pytest.raises(ConfigError):
            bag_ensemble([[PredictionVector((1, 0, 0, 0))]], combine="median")


class TestMakeBags:
    def test_bootstrap_size_and_membership(self):
        train = corpus((10, 10, 10, 30))
        bags = make_bags(train, 3, CorrectionSpec("none", P_R, P_S), seed=14)
        originals = {c.id for c in train}
        assert len(bags) == 3
        for bag in bags:
            assert len(bag) == len(train)
            assert {c.id for c in bag} <= originals

    def test_same_seed_identical(self):
        train = corpus((8, 8, 8, 24))
        spec = CorrectionSpec("undersample", P_R, P_S)
        first = make_bags(train, 4, spec, seed=15)
        second = make_bags(train, 4, spec, seed=15)
        assert [[c.id for c in bag] for bag in first] == \
               [[c.id for c in bag] for bag in second]

    def test_oversample_bags_hit_target_within_one(self):
        train = corpus((40, 40, 40, 120))
        bags = make_bags(train, 5, CorrectionSpec("oversample", P_R, P_S), seed=16)
        for bag in bags:
            achieved = np.array(label_counts(bag))
            expected = largest_remainder_counts(int(achieved.sum()), P_S.probs)
            assert np.all(np.abs(achieved - expected) <= 1)

    def test_member_count_validated(self):
        with pytest.raises(ContractError):
            make_bags(corpus((2, 2, 2, 6)), 0, CorrectionSpec("none", P_R, P_S), seed=0)
