"""Feature space, NNAA and the two sequence-model scores."""

import numpy as np
import pytest

from mixdiff.data import TimeSeriesSample, compute_stats, make_mixed_corpus, make_sine_corpus
from mixdiff.evaluation import (FeatureSpace, MetricConfig, NNAAReport,
                                discriminative_score, nn_distances, nnaa,
                                nnaa_corpora, predictive_score)

QUICK = MetricConfig(steps=300, batch=32, hidden=8, seed=5)


def tiny_corpus(n=40, seed=0):
    return make_mixed_corpus(n=n, num_channels=1, cat_channels=1,
                             num_categories=2, length=12, missing_rate=0.1,
                             seed=seed)


class TestFeatureSpace:
    def test_feature_layout_hand_built(self):
        x = np.array([[0.0, np.nan, 2.0]])
        m = np.array([[0, 1, 0]])
        c = np.array([[1, 0, 1]])
        s = TimeSeriesSample(x=x, c=c, m=m)
        space = FeatureSpace.from_corpus([s], cat_ks=(2,))
        raw = space._raw_features([s], space.layout, space.stats)
        # width: 1 numeric + 2 one-hot + 1 mask bit
        assert raw.shape == (1, 3, 4)
        assert np.allclose(raw[0, :, 0], [0.0, 0.5, 1.0])  # mean-imputed, scaled
        assert raw[0, :, 1:3].tolist() == [[0, 1], [1, 0], [0, 1]]
        assert raw[0, :, 3].tolist() == [0, 1, 0]

    def test_standardization_on_reference_corpus(self):
        corpus = tiny_corpus(60)
        space = FeatureSpace.from_corpus(corpus)
        feats = space.seq_features(corpus)
        flat = feats.reshape(-1, feats.shape[-1])
        assert np.abs(flat.mean(axis=0)).max() < 1e-9
        # constant features are guarded by the std floor, others hit 1
        active = flat.std(axis=0) > 1e-6
        assert np.allclose(flat[:, active].std(axis=0), 1.0)

    def test_flat_features_shape(self):
        corpus = tiny_corpus(8)
        space = FeatureSpace.from_corpus(corpus)
        assert space.flat_features(corpus).shape == (8, 12 * 4)

    def test_layout_mismatch_rejected(self):
        corpus = tiny_corpus(8)
        space = FeatureSpace.from_corpus(corpus)
        other = make_sine_corpus(4, num_channels=2, length=12, seed=0)
        with pytest.raises(ValueError, match="layout"):
            space.seq_features(other)

    def test_out_of_range_category_rejected(self):
        corpus = tiny_corpus(8)
        space = FeatureSpace.from_corpus(corpus)
        bad = TimeSeriesSample(x=corpus[0].x, c=corpus[0].c + 5,
                               m=corpus[0].m)
        with pytest.raises(ValueError, match="categories"):
            space.seq_features([bad])


class TestNNDistances:
    def test_hand_example(self):
        a = np.array([[0.0], [10.0]])
        b = np.array([[1.0], [4.0]])
        assert nn_distances(a, b).tolist() == [1.0, 6.0]

    def test_exclude_self_finds_nearest_other(self):
        a = np.array([[0.0], [0.0], [5.0]])
        d = nn_distances(a, a, exclude_self=True)
        assert d.tolist() == [0.0, 0.0, 5.0]

    def test_errors(self):
        with pytest.raises(ValueError, match="feature space"):
            nn_distances(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ValueError, match="one set"):
            nn_distances(np.zeros((2, 3)), np.zeros((3, 3)), exclude_self=True)
        with pytest.raises(ValueError, match="2 rows"):
            nn_distances(np.zeros((1, 3)), np.zeros((1, 3)), exclude_self=True)


class TestNNAA:
    def test_identical_sets_give_zero_train_accuracy(self):
        rng = np.random.default_rng(0)
        train = rng.standard_normal((50, 6))
        test = rng.standard_normal((50, 6))
        rep = nnaa(train, test, synth=train.copy())
        assert rep.aa_train == 0.0
        assert rep.aa_test > 0.0
        assert rep.value == abs(rep.aa_test - rep.aa_train)

    def test_iid_sets_sit_near_half(self):
        rng = np.random.default_rng(1)
        sets = [rng.standard_normal((400, 16)) for _ in range(3)]
        rep = nnaa(*sets)
        assert 0.4 < rep.aa_train < 0.6
        assert 0.4 < rep.aa_test < 0.6
        assert rep.value < 0.1

    def test_size_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="sizes differ"):
            nnaa(rng.standard_normal((10, 3)), rng.standard_normal((10, 3)),
                 rng.standard_normal((9, 3)))

    def test_corpus_wrapper_matches_flat_call(self):
        train, test = tiny_corpus(30, seed=1), tiny_corpus(30, seed=2)
        synth = tiny_corpus(30, seed=3)
        space = FeatureSpace.from_corpus(train)
        rep_a = nnaa_corpora(train, test, synth, space=space)
        rep_b = nnaa(space.flat_features(train), space.flat_features(test),
                     space.flat_features(synth))
        assert rep_a.aa_train == rep_b.aa_train
        assert rep_a.aa_test == rep_b.aa_test


class TestDiscriminativeScore:
    def test_identical_distributions_score_low(self):
        corpus = tiny_corpus(160, seed=4)
        score = discriminative_score(corpus[:80], corpus[80:], QUICK)
        assert score <= 0.25

    def test_separable_corpora_score_high(self):
        real = make_sine_corpus(60, num_channels=1, length=12, seed=0)
        rng = np.random.default_rng(7)
        fake = [TimeSeriesSample(x=rng.uniform(3.0, 4.0, size=(1, 12)),
                                 c=np.zeros((0, 12), dtype=np.int64),
                                 m=np.zeros((1, 12), dtype=np.int64))
                for _ in range(60)]
        score = discriminative_score(real, fake, QUICK)
        assert score > 0.3

    def test_same_seed_is_bit_identical(self):
        corpus = tiny_corpus(60, seed=5)
        synth = tiny_corpus(60, seed=6)
        a = discriminative_score(corpus, synth, QUICK)
        b = discriminative_score(corpus, synth, QUICK)
        assert a == b

    def test_needs_twenty_per_side(self):
        corpus = tiny_corpus(30)
        with pytest.raises(ValueError, match="20 samples"):
            discriminative_score(corpus[:10], corpus[10:], QUICK)


class TestPredictiveScore:
    def test_smooth_signal_beats_mean_prediction(self):
        train = make_sine_corpus(80, num_channels=1, length=12, seed=8)
        test = make_sine_corpus(80, num_channels=1, length=12, seed=9)
        cfg = MetricConfig(steps=400, batch=32, hidden=12, seed=3)
        score = predictive_score(train, test, cfg)
        space = FeatureSpace.from_corpus(train)
        y = space.scaled_numeric(test)[:, 1:]
        mean_mae = np.abs(y - space.scaled_numeric(train).mean()).mean()
        assert score < mean_mae
        assert score < 0.15

    def test_same_seed_is_bit_identical(self):
        train, test = tiny_corpus(40, seed=1), tiny_corpus(40, seed=2)
        a = predictive_score(train, test, QUICK)
        b = predictive_score(train, test, QUICK)
        assert a == b

    def test_requires_two_steps_and_numeric_channels(self):
        short = [TimeSeriesSample(x=np.zeros((1, 1)),
                                  c=np.zeros((0, 1), dtype=np.int64),
                                  m=np.zeros((1, 1), dtype=np.int64))
                 for _ in range(4)]
        with pytest.raises(ValueError, match="2 time steps"):
            predictive_score(short, short, QUICK)
        codes_only = [TimeSeriesSample(x=np.zeros((0, 4)),
                                       c=np.zeros((1, 4), dtype=np.int64),
                                       m=np.zeros((0, 4), dtype=np.int64))
                      for _ in range(4)]
        with pytest.raises(ValueError, match="numerical"):
            predictive_score(codes_only, codes_only, QUICK)
