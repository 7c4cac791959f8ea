"""Noise-level-conditioned preference scorer."""

import json

import numpy as np
import pytest
from scipy.special import expit

from stepalign.errors import (ConfigurationError, DegenerateStateError,
                              UsageError)
from stepalign.nets import finite_diff_check
from stepalign.scorer import (StepwiseScorer, preference_loss,
                              preference_probability)

from conftest import SMALL_CLASSES, SMALL_STEPS, fit_small_scorer


class TestPreferenceObjective:
    def test_probability_closed_forms(self):
        # Gap 0.1 at temperature 10 lands exactly on sigmoid(1).
        assert preference_probability(0.6, 0.5, temperature=10.0) == \
            pytest.approx(0.7310585786300049, abs=1e-15)
        assert preference_probability(0.5, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_loss_closed_forms(self):
        assert preference_loss(0.3, 0.3) == pytest.approx(np.log(2.0), abs=1e-15)
        assert preference_loss(2.0, 0.0, temperature=1.0) == \
            pytest.approx(0.12692801104297263, abs=1e-15)

    def test_loss_decreases_with_the_gap(self):
        gaps = np.linspace(-1.0, 1.0, 21)
        losses = [preference_loss(g, 0.0, temperature=5.0) for g in gaps]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ConfigurationError):
            preference_loss(1.0, 0.0, temperature=0.0)
        with pytest.raises(ConfigurationError):
            preference_probability(1.0, 0.0, temperature=-2.0)


def _fresh_scorer(small_task, small_schedule, epochs=2, seed=3, **kw):
    return fit_small_scorer(small_task, small_schedule, epochs=epochs,
                            seed=seed, **kw)


class TestTrainingAndFreezing:
    def test_fit_shapes_rejected(self, small_schedule):
        scorer = StepwiseScorer(schedule=small_schedule, n_classes=3)
        with pytest.raises(ConfigurationError):
            scorer.fit(np.zeros((4, 3, 8)), np.zeros(4, dtype=np.int64))

    def test_fit_needs_a_schedule(self):
        with pytest.raises(ConfigurationError):
            StepwiseScorer(schedule=None).fit(np.zeros((4, 2, 8)),
                                              np.zeros(4, dtype=np.int64))

    def test_freeze_makes_scores_immutable_and_training_illegal(
            self, small_task, small_schedule):
        scorer = _fresh_scorer(small_task, small_schedule)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, small_task.dim))
        prompts = np.zeros(6, dtype=np.int64)
        before = scorer.score_batch(X, 2, prompts)
        scorer.freeze()
        after = scorer.score_batch(X, 2, prompts)
        assert np.array_equal(before, after)
        with pytest.raises(UsageError):
            scorer.fit(np.zeros((4, 2, small_task.dim)), np.zeros(4, dtype=np.int64))
        with pytest.raises(ValueError):
            scorer.store_.param("out.b")[0] = 1.0

    def test_gradients_pass_finite_difference(self, small_task, small_schedule):
        scorer = _fresh_scorer(small_task, small_schedule)
        rng = np.random.default_rng(1)
        xw = rng.standard_normal((4, small_task.dim))
        xl = rng.standard_normal((4, small_task.dim))
        prompts = np.array([0, 1, 2, 0])
        t_rows = np.array([1, 3, 5, 8])
        tau = float(scorer.temperature)

        def loss_fn():
            scorer.store_.zero_grads()
            s_w, cache_w, _ = scorer._score_cached(xw, t_rows, prompts)
            s_l, cache_l, _ = scorer._score_cached(xl, t_rows, prompts)
            gap = s_w - s_l
            d_gap = -tau * expit(-tau * gap) / gap.shape[0]
            scorer._backward(cache_w, d_gap)
            scorer._backward(cache_l, -d_gap)
            return float(np.mean(np.logaddexp(0.0, -tau * gap)))

        assert finite_diff_check(loss_fn, scorer.store_,
                                 rng=np.random.default_rng(2)) < 1e-5

    def test_matched_noise_is_not_inferior_at_high_noise(self, small_task,
                                                         small_schedule):
        rng = np.random.default_rng(9)
        wins, loses, prompts = small_task.make_pair_dataset(1200, rng)
        h_wins, h_loses, h_prompts = small_task.make_pair_dataset(400, rng)
        X = np.stack([wins, loses], axis=1)
        accs = {True: [], False: []}
        for seed in (0, 1, 2):
            for matched in (True, False):
                scorer = StepwiseScorer(schedule=small_schedule, embed_dim=8,
                                        hidden=(64,), n_time_freq=4, epochs=20,
                                        batch_size=64, pair_matched_noise=matched,
                                        n_classes=small_task.n_classes, seed=seed)
                scorer.fit(X, prompts)
                accs[matched].append(scorer.pair_accuracy(
                    h_wins, h_loses, h_prompts, SMALL_STEPS // 2, SMALL_STEPS,
                    rng=np.random.default_rng(33)))
        assert float(np.mean(accs[True])) >= float(np.mean(accs[False]))


class TestScoring:
    def test_time_blind_scorer_ignores_the_timestep(self, small_task, small_schedule):
        scorer = _fresh_scorer(small_task, small_schedule, time_conditioned=False)
        rng = np.random.default_rng(3)
        X = rng.standard_normal((5, small_task.dim))
        prompts = np.arange(5) % SMALL_CLASSES
        a = scorer.score_batch(X, 1, prompts)
        b = scorer.score_batch(X, SMALL_STEPS - 1, prompts)
        assert np.array_equal(a, b)

    def test_time_conditioned_scorer_depends_on_the_timestep(self, small_scorer,
                                                             small_task):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, small_task.dim))
        prompts = np.zeros(5, dtype=np.int64)
        a = small_scorer.score_batch(X, 1, prompts)
        b = small_scorer.score_batch(X, SMALL_STEPS - 1, prompts)
        assert not np.array_equal(a, b)

    def test_scores_are_cosines(self, small_scorer, small_task):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((20, small_task.dim))
        s = small_scorer.score_batch(X, 2, np.zeros(20, dtype=np.int64))
        assert np.all(np.abs(s) <= 1.0 + 1e-12)

    def test_collapsed_embedding_is_degenerate(self, small_task, small_schedule):
        scorer = _fresh_scorer(small_task, small_schedule, epochs=1)
        scorer.store_.param("out.W")[...] = 0.0
        scorer.store_.param("out.b")[...] = 0.0
        with pytest.raises(DegenerateStateError):
            scorer.score_batch(np.ones((2, small_task.dim)), 1,
                               np.zeros(2, dtype=np.int64))


class TestRanking:
    def test_rank_requires_frozen_and_enough_candidates(self, small_task,
                                                        small_schedule,
                                                        small_scorer):
        unfrozen = _fresh_scorer(small_task, small_schedule, epochs=1)
        pool = np.random.default_rng(6).standard_normal((4, small_task.dim))
        with pytest.raises(UsageError):
            unfrozen.rank(pool, 2, 0)
        with pytest.raises(UsageError):
            small_scorer.rank(pool[:1], 2, 0)

    def test_rank_orders_by_score_and_separates_roles(self, small_scorer,
                                                      small_task):
        rng = np.random.default_rng(7)
        pool = rng.standard_normal((6, small_task.dim))
        pref = small_scorer.rank(pool, 3, 1)
        scores = small_scorer.score_batch(pool, 3, np.ones(6, dtype=np.int64))
        assert pref.win_index == int(np.argmax(scores))
        assert pref.win_index != pref.lose_index
        assert pref.score_win >= pref.score_lose
        assert np.array_equal(pref.win, pool[pref.win_index])
        assert np.array_equal(pref.lose, pool[pref.lose_index])

    def test_rank_tie_break_is_first_max_then_first_min(self, small_scorer,
                                                        small_task):
        row = np.random.default_rng(8).standard_normal(small_task.dim)
        pool = np.tile(row, (4, 1))
        pref = small_scorer.rank(pool, 2, 0)
        assert pref.win_index == 0
        assert pref.lose_index == 1

    def test_rank_copies_do_not_alias_the_pool(self, small_scorer, small_task):
        pool = np.random.default_rng(9).standard_normal((3, small_task.dim))
        pref = small_scorer.rank(pool, 2, 0)
        pool[pref.win_index, 0] += 1.0
        assert pref.win[0] != pool[pref.win_index, 0]


class TestAccuracy:
    def test_swapped_pairs_give_the_complementary_accuracy(self, small_scorer,
                                                           small_task):
        rng = np.random.default_rng(10)
        wins, loses, prompts = small_task.make_pair_dataset(200, rng)
        acc = small_scorer.pair_accuracy(wins, loses, prompts, 1, 5,
                                         rng=np.random.default_rng(11))
        swapped = small_scorer.pair_accuracy(loses, wins, prompts, 1, 5,
                                             rng=np.random.default_rng(11))
        assert abs(acc + swapped - 1.0) < 1e-9

    def test_low_noise_accuracy_is_informative(self, small_scorer, small_task):
        rng = np.random.default_rng(12)
        wins, loses, prompts = small_task.make_pair_dataset(400, rng)
        acc = small_scorer.pair_accuracy(wins, loses, prompts, 1, 3,
                                         rng=np.random.default_rng(13))
        assert acc > 0.65

    def test_accuracy_by_bin_partitions_the_range(self, small_scorer, small_task):
        rng = np.random.default_rng(14)
        wins, loses, prompts = small_task.make_pair_dataset(100, rng)
        bins = small_scorer.accuracy_by_bin(wins, loses, prompts, n_bins=5,
                                            t_lo=1, t_hi=SMALL_STEPS,
                                            rng=np.random.default_rng(15))
        assert len(bins) == 5
        assert bins[0]["t_lo"] == 1
        assert bins[-1]["t_hi"] == SMALL_STEPS
        for prev, nxt in zip(bins, bins[1:]):
            assert nxt["t_lo"] == prev["t_hi"] + 1
        for row in bins:
            assert 0.0 <= row["accuracy"] <= 1.0


class TestCheckpoint:
    def test_round_trip_preserves_scores_and_frozen_flag(self, small_scorer,
                                                         small_task, tmp_path):
        small_scorer.save(tmp_path / "scorer")
        loaded = StepwiseScorer.load(tmp_path / "scorer")
        assert loaded.frozen_
        rng = np.random.default_rng(16)
        X = rng.standard_normal((7, small_task.dim))
        prompts = np.arange(7) % SMALL_CLASSES
        assert np.array_equal(loaded.score_batch(X, 4, prompts),
                              small_scorer.score_batch(X, 4, prompts))

    def test_unknown_manifest_fields_rejected(self, small_scorer, tmp_path):
        small_scorer.save(tmp_path / "scorer")
        meta_path = tmp_path / "scorer.json"
        obj = json.loads(meta_path.read_text())
        obj["meta"]["surprise"] = 1
        meta_path.write_text(json.dumps(obj))
        with pytest.raises(ConfigurationError):
            StepwiseScorer.load(tmp_path / "scorer")
