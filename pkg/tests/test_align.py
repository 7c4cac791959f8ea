"""Stepwise pooled-preference alignment."""

import numpy as np
import pytest
from scipy.stats import chisquare

from stepalign.align import (StepwiseAligner, sample_candidates, step_loss,
                             time_weight)
from stepalign.errors import ConfigurationError, UsageError
from stepalign.nets import finite_diff_check

from conftest import SMALL_CLASSES, SMALL_DIM, SMALL_STEPS, fit_small_scorer


class TestTimeWeight:
    def test_last_step_has_unit_weight(self):
        assert time_weight(49, 50) == 1.0
        assert time_weight(49, 50, eta=2.0) == 0.5

    def test_first_step_weight_closed_form(self):
        w = time_weight(0, 50, lam=0.95, eta=1.0)
        assert w == 0.95 ** 49
        assert w == pytest.approx(0.0810, abs=1e-4)

    def test_flat_when_lam_is_one(self):
        assert all(time_weight(t, 50, lam=1.0, eta=4.0) == 0.25 for t in range(50))

    def test_strictly_increasing_for_lam_below_one(self):
        ws = [time_weight(t, 50, lam=0.9) for t in range(50)]
        assert all(a < b for a, b in zip(ws, ws[1:]))

    def test_domain_checks(self):
        with pytest.raises(UsageError):
            time_weight(50, 50)
        with pytest.raises(UsageError):
            time_weight(-1, 50)
        with pytest.raises(ConfigurationError):
            time_weight(0, 50, lam=0.0)
        with pytest.raises(ConfigurationError):
            time_weight(0, 50, lam=1.2)
        with pytest.raises(ConfigurationError):
            time_weight(0, 50, eta=0.0)


class TestSampleCandidates:
    def test_pool_contract(self, small_denoiser):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(SMALL_DIM)
        pool = sample_candidates(small_denoiser, x, 5, 1, k=4, rng=rng)
        assert pool.candidates.shape == (4, SMALL_DIM)
        assert pool.t == 5 and pool.prompt == 1
        assert np.array_equal(pool.parent, x)
        pool.parent[0] += 1.0
        assert pool.parent[0] != x[0]  # copy, not a view

    def test_candidate_spread_matches_the_transition_scale(self, small_denoiser):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(SMALL_DIM)
        t = 6
        pool = sample_candidates(small_denoiser, x, t, 0, k=3000, rng=rng)
        mu = small_denoiser.reverse_mean(x, t, [0])
        spread = float(np.std(pool.candidates - mu[None, :]))
        sigma = small_denoiser.schedule_.sigma(t)
        assert abs(spread - sigma) < 0.05 * sigma

    def test_deterministic_first_step_collapses_the_pool(self, small_denoiser):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(SMALL_DIM)
        pool = sample_candidates(small_denoiser, x, 1, 0, k=4, rng=rng)
        mu = small_denoiser.reverse_mean(x, 1, [0])
        for cand in pool.candidates:
            assert np.array_equal(cand, mu)

    def test_pool_needs_at_least_two(self, small_denoiser):
        with pytest.raises(ConfigurationError):
            sample_candidates(small_denoiser, np.zeros(SMALL_DIM), 5, 0, k=1,
                              rng=np.random.default_rng(0))


class TestStepLoss:
    def _pool(self, model, x, t, prompt, seed=0, k=4):
        return sample_candidates(model, x, t, prompt, k=k,
                                 rng=np.random.default_rng(seed))

    def test_identical_models_reduce_to_the_squared_reward_gap(
            self, small_denoiser, small_scorer):
        reference = small_denoiser.copy_model()
        rng = np.random.default_rng(3)
        for trial in range(20):
            x = rng.standard_normal(SMALL_DIM)
            t = int(rng.integers(2, SMALL_STEPS - 1))
            prompt = int(rng.integers(0, SMALL_CLASSES))
            pool = self._pool(small_denoiser, x, t, prompt, seed=trial)
            res = step_loss(small_denoiser, reference, small_scorer, x, t,
                            prompt, pool)
            assert res.logratio_gap == 0.0
            assert res.loss == res.reward_gap ** 2
            assert res.weight == time_weight(t, SMALL_STEPS)

    def test_equal_candidates_give_zero_loss_at_the_reference(
            self, small_denoiser, small_scorer):
        reference = small_denoiser.copy_model()
        x = np.random.default_rng(4).standard_normal(SMALL_DIM)
        t = 5
        pool = self._pool(small_denoiser, x, t, 0)
        pool.candidates[...] = pool.candidates[0]
        res = step_loss(small_denoiser, reference, small_scorer, x, t, 0, pool)
        assert res.reward_gap == 0.0
        assert res.loss == 0.0

    def test_gradient_passes_finite_difference(self, small_denoiser,
                                               small_scorer):
        reference = small_denoiser.copy_model()
        policy = small_denoiser.copy_model()
        policy.store_.param("net.b0")[:] += 0.02
        rng = np.random.default_rng(5)
        x = rng.standard_normal(SMALL_DIM)
        t, prompt = 6, 2
        pool = self._pool(policy, x, t, prompt, seed=11)

        def loss_fn():
            policy.store_.zero_grads()
            return step_loss(policy, reference, small_scorer, x, t, prompt,
                             pool, grad_scale=1.0).loss

        assert finite_diff_check(loss_fn, policy.store_,
                                 rng=np.random.default_rng(6)) < 1e-5

    def test_pool_provenance_is_enforced(self, small_denoiser, small_scorer):
        reference = small_denoiser.copy_model()
        x = np.random.default_rng(7).standard_normal(SMALL_DIM)
        pool = self._pool(small_denoiser, x, 5, 1)
        with pytest.raises(UsageError):
            step_loss(small_denoiser, reference, small_scorer, x, 6, 1, pool)
        with pytest.raises(UsageError):
            step_loss(small_denoiser, reference, small_scorer, x, 5, 2, pool)
        with pytest.raises(UsageError):
            step_loss(small_denoiser, reference, small_scorer, x + 1.0, 5, 1,
                      pool)

    def test_zero_variance_step_rejected(self, small_denoiser, small_scorer):
        reference = small_denoiser.copy_model()
        x = np.random.default_rng(8).standard_normal(SMALL_DIM)
        pool = self._pool(small_denoiser, x, 1, 0)
        with pytest.raises(UsageError):
            step_loss(small_denoiser, reference, small_scorer, x, 1, 0, pool)

    def test_unfrozen_scorer_rejected(self, small_denoiser, small_task,
                                      small_schedule):
        unfrozen = fit_small_scorer(small_task, small_schedule, epochs=1)
        reference = small_denoiser.copy_model()
        x = np.random.default_rng(9).standard_normal(SMALL_DIM)
        pool = self._pool(small_denoiser, x, 5, 0)
        with pytest.raises(UsageError):
            step_loss(small_denoiser, reference, unfrozen, x, 5, 0, pool)

    def test_schedule_mismatch_rejected(self, small_denoiser, small_task,
                                        small_scorer):
        from stepalign.schedule import build_schedule

        other = small_denoiser.copy_model()
        other.schedule_ = build_schedule(n_steps=SMALL_STEPS, beta_min=2e-4,
                                         beta_max=0.2)
        x = np.random.default_rng(10).standard_normal(SMALL_DIM)
        pool = self._pool(small_denoiser, x, 5, 0)
        with pytest.raises(ConfigurationError):
            step_loss(small_denoiser, other, small_scorer, x, 5, 0, pool)


def _make_aligner(scorer, task, **kw):
    defaults = dict(k=4, batch_size=8, lr=1e-5, epochs=2, batches_per_epoch=3,
                    seed=0)
    defaults.update(kw)
    return StepwiseAligner(scorer=scorer, task=task, **defaults)


class TestStepwiseAligner:
    def test_requires_a_frozen_scorer(self, small_denoiser, small_task,
                                      small_schedule):
        unfrozen = fit_small_scorer(small_task, small_schedule, epochs=1)
        with pytest.raises(UsageError):
            _make_aligner(unfrozen, small_task).fit(small_denoiser)

    @pytest.mark.parametrize("kw", [
        dict(mode="both"),
        dict(next_state="greedy"),
        dict(pair_selection="middle"),
        dict(k=1),
        dict(lam=0.0),
        dict(eta=-1.0),
        dict(kappa_frac=1.0),
        dict(t_range=(0, 5)),
    ])
    def test_bad_settings_rejected(self, small_denoiser, small_scorer,
                                   small_task, kw):
        with pytest.raises(ConfigurationError):
            _make_aligner(small_scorer, small_task, **kw).fit(small_denoiser)

    def test_zero_epochs_leaves_the_policy_at_the_reference(
            self, small_denoiser, small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task, epochs=0)
        aligner.fit(small_denoiser)
        assert aligner.policy_.store_.equals(aligner.reference_.store_)
        assert aligner.policy_.store_.equals(small_denoiser.store_)
        assert len(aligner.history_) == 1

    def test_diagnostic_epoch_is_exactly_at_the_reference(
            self, small_denoiser, small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task).fit(small_denoiser)
        row0 = aligner.history_[0]
        assert row0["epoch"] == 0
        assert row0["mean_abs_logratio"] == 0.0
        assert row0["logratio_drift"] == 0.0
        assert row0["mean_step_loss"] >= 0.0
        assert set(row0) >= {"epoch", "mean_step_loss", "mean_reward_gap",
                             "mean_abs_logratio", "logratio_drift",
                             "oracle_mean"}
        assert all(f"oracle_class_{c}" in row0 for c in range(SMALL_CLASSES))

    def test_training_moves_the_policy_but_not_the_reference_or_scorer(
            self, small_denoiser, small_scorer, small_task):
        before = small_scorer.store_.copy()
        aligner = _make_aligner(small_scorer, small_task).fit(small_denoiser)
        assert not aligner.policy_.store_.equals(aligner.reference_.store_)
        assert aligner.reference_.store_.equals(small_denoiser.store_)
        assert small_scorer.store_.equals(before)

    def test_input_estimator_is_never_mutated(self, small_denoiser,
                                              small_scorer, small_task):
        snapshot = small_denoiser.store_.copy()
        _make_aligner(small_scorer, small_task).fit(small_denoiser)
        assert small_denoiser.store_.equals(snapshot)

    def test_pooled_steps_respect_the_cutoff(self, small_denoiser,
                                             small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task).fit(small_denoiser)
        # T=10, cutoff fraction 0.25 -> pooled range [2, 8].
        assert (aligner.t_lo_, aligner.t_hi_) == (2, 8)
        ts = np.array(aligner.pooled_ts_)
        assert ts.size > 0
        assert np.all((ts >= 2) & (ts <= 8))

    def test_explicit_t_range_clamps_to_stochastic_steps(
            self, small_denoiser, small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task, t_range=(1, 5))
        aligner.fit(small_denoiser)
        assert (aligner.t_lo_, aligner.t_hi_) == (2, 5)
        assert np.all(np.array(aligner.pooled_ts_) <= 5)

    def test_single_tau_pools_once_per_trajectory(self, small_denoiser,
                                                  small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task, epochs=2,
                                batches_per_epoch=3, batch_size=8)
        aligner.fit(small_denoiser)
        n_traj = (1 + 2 * 3) * 8
        assert len(aligner.pooled_ts_) == n_traj
        assert int(aligner.continuation_counts_.sum()) == n_traj

    def test_per_step_pools_the_whole_range(self, small_denoiser,
                                            small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task, mode="per-step",
                                epochs=1, batches_per_epoch=2, batch_size=4)
        aligner.fit(small_denoiser)
        n_traj = (1 + 1 * 2) * 4
        assert len(aligner.pooled_ts_) == n_traj * 7  # range [2, 8]
        assert int(aligner.continuation_counts_.sum()) == n_traj * 7

    def test_random_continuation_is_uniform(self, small_denoiser,
                                            small_scorer, small_task):
        aligner = _make_aligner(small_scorer, small_task, epochs=4,
                                batches_per_epoch=4, batch_size=16)
        aligner.fit(small_denoiser)
        counts = aligner.continuation_counts_
        assert counts.sum() == (1 + 4 * 4) * 16
        assert chisquare(counts).pvalue > 0.01

    def test_win_continuation_follows_the_scorer_choice(self, small_denoiser,
                                                        small_scorer,
                                                        small_task):
        aligner = _make_aligner(small_scorer, small_task, next_state="win",
                                epochs=1, batches_per_epoch=2)
        aligner.fit(small_denoiser)
        assert int(aligner.continuation_counts_.sum()) == len(aligner.pooled_ts_)

    def test_fit_is_deterministic_under_seed(self, small_denoiser,
                                             small_scorer, small_task):
        a = _make_aligner(small_scorer, small_task, seed=5).fit(small_denoiser)
        b = _make_aligner(small_scorer, small_task, seed=5).fit(small_denoiser)
        assert a.policy_.store_.equals(b.policy_.store_)
        assert a.history_ == b.history_
        c = _make_aligner(small_scorer, small_task, seed=6).fit(small_denoiser)
        assert not a.policy_.store_.equals(c.policy_.store_)

    def test_sample_uses_the_aligned_policy(self, small_denoiser, small_scorer,
                                            small_task):
        aligner = _make_aligner(small_scorer, small_task).fit(small_denoiser)
        ids = np.array([0, 1, 2])
        a = aligner.sample(ids, np.random.default_rng(20))
        b = aligner.policy_.sample(ids, np.random.default_rng(20))
        assert np.array_equal(a, b)

    def test_dimension_mismatch_rejected(self, small_scorer):
        from stepalign.diffusion import ConditionalDenoiser
        from stepalign.task import SignalTask

        other_task = SignalTask(dim=32, n_classes=3)
        y = np.repeat(np.arange(3), 4)
        X = other_task.generate_clean(y, np.random.default_rng(0))
        model = ConditionalDenoiser(n_steps=SMALL_STEPS, hidden=(16,),
                                    n_time_freq=4, n_classes=3, epochs=0,
                                    seed=0).fit(X, y)
        with pytest.raises(ConfigurationError):
            _make_aligner(small_scorer, other_task).fit(model)
