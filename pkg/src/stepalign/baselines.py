"""Baseline aligners: endpoint preference (DPO-style) and terminal-reward
policy gradient. Both share the stepwise aligner's fit(denoiser) surface,
reference snapshot, schedule, and optimizer so the method comparison is
apples-to-apples.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .diffusion import ConditionalDenoiser, log_ratio_from_means
from .errors import ConfigurationError, UsageError
from .validation import as_labels, check_timestep


def dpo_pair_loss(policy: ConditionalDenoiser, reference: ConditionalDenoiser,
                  parent_win, action_win, parent_lose, action_lose,
                  t: int, prompt: int, weight: float = 1.0,
                  grad_scale: float = 0.0) -> float:
    """-log sigmoid(weight * (rho_win - rho_lose)) for one trajectory pair at
    one timestep; exactly log(2) when policy and reference coincide."""
    policy._require_fitted()
    reference._require_fitted()
    if not policy.schedule_.same_as(reference.schedule_):
        raise ConfigurationError("policy and reference schedules differ")
    t = check_timestep(t, 1, policy.schedule_.n_steps)
    var = policy.schedule_.posterior_var[t]
    if var <= 0.0:
        raise UsageError(f"DPO step at t={t} has zero transition variance")
    parents = np.stack([np.asarray(parent_win, dtype=np.float64),
                        np.asarray(parent_lose, dtype=np.float64)])
    actions = np.stack([np.asarray(action_win, dtype=np.float64),
                        np.asarray(action_lose, dtype=np.float64)])
    y = np.array([int(prompt), int(prompt)])
    mu_pol, cache = policy.reverse_mean_with_cache(parents, t, y)
    mu_ref = reference.reverse_mean(parents, t, y)
    rho = log_ratio_from_means(actions, mu_pol, mu_ref, var)
    gap = rho[0] - rho[1]
    loss = float(np.logaddexp(0.0, -weight * gap))
    if grad_scale:
        d_gap = -weight * float(expit(-weight * gap)) * grad_scale
        d_mu = np.empty_like(mu_pol)
        d_mu[0] = d_gap * (actions[0] - mu_pol[0]) / var
        d_mu[1] = -d_gap * (actions[1] - mu_pol[1]) / var
        policy.backprop_mean(cache, d_mu, t)
    return loss


def policy_gradient_loss(policy: ConditionalDenoiser, xs: np.ndarray,
                         prompts, rewards, baseline: float | None = None,
                         grad_scale: float = 0.0) -> float:
    """Score-function surrogate -mean(advantage * mean_t log pi(action_t)).

    xs has shape (n_steps+1, n, dim) with xs[t] the state at timestep t;
    stochastic transitions only. With a batch-mean baseline and constant
    rewards the accumulated gradient is exactly zero.
    """
    policy._require_fitted()
    schedule = policy.schedule_
    rewards = np.asarray(rewards, dtype=np.float64)
    prompts = as_labels(prompts, policy.n_classes, "prompts")
    n = rewards.shape[0]
    if xs.shape != (schedule.n_steps + 1, n, policy.dim_):
        raise ConfigurationError(f"xs has shape {xs.shape}, expected "
                                 f"({schedule.n_steps + 1}, {n}, {policy.dim_})")
    adv = rewards - (np.mean(rewards) if baseline is None else float(baseline))
    steps = [t for t in range(1, schedule.n_steps + 1) if schedule.posterior_var[t] > 0.0]
    total = np.zeros(n)
    d = policy.dim_
    for t in steps:
        var = schedule.posterior_var[t]
        mu, cache = policy.reverse_mean_with_cache(xs[t], t, prompts)
        action = xs[t - 1]
        sq = np.sum((action - mu) ** 2, axis=1)
        total += -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
        if grad_scale:
            d_mu = (-grad_scale / (n * len(steps))) * adv[:, None] * (action - mu) / var
            policy.backprop_mean(cache, d_mu, t)
    return float(-np.mean(adv * total / len(steps)))


def trajectory_log_prob(policy: ConditionalDenoiser, xs: np.ndarray, prompts) -> np.ndarray:
    """Sum over stochastic steps of log pi(x_{t-1} | x_t) per trajectory."""
    policy._require_fitted()
    schedule = policy.schedule_
    prompts = as_labels(prompts, policy.n_classes, "prompts")
    n = xs.shape[1]
    d = policy.dim_
    total = np.zeros(n)
    for t in range(1, schedule.n_steps + 1):
        var = schedule.posterior_var[t]
        if var <= 0.0:
            continue
        mu = policy.reverse_mean(xs[t], t, prompts)
        sq = np.sum((xs[t - 1] - mu) ** 2, axis=1)
        total += -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    return total


class _BaseAligner(BaseEstimator):
    def _snapshot(self, denoiser: ConditionalDenoiser) -> None:
        denoiser._require_fitted()
        self.reference_ = denoiser.copy_model()
        self.reference_.store_.freeze()
        self.policy_ = denoiser.copy_model()
        self.history_ = []

    def _require_fitted(self) -> None:
        if not hasattr(self, "policy_"):
            raise NotFittedError("this aligner is not fitted yet")

    def sample(self, class_ids, rng, record: bool = False):
        self._require_fitted()
        return self.policy_.sample(class_ids, rng, record=record)


class EndpointDpoAligner(_BaseAligner):
    """Trajectory-pair preference training with endpoint oracle labels.

    Each update rolls pairs of trajectories from the current policy for one
    prompt each, labels the pair by the analytic oracle at the endpoints
    (ties are skipped), and applies the logistic ratio loss at one uniformly
    drawn stochastic timestep per pair.
    """

    def __init__(self, task=None, weight: float = 1.0, pairs_per_batch: int = 16,
                 lr: float = 1e-5, epochs: int = 25, batches_per_epoch: int = 8,
                 seed: int = 0):
        self.task = task
        self.weight = weight
        self.pairs_per_batch = pairs_per_batch
        self.lr = lr
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.seed = seed

    def fit(self, denoiser: ConditionalDenoiser, y=None):
        if self.task is None:
            raise ConfigurationError("endpoint DPO needs the task oracle for labels")
        if float(self.weight) <= 0.0:
            raise ConfigurationError("weight must be positive")
        self._snapshot(denoiser)
        rng = np.random.default_rng(self.seed)
        self.skipped_ties_ = 0
        for _ in range(int(self.epochs)):
            losses = []
            for b in range(int(self.batches_per_epoch)):
                losses.append(self._update(rng, b))
            self.history_.append({"mean_loss": float(np.mean(losses))})
        return self

    def _update(self, rng, batch_index: int) -> float:
        policy = self.policy_
        schedule = policy.schedule_
        m = int(self.pairs_per_batch)
        n_classes = policy.n_classes
        prompts = ((np.arange(m) + batch_index) % n_classes).astype(np.int64)
        both = np.repeat(prompts, 2)
        x0, xs = policy.sample(both, rng, record=True)
        scores = self.task.oracle_score(x0, both)
        a = scores[0::2]
        b = scores[1::2]
        keep = a != b
        self.skipped_ties_ += int(np.sum(~keep))
        if not np.any(keep):
            return float(np.log(2.0))
        pair_idx = np.flatnonzero(keep)
        win_rows = np.where(a[pair_idx] > b[pair_idx], 2 * pair_idx, 2 * pair_idx + 1)
        lose_rows = np.where(a[pair_idx] > b[pair_idx], 2 * pair_idx + 1, 2 * pair_idx)
        m_eff = pair_idx.size
        first = next(t for t in range(1, schedule.n_steps + 1)
                     if schedule.posterior_var[t] > 0.0)
        ts = rng.integers(first, schedule.n_steps + 1, size=m_eff)
        rows = np.concatenate([win_rows, lose_rows])
        t_cat = np.concatenate([ts, ts])
        parents = xs[t_cat, rows]
        actions = xs[t_cat - 1, rows]
        y_cat = both[rows]
        policy.store_.zero_grads()
        mu_pol, cache = policy.reverse_mean_rows_with_cache(parents, t_cat, y_cat)
        mu_ref = self.reference_.reverse_mean_rows_with_cache(parents, t_cat, y_cat)[0]
        var = schedule.posterior_var[t_cat]
        rho = (np.sum((actions - mu_ref) ** 2, axis=1)
               - np.sum((actions - mu_pol) ** 2, axis=1)) / (2.0 * var)
        gap = rho[:m_eff] - rho[m_eff:]
        w = float(self.weight)
        loss = float(np.mean(np.logaddexp(0.0, -w * gap)))
        d_gap = -w * expit(-w * gap) / m_eff
        d_mu = np.empty_like(mu_pol)
        d_mu[:m_eff] = d_gap[:, None] * (actions[:m_eff] - mu_pol[:m_eff]) / var[:m_eff, None]
        d_mu[m_eff:] = -d_gap[:, None] * (actions[m_eff:] - mu_pol[m_eff:]) / var[m_eff:, None]
        policy.backprop_mean_rows(cache, d_mu, t_cat)
        policy.store_.adam_step(float(self.lr))
        return loss


class RewardGradientAligner(_BaseAligner):
    """Terminal-reward policy gradient with a batch-mean baseline.

    Rolls trajectories from the current policy, takes the frozen scorer's
    score of the endpoint (at noise level 0) as the reward, and ascends the
    score-function estimator of the expected reward.
    """

    def __init__(self, scorer=None, batch_size: int = 32, lr: float = 1e-5,
                 epochs: int = 25, batches_per_epoch: int = 8, seed: int = 0):
        self.scorer = scorer
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.seed = seed

    def fit(self, denoiser: ConditionalDenoiser, y=None):
        if self.scorer is None:
            raise ConfigurationError("reward gradient needs a scorer")
        self.scorer._require_fitted()
        if not getattr(self.scorer, "frozen_", False):
            raise UsageError("reward gradient requires a frozen scorer")
        self._snapshot(denoiser)
        rng = np.random.default_rng(self.seed)
        for _ in range(int(self.epochs)):
            losses = []
            rewards = []
            for b in range(int(self.batches_per_epoch)):
                loss, mean_r = self._update(rng, b)
                losses.append(loss)
                rewards.append(mean_r)
            self.history_.append({"mean_loss": float(np.mean(losses)),
                                  "mean_reward": float(np.mean(rewards))})
        return self

    def _update(self, rng, batch_index: int) -> tuple[float, float]:
        policy = self.policy_
        n_classes = policy.n_classes
        prompts = ((np.arange(int(self.batch_size)) + batch_index) % n_classes).astype(np.int64)
        x0, xs = policy.sample(prompts, rng, record=True)
        rewards = self.scorer.score_batch(x0, 0, prompts)
        policy.store_.zero_grads()
        loss = policy_gradient_loss(policy, xs, prompts, rewards,
                                    baseline=None, grad_scale=1.0)
        policy.store_.adam_step(float(self.lr))
        return loss, float(np.mean(rewards))
