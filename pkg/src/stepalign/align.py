"""Stepwise preference alignment of a conditional denoiser.

During reverse rollouts, selected timesteps expand into a pool of k candidate
next states drawn from the current policy. A frozen scorer ranks the pool;
the squared objective pushes the time-weighted policy/reference
log-likelihood ratio between winner and loser toward their score gap. The
rollout then continues from a pool member (uniformly random by default) and
one optimizer step is applied per batch of trajectories.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .diffusion import ConditionalDenoiser, log_ratio_from_means
from .errors import ConfigurationError, UsageError
from .scorer import StepwiseScorer
from .validation import check_timestep

NEXT_STATE_MODES = ("random", "win", "lose")
PAIR_SELECTION_MODES = ("best-worst", "random-pair")
POOL_MODES = ("single-tau", "per-step")


def time_weight(t: int, n_steps: int, lam: float = 0.95, eta: float = 1.0) -> float:
    """Per-step loss weight lam**(n_steps - t - 1) / eta, increasing in t."""
    if not 0.0 < lam <= 1.0:
        raise ConfigurationError(f"lam must lie in (0, 1], got {lam}")
    if eta <= 0.0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    t = check_timestep(t, 0, n_steps - 1)
    return float(lam ** (n_steps - t - 1) / eta)


@dataclass
class CandidatePool:
    """k next-state candidates drawn from one parent state at one timestep."""
    parent: np.ndarray
    t: int
    prompt: int
    candidates: np.ndarray
    z: np.ndarray


@dataclass
class StepLossResult:
    loss: float
    reward_gap: float
    logratio_gap: float
    weight: float
    win_index: int
    lose_index: int


def sample_candidates(policy: ConditionalDenoiser, x, t: int, prompt: int,
                      k: int, rng) -> CandidatePool:
    """Draw k candidate next states from the policy's reverse transition."""
    k = int(k)
    if k < 2:
        raise ConfigurationError(f"candidate pools need k >= 2, got {k}")
    policy._require_fitted()
    t = check_timestep(t, 1, policy.schedule_.n_steps)
    x = np.asarray(x, dtype=np.float64)
    mu = policy.reverse_mean(x, t, [prompt])
    sigma = policy.schedule_.sigma(t)
    z = rng.standard_normal((k, x.shape[0]))
    return CandidatePool(parent=x.copy(), t=t, prompt=int(prompt),
                         candidates=mu[None, :] + sigma * z, z=z)


def step_loss(policy: ConditionalDenoiser, reference: ConditionalDenoiser,
              scorer: StepwiseScorer, x, t: int, prompt: int,
              pool: CandidatePool, lam: float = 0.95, eta: float = 1.0,
              grad_scale: float = 0.0) -> StepLossResult:
    """Squared stepwise objective for one pooled step.

    The score gap is a constant (no gradient reaches the scorer); with
    grad_scale > 0 the policy gradient is accumulated, scaled by that factor.
    """
    policy._require_fitted()
    reference._require_fitted()
    if not policy.schedule_.same_as(reference.schedule_):
        raise ConfigurationError("policy and reference schedules differ")
    if not getattr(scorer, "frozen_", False):
        raise UsageError("step_loss requires a frozen scorer")
    x = np.asarray(x, dtype=np.float64)
    if pool.t != t or pool.prompt != int(prompt) or not np.array_equal(pool.parent, x):
        raise UsageError("candidate pool does not belong to this state")
    t = check_timestep(t, 1, policy.schedule_.n_steps)
    var = policy.schedule_.posterior_var[t]
    if var <= 0.0:
        raise UsageError(f"pooled update at t={t} has zero transition variance")
    # Candidates sit at noise level t-1, so they are scored there.
    pref = scorer.rank(pool.candidates, t - 1, prompt)
    w = time_weight(t, policy.schedule_.n_steps, lam, eta)
    mu_pol, cache = policy.reverse_mean_with_cache(x[None, :], t, [prompt])
    mu_ref = reference.reverse_mean(x, t, [prompt])
    rho_w = log_ratio_from_means(pref.win, mu_pol[0], mu_ref, var)
    rho_l = log_ratio_from_means(pref.lose, mu_pol[0], mu_ref, var)
    gap = rho_w - rho_l
    reward_gap = pref.score_win - pref.score_lose
    resid = w * gap - reward_gap
    if grad_scale:
        d_mu = (2.0 * resid * w * grad_scale / var) * (pref.win - pref.lose)
        policy.backprop_mean(cache, d_mu[None, :], t)
    return StepLossResult(loss=float(resid ** 2), reward_gap=float(reward_gap),
                          logratio_gap=float(gap), weight=w,
                          win_index=pref.win_index, lose_index=pref.lose_index)


class StepwiseAligner(BaseEstimator):
    """Aligns a fitted denoiser against a frozen scorer with stepwise pools.

    fit(denoiser) snapshots an immutable reference copy, then trains a working
    copy; the input estimator itself is never touched. In "single-tau" mode
    each trajectory pools at one uniformly drawn timestep, in "per-step" mode
    at every timestep of the pooled range.
    """

    def __init__(self, scorer: StepwiseScorer | None = None, task=None,
                 k: int = 4, kappa_frac: float = 0.25, lam: float = 0.95,
                 eta: float = 1.0, mode: str = "single-tau",
                 next_state: str = "random", pair_selection: str = "best-worst",
                 batch_size: int = 32, lr: float = 1e-5, epochs: int = 25,
                 batches_per_epoch: int = 8, t_range=None, seed: int = 0):
        self.scorer = scorer
        self.task = task
        self.k = k
        self.kappa_frac = kappa_frac
        self.lam = lam
        self.eta = eta
        self.mode = mode
        self.next_state = next_state
        self.pair_selection = pair_selection
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.t_range = t_range
        self.seed = seed

    # -- configuration -----------------------------------------------------

    def _validate(self, denoiser: ConditionalDenoiser) -> None:
        if self.scorer is None:
            raise ConfigurationError("aligner needs a scorer")
        self.scorer._require_fitted()
        if not getattr(self.scorer, "frozen_", False):
            raise UsageError("aligner requires a frozen scorer")
        denoiser._require_fitted()
        if self.scorer.dim_ != denoiser.dim_:
            raise ConfigurationError("scorer and denoiser dimensions differ")
        if int(self.k) < 2:
            raise ConfigurationError(f"k must be >= 2, got {self.k}")
        n_steps = denoiser.schedule_.n_steps
        kappa = int(round(float(self.kappa_frac) * n_steps))
        if not 0 <= kappa < n_steps:
            raise ConfigurationError(f"kappa={kappa} outside [0, {n_steps})")
        if not 0.0 < float(self.lam) <= 1.0:
            raise ConfigurationError(f"lam must lie in (0, 1], got {self.lam}")
        if float(self.eta) <= 0.0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.mode not in POOL_MODES:
            raise ConfigurationError(f"mode must be one of {POOL_MODES}, got {self.mode!r}")
        if self.next_state not in NEXT_STATE_MODES:
            raise ConfigurationError(
                f"next_state must be one of {NEXT_STATE_MODES}, got {self.next_state!r}")
        if self.pair_selection not in PAIR_SELECTION_MODES:
            raise ConfigurationError(
                f"pair_selection must be one of {PAIR_SELECTION_MODES}, "
                f"got {self.pair_selection!r}")
        if int(self.batch_size) < 1 or int(self.batches_per_epoch) < 1:
            raise ConfigurationError("batch_size and batches_per_epoch must be >= 1")

    def _pool_range(self, schedule) -> tuple[int, int]:
        """Pooled timesteps: [first stochastic step, n_steps - kappa] by
        default; an explicit t_range overrides (clamped to stochastic steps
        and to the time-weight domain)."""
        n_steps = schedule.n_steps
        first_stochastic = next(t for t in range(1, n_steps + 1)
                                if schedule.posterior_var[t] > 0.0)
        if self.t_range is not None:
            lo, hi = int(self.t_range[0]), int(self.t_range[1])
            if not 1 <= lo <= hi <= n_steps:
                raise ConfigurationError(f"bad t_range {self.t_range}")
            return max(lo, first_stochastic), min(hi, n_steps - 1)
        kappa = int(round(float(self.kappa_frac) * n_steps))
        hi = n_steps - kappa
        lo = first_stochastic
        if lo > hi:
            raise ConfigurationError(
                f"pooled range [{lo}, {hi}] is empty; lower kappa_frac")
        return lo, hi

    # -- training ----------------------------------------------------------

    def fit(self, denoiser: ConditionalDenoiser, y=None):
        self._validate(denoiser)
        schedule = denoiser.schedule_
        self.t_lo_, self.t_hi_ = self._pool_range(schedule)
        self.reference_ = denoiser.copy_model()
        self.reference_.store_.freeze()
        self.policy_ = denoiser.copy_model()
        self._scorer_snapshot = self.scorer.store_.copy()
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        self.pooled_ts_: list[int] = []
        self.continuation_counts_ = np.zeros(int(self.k), dtype=np.int64)
        self.epoch_seconds_ = []
        # Epoch 0 is a diagnostic pass: same rollout code, no update, so the
        # logged log-ratio gaps are exactly zero at the reference.
        self.history_.append(self._run_epoch(rng, epoch=0, update=False))
        for epoch in range(1, int(self.epochs) + 1):
            start = time.perf_counter()
            self.history_.append(self._run_epoch(rng, epoch=epoch, update=True))
            self.epoch_seconds_.append(time.perf_counter() - start)
        if not self.scorer.store_.equals(self._scorer_snapshot):
            raise UsageError("scorer parameters changed during alignment")
        return self

    def _batch_prompts(self, batch_index: int) -> np.ndarray:
        n_classes = self.policy_.n_classes
        base = (np.arange(int(self.batch_size)) + batch_index) % n_classes
        return base.astype(np.int64)

    def _run_epoch(self, rng, epoch: int, update: bool) -> dict:
        n_batches = 1 if not update else int(self.batches_per_epoch)
        agg = {"step_loss": [], "reward_gap": [], "abs_gap": [],
               "drift": [], "oracle": [], "prompts": []}
        for b in range(n_batches):
            self._run_batch(rng, self._batch_prompts(b), update, agg)
        prompts = np.concatenate(agg["prompts"])
        oracle = np.concatenate(agg["oracle"]) if agg["oracle"] else np.array([])
        row = {
            "epoch": int(epoch),
            "mean_step_loss": float(np.mean(agg["step_loss"])) if agg["step_loss"] else 0.0,
            "mean_reward_gap": float(np.mean(agg["reward_gap"])) if agg["reward_gap"] else 0.0,
            "mean_abs_logratio": float(np.mean(agg["abs_gap"])) if agg["abs_gap"] else 0.0,
            "logratio_drift": float(np.mean(agg["drift"])) if agg["drift"] else 0.0,
        }
        if oracle.size:
            row["oracle_mean"] = float(np.mean(oracle))
            for c in range(self.policy_.n_classes):
                sel = prompts == c
                row[f"oracle_class_{c}"] = float(np.mean(oracle[sel])) if np.any(sel) else float("nan")
        return row

    def _select_pair(self, scores: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise (win, lose) indices for a (m, k) score block."""
        m, k = scores.shape
        if self.pair_selection == "best-worst":
            win = np.argmax(scores, axis=1)
            masked = scores.copy()
            masked[np.arange(m), win] = np.inf
            lose = np.argmin(masked, axis=1)
        else:
            first = rng.integers(0, k, size=m)
            step = rng.integers(1, k, size=m)
            second = (first + step) % k
            s1 = scores[np.arange(m), first]
            s2 = scores[np.arange(m), second]
            swap = s2 > s1
            win = np.where(swap, second, first)
            lose = np.where(swap, first, second)
        return win.astype(np.int64), lose.astype(np.int64)

    def _run_batch(self, rng, prompts: np.ndarray, update: bool, agg: dict) -> None:
        policy = self.policy_
        schedule = policy.schedule_
        n_steps = schedule.n_steps
        batch = prompts.shape[0]
        k = int(self.k)
        if update:
            policy.store_.zero_grads()
        if self.mode == "single-tau":
            tau = rng.integers(self.t_lo_, self.t_hi_ + 1, size=batch)
            per_traj_steps = 1
        else:
            tau = None
            per_traj_steps = self.t_hi_ - self.t_lo_ + 1
        grad_scale = 1.0 / (batch * per_traj_steps)
        x = rng.standard_normal((batch, policy.dim_))
        for t in range(n_steps, 0, -1):
            mu, cache = policy.reverse_mean_with_cache(x, t, prompts)
            mu_ref = self.reference_.reverse_mean(x, t, prompts)
            var = schedule.posterior_var[t]
            if var > 0.0:
                x_next = mu + np.sqrt(var) * rng.standard_normal(x.shape)
            else:
                x_next = mu.copy()
            if self.mode == "single-tau":
                mask = tau == t
            else:
                mask = np.full(batch, self.t_lo_ <= t <= self.t_hi_)
            rows = np.flatnonzero(mask)
            if rows.size and var > 0.0:
                sigma = np.sqrt(var)
                zc = rng.standard_normal((rows.size, k, policy.dim_))
                cands = mu[rows][:, None, :] + sigma * zc
                flat = cands.reshape(-1, policy.dim_)
                scores = self.scorer.score_batch(
                    flat, t - 1, np.repeat(prompts[rows], k)).reshape(rows.size, k)
                win, lose = self._select_pair(scores, rng)
                r_idx = np.arange(rows.size)
                s_w = scores[r_idx, win]
                s_l = scores[r_idx, lose]
                x_w = cands[r_idx, win]
                x_l = cands[r_idx, lose]
                gap = np.einsum("ij,ij->i", x_w - x_l, mu[rows] - mu_ref[rows]) / var
                w_t = time_weight(t, n_steps, float(self.lam), float(self.eta))
                resid = w_t * gap - (s_w - s_l)
                agg["step_loss"].extend((resid ** 2).tolist())
                agg["reward_gap"].extend((s_w - s_l).tolist())
                agg["abs_gap"].extend(np.abs(gap).tolist())
                self.pooled_ts_.extend([t] * rows.size)
                if update:
                    d_mu = np.zeros_like(mu)
                    d_mu[rows] = (2.0 * resid * w_t * grad_scale / var)[:, None] * (x_w - x_l)
                    policy.backprop_mean(cache, d_mu, t)
                if self.next_state == "win":
                    nxt = win
                elif self.next_state == "lose":
                    nxt = lose
                else:
                    nxt = rng.integers(0, k, size=rows.size)
                np.add.at(self.continuation_counts_, nxt, 1)
                x_next[rows] = cands[r_idx, nxt]
            if var > 0.0:
                rho = (np.sum((x_next - mu_ref) ** 2, axis=1)
                       - np.sum((x_next - mu) ** 2, axis=1)) / (2.0 * var)
                agg["drift"].extend(rho.tolist())
            x = x_next
        if update:
            policy.store_.adam_step(float(self.lr))
        if self.task is not None:
            agg["oracle"].append(self.task.oracle_score(x, prompts))
        else:
            agg["oracle"].append(np.full(batch, np.nan))
        agg["prompts"].append(prompts)

    # -- use ---------------------------------------------------------------

    def _require_fitted(self) -> None:
        if not hasattr(self, "policy_"):
            raise NotFittedError("this aligner is not fitted yet")

    def sample(self, class_ids, rng, record: bool = False):
        self._require_fitted()
        return self.policy_.sample(class_ids, rng, record=record)
