"""Post-alignment evaluation against the reference model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .seeding import derive_rng
from .task import SignalTask

MIN_SAMPLES_PER_CLASS = 500


@dataclass
class EvalReport:
    """Aggregate comparison of an aligned policy against its reference."""
    n_per_class: int
    seed: int
    oracle_mean: float
    oracle_ref_mean: float
    oracle_per_class: list[float]
    oracle_ref_per_class: list[float]
    win_rate: float
    scorer_mean_t0: float
    logratio_drift: float
    config_digest: str = ""
    notes: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {
            "config_digest": self.config_digest,
            "seed": self.seed,
            "n_per_class": self.n_per_class,
            "oracle_mean": self.oracle_mean,
            "oracle_ref_mean": self.oracle_ref_mean,
            "win_rate": self.win_rate,
            "scorer_mean_t0": self.scorer_mean_t0,
            "logratio_drift": self.logratio_drift,
        }
        for c, (a, b) in enumerate(zip(self.oracle_per_class, self.oracle_ref_per_class)):
            row[f"oracle_class_{c}"] = a
            row[f"oracle_ref_class_{c}"] = b
        return row


def win_fraction(scores_a: np.ndarray, scores_b: np.ndarray) -> float:
    """Paired win rate of a over b; ties count one half, so a model compared
    against itself on shared noise scores exactly 0.5."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError("paired score arrays must have the same shape")
    return float(np.mean((a > b) + 0.5 * (a == b)))


def evaluate(policy, reference, scorer, task: SignalTask,
             n_per_class: int = MIN_SAMPLES_PER_CLASS, seed: int = 0,
             config_digest: str = "", drift_trajectories: int = 100,
             enforce_minimum: bool = True) -> EvalReport:
    """Paired-by-seed comparison: policy and reference consume identical
    noise streams per class, so per-sample oracle scores are comparable."""
    n_per_class = int(n_per_class)
    if enforce_minimum and n_per_class < MIN_SAMPLES_PER_CLASS:
        raise ConfigurationError(
            f"evaluation needs >= {MIN_SAMPLES_PER_CLASS} samples per class, "
            f"got {n_per_class}")
    per_class = []
    per_class_ref = []
    wins = []
    scorer_scores = []
    for c in range(task.n_classes):
        ids = np.full(n_per_class, c, dtype=np.int64)
        x_pol = policy.sample(ids, derive_rng(seed, f"eval-class{c}"))
        x_ref = reference.sample(ids, derive_rng(seed, f"eval-class{c}"))
        s_pol = task.oracle_score(x_pol, ids)
        s_ref = task.oracle_score(x_ref, ids)
        per_class.append(float(np.mean(s_pol)))
        per_class_ref.append(float(np.mean(s_ref)))
        wins.append((s_pol > s_ref) + 0.5 * (s_pol == s_ref))
        if scorer is not None:
            scorer_scores.append(scorer.score_batch(x_pol, 0, ids))
    drift = _logratio_drift(policy, reference, task, seed, drift_trajectories)
    scorer_mean = (float(np.mean(np.concatenate(scorer_scores)))
                   if scorer_scores else float("nan"))
    return EvalReport(
        n_per_class=n_per_class,
        seed=int(seed),
        oracle_mean=float(np.mean(per_class)),
        oracle_ref_mean=float(np.mean(per_class_ref)),
        oracle_per_class=per_class,
        oracle_ref_per_class=per_class_ref,
        win_rate=float(np.mean(np.concatenate(wins))),
        scorer_mean_t0=scorer_mean,
        logratio_drift=drift,
        config_digest=config_digest,
    )


def _logratio_drift(policy, reference, task, seed: int, n_traj: int) -> float:
    """Mean per-step log-likelihood ratio of the policy's own sampled
    transitions against the reference; zero when the models coincide."""
    if n_traj < 1:
        return 0.0
    prompts = (np.arange(int(n_traj)) % task.n_classes).astype(np.int64)
    _, xs = policy.sample(prompts, derive_rng(seed, "eval-drift"), record=True)
    schedule = policy.schedule_
    vals = []
    for t in range(1, schedule.n_steps + 1):
        var = schedule.posterior_var[t]
        if var <= 0.0:
            continue
        mu_pol = policy.reverse_mean(xs[t], t, prompts)
        mu_ref = reference.reverse_mean(xs[t], t, prompts)
        action = xs[t - 1]
        rho = (np.sum((action - mu_ref) ** 2, axis=1)
               - np.sum((action - mu_pol) ** 2, axis=1)) / (2.0 * var)
        vals.append(rho)
    return float(np.mean(np.concatenate(vals)))


def permutation_pvalue(scores, labels, n_permutations: int = 1000, rng=None) -> float:
    """Permutation test of class effect on scores; statistic is the spread
    (max - min) of per-class means. Returns the one-sided p-value."""
    if rng is None:
        rng = np.random.default_rng(0)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigurationError("permutation test needs at least 2 classes")

    def spread(lab):
        means = [scores[lab == c].mean() for c in classes]
        return max(means) - min(means)

    observed = spread(labels)
    hits = 0
    for _ in range(int(n_permutations)):
        if spread(rng.permutation(labels)) >= observed:
            hits += 1
    return (1.0 + hits) / (1.0 + n_permutations)
