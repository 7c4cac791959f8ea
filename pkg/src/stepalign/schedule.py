"""Discrete noising schedule and the closed-form forward (noising) process.

Arrays are indexed by timestep t in [0, T]; index 0 is the clean signal, so
betas[0] is unused (zero), alpha_bar[0] == 1, and posterior_var[1] == 0 (the
final denoising transition is deterministic).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .validation import check_timestep

DEFAULT_N_STEPS = 50
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.2


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    def sigma(self, t: int) -> float:
        """Per-step transition standard deviation, sqrt(posterior_var[t])."""
        t = check_timestep(t, 1, self.n_steps)
        return float(np.sqrt(self.posterior_var[t]))

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.n_steps == other.n_steps and np.array_equal(self.betas, other.betas)


def build_schedule(n_steps: int = DEFAULT_N_STEPS,
                   beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    n_steps = int(n_steps)
    if n_steps < 2:
        raise ConfigurationError(f"n_steps must be >= 2, got {n_steps}")
    beta_min = float(beta_min)
    beta_max = float(beta_max)
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = np.zeros(n_steps + 1)
    betas[1:] = np.linspace(beta_min, beta_max, n_steps)
    alphas = 1.0 - betas
    alphas[0] = 1.0
    # Sequential product so alpha_bar[t] == alpha_bar[t-1] * alphas[t] exactly.
    alpha_bar = np.ones(n_steps + 1)
    for t in range(1, n_steps + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alphas[t]
    posterior_var = np.zeros(n_steps + 1)
    for t in range(1, n_steps + 1):
        posterior_var[t] = betas[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
    return NoiseSchedule(n_steps=n_steps, betas=betas, alphas=alphas,
                         alpha_bar=alpha_bar, posterior_var=posterior_var)


def forward_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Noise x0 to level t with the given standard-normal draw eps.

    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps. Accepts a
    scalar t or one t per row; eps must match x0's shape (explicit so a pair
    can share one draw).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ConfigurationError(f"eps shape {eps.shape} does not match x0 {x0.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        check_timestep(int(t_arr), 0, schedule.n_steps)
        ab = schedule.alpha_bar[int(t_arr)]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if x0.ndim != 2 or t_arr.shape != (x0.shape[0],):
        raise ConfigurationError("per-row t requires x0 of shape (len(t), dim)")
    if np.any(t_arr < 0) or np.any(t_arr > schedule.n_steps):
        raise UsageError(f"t outside [0, {schedule.n_steps}]")
    ab = schedule.alpha_bar[t_arr.astype(np.int64)][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
