"""Class-conditional denoising model and the reverse-process primitives.

The estimator predicts the standard-normal draw that produced a noised
signal (eps-prediction) with a small tanh network over
(signal, sinusoidal time features, class one-hot). Reverse transitions are
Gaussians with mean derived from the eps prediction and fixed variance equal
to the forward posterior variance, which makes likelihood ratios between two
models with a shared schedule depend on their means only.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_params, save_params
from .errors import ConfigurationError, DegenerateStateError, UsageError
from .nets import Mlp, ParamStore, time_features
from .schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_N_STEPS,
                       NoiseSchedule, build_schedule, forward_sample)
from .validation import as_labels, as_matrix, check_timestep

PSEUDO_CLEAN_FLOOR = 1e-8


def gaussian_log_density(x, mean, var: float) -> np.ndarray | float:
    """Log density of an isotropic Gaussian with scalar variance."""
    var = float(var)
    if var <= 0.0:
        raise UsageError(f"gaussian_log_density needs var > 0, got {var}")
    single = np.asarray(x).ndim == 1
    X = as_matrix(x, name="x")
    M = as_matrix(mean, cols=X.shape[1], name="mean")
    if M.shape[0] == 1 and X.shape[0] > 1:
        M = np.broadcast_to(M, X.shape)
    if M.shape != X.shape:
        raise ConfigurationError("mean shape does not match x")
    d = X.shape[1]
    sq = np.sum((X - M) ** 2, axis=1)
    out = -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    return float(out[0]) if single else out


def log_ratio_from_means(x, mean_policy, mean_ref, var: float) -> np.ndarray | float:
    """log N(x; mean_policy, var) - log N(x; mean_ref, var).

    The shared fixed variance cancels the normalizer, leaving
    (||x - mean_ref||^2 - ||x - mean_policy||^2) / (2 var); exactly zero when
    the two means are bitwise equal.
    """
    var = float(var)
    if var <= 0.0:
        raise UsageError(f"log_ratio needs var > 0, got {var}")
    single = np.asarray(x).ndim == 1
    X = as_matrix(x, name="x")
    Mp = as_matrix(mean_policy, cols=X.shape[1], name="mean_policy")
    Mr = as_matrix(mean_ref, cols=X.shape[1], name="mean_ref")
    sq_ref = np.sum((X - Mr) ** 2, axis=1)
    sq_pol = np.sum((X - Mp) ** 2, axis=1)
    out = (sq_ref - sq_pol) / (2.0 * var)
    return float(out[0]) if single else out


def reverse_mean_from_eps(schedule: NoiseSchedule, x, t: int, eps_hat) -> np.ndarray:
    """Posterior-style reverse mean from an eps prediction at step t >= 1."""
    t = check_timestep(t, 1, schedule.n_steps)
    x = np.asarray(x, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x.shape:
        raise ConfigurationError("eps_hat shape does not match x")
    coef = schedule.betas[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
    return (x - coef * eps_hat) / np.sqrt(schedule.alphas[t])


def pseudo_clean_from_eps(schedule: NoiseSchedule, x, t: int, eps_hat) -> np.ndarray:
    """One-shot clean estimate x0_hat = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)."""
    t = check_timestep(t, 1, schedule.n_steps)
    ab = schedule.alpha_bar[t]
    if ab < PSEUDO_CLEAN_FLOOR:
        raise DegenerateStateError(
            f"pseudo-clean at t={t} is degenerate: alpha_bar={ab:.3e}"
        )
    x = np.asarray(x, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x.shape:
        raise ConfigurationError("eps_hat shape does not match x")
    return (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    """Replay record for one sampled trajectory: seed, prompt, and noise digests."""
    prompt: int
    seed: int
    x_init_digest: str
    z_digests: dict[int, str] = field(default_factory=dict)
    x_final_digest: str = ""
    checkpoint: str = ""

    def to_json(self) -> dict:
        return {
            "prompt": int(self.prompt),
            "seed": int(self.seed),
            "x_init_digest": self.x_init_digest,
            "z_digests": {str(t): d for t, d in self.z_digests.items()},
            "x_final_digest": self.x_final_digest,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrajectoryRecord":
        return cls(
            prompt=int(obj["prompt"]),
            seed=int(obj["seed"]),
            x_init_digest=obj["x_init_digest"],
            z_digests={int(t): d for t, d in obj["z_digests"].items()},
            x_final_digest=obj.get("x_final_digest", ""),
            checkpoint=obj.get("checkpoint", ""),
        )


class ConditionalDenoiser(BaseEstimator):
    """Eps-prediction network trained by denoising score matching.

    fit(X, y) draws (timestep, noise) pairs for clean signals X with class
    ids y and regresses the injected noise; sample() then runs ancestral
    reverse sampling from a standard-normal start.
    """

    def __init__(self, n_steps: int = DEFAULT_N_STEPS,
                 beta_min: float = DEFAULT_BETA_MIN,
                 beta_max: float = DEFAULT_BETA_MAX,
                 hidden=(128, 128), n_time_freq: int = 8, n_classes: int = 5,
                 epochs: int = 30, batch_size: int = 16, lr: float = 1e-4,
                 seed: int = 0):
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.hidden = hidden
        self.n_time_freq = n_time_freq
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    # -- construction ------------------------------------------------------

    def _init_model(self, dim: int, rng) -> None:
        hidden = tuple(int(h) for h in self.hidden)
        if not hidden:
            raise ConfigurationError("denoiser needs at least one hidden layer")
        self.dim_ = int(dim)
        self.schedule_ = build_schedule(self.n_steps, self.beta_min, self.beta_max)
        self.store_ = ParamStore()
        in_dim = self.dim_ + 2 * self.n_time_freq + self.n_classes
        # Zero-init output layer: the untrained model predicts eps = 0 for
        # every class, so its samples carry no class information at all.
        self.net_ = Mlp(self.store_, "net", [in_dim, *hidden, self.dim_],
                        rng=rng, zero_last=True)

    def _require_fitted(self) -> None:
        if not hasattr(self, "store_"):
            raise NotFittedError("this ConditionalDenoiser is not fitted yet")

    def _features(self, X: np.ndarray, t, y: np.ndarray) -> np.ndarray:
        tf = time_features(t, self.n_time_freq)
        if tf.ndim == 1:
            tf = np.broadcast_to(tf, (X.shape[0], tf.shape[0]))
        onehot = np.zeros((X.shape[0], self.n_classes))
        onehot[np.arange(X.shape[0]), y] = 1.0
        return np.concatenate([X, tf, onehot], axis=1)

    def _check_xy(self, x, y):
        single = np.asarray(x).ndim == 1
        X = as_matrix(x, cols=self.dim_, name="x")
        y = as_labels(y, self.n_classes, "y")
        if y.shape[0] == 1 and X.shape[0] > 1:
            y = np.repeat(y, X.shape[0])
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("class id count does not match sample count")
        return X, y, single

    # -- training ----------------------------------------------------------

    def denoising_loss(self, X, t, y, eps) -> float:
        """Mean squared eps-prediction error over all entries of a batch."""
        self._require_fitted()
        X, y, _ = self._check_xy(X, y)
        eps = as_matrix(eps, cols=self.dim_, name="eps")
        x_t = forward_sample(self.schedule_, X, t, eps)
        eps_hat = self.predict_eps(x_t, t, y)
        return float(np.mean((eps_hat - eps) ** 2))

    def fit(self, X, y):
        X = as_matrix(X, name="X")
        rng = np.random.default_rng(self.seed)
        self._init_model(X.shape[1], rng)
        y = as_labels(y, self.n_classes, "y")
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("y length does not match X")
        n = X.shape[0]
        bs = int(self.batch_size)
        if bs < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.loss_curve_ = []
        for _ in range(int(self.epochs)):
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                xb, yb = X[idx], y[idx]
                tb = rng.integers(1, self.schedule_.n_steps + 1, size=idx.shape[0])
                eps = rng.standard_normal(xb.shape)
                x_t = forward_sample(self.schedule_, xb, tb, eps)
                feats = self._features(x_t, tb, yb)
                eps_hat, cache = self.net_.forward(feats)
                resid = eps_hat - eps
                loss = float(np.mean(resid ** 2))
                self.store_.zero_grads()
                self.net_.backward(cache, 2.0 * resid / resid.size)
                self.store_.adam_step(self.lr)
                losses.append(loss)
            self.loss_curve_.append(float(np.mean(losses)))
        return self

    # -- reverse process ---------------------------------------------------

    def predict_eps(self, x, t, y) -> np.ndarray:
        self._require_fitted()
        X, y, single = self._check_xy(x, y)
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            check_timestep(int(t_arr), 0, self.schedule_.n_steps)
        elif np.any(t_arr < 0) or np.any(t_arr > self.schedule_.n_steps):
            raise UsageError(f"t outside [0, {self.schedule_.n_steps}]")
        out, _ = self.net_.forward(self._features(X, t_arr, y))
        return out[0] if single else out

    def reverse_mean(self, x, t: int, y) -> np.ndarray:
        """Mean of the reverse transition from step t (t >= 1)."""
        self._require_fitted()
        X, y, single = self._check_xy(x, y)
        t = check_timestep(t, 1, self.schedule_.n_steps)
        mu = reverse_mean_from_eps(self.schedule_, X, t, self.predict_eps(X, t, y))
        return mu[0] if single else mu

    def reverse_mean_with_cache(self, X, t: int, y):
        """Batched reverse mean plus the network cache needed to backprop
        a cotangent on the mean into the parameters."""
        self._require_fitted()
        X, y, _ = self._check_xy(X, y)
        t = check_timestep(t, 1, self.schedule_.n_steps)
        eps_hat, cache = self.net_.forward(self._features(X, t, y))
        mu = reverse_mean_from_eps(self.schedule_, X, t, eps_hat)
        return mu, cache

    def backprop_mean(self, cache, d_mu: np.ndarray, t: int) -> None:
        """Accumulate dL/dparams given dL/d(reverse mean) at step t."""
        self._require_fitted()
        t = check_timestep(t, 1, self.schedule_.n_steps)
        coef = self.schedule_.betas[t] / np.sqrt(1.0 - self.schedule_.alpha_bar[t])
        d_eps = np.asarray(d_mu, dtype=np.float64) * (-coef / np.sqrt(self.schedule_.alphas[t]))
        self.net_.backward(cache, d_eps)

    def _row_coefs(self, t_rows: np.ndarray):
        t_rows = np.asarray(t_rows, dtype=np.int64)
        if np.any(t_rows < 1) or np.any(t_rows > self.schedule_.n_steps):
            raise UsageError(f"t outside [1, {self.schedule_.n_steps}]")
        coef = self.schedule_.betas[t_rows] / np.sqrt(1.0 - self.schedule_.alpha_bar[t_rows])
        return t_rows, coef, np.sqrt(self.schedule_.alphas[t_rows])

    def reverse_mean_rows_with_cache(self, X, t_rows, y):
        """Reverse means for a batch with one timestep per row."""
        self._require_fitted()
        X, y, _ = self._check_xy(X, y)
        t_rows, coef, sq_alpha = self._row_coefs(t_rows)
        if t_rows.shape != (X.shape[0],):
            raise ConfigurationError("t_rows must have one entry per row")
        eps_hat, cache = self.net_.forward(self._features(X, t_rows, y))
        mu = (X - coef[:, None] * eps_hat) / sq_alpha[:, None]
        return mu, cache

    def backprop_mean_rows(self, cache, d_mu: np.ndarray, t_rows) -> None:
        self._require_fitted()
        t_rows, coef, sq_alpha = self._row_coefs(t_rows)
        d_eps = np.asarray(d_mu, dtype=np.float64) * (-coef / sq_alpha)[:, None]
        self.net_.backward(cache, d_eps)

    def reverse_step(self, x, t: int, y, rng):
        """One ancestral step: returns (x_prev, z). z is None when the
        transition is deterministic (posterior variance zero)."""
        self._require_fitted()
        X, y, single = self._check_xy(x, y)
        t = check_timestep(t, 1, self.schedule_.n_steps)
        mu = reverse_mean_from_eps(self.schedule_, X, t, self.predict_eps(X, t, y))
        var = self.schedule_.posterior_var[t]
        if var > 0.0:
            z = rng.standard_normal(X.shape)
            x_prev = mu + np.sqrt(var) * z
        else:
            z = None
            x_prev = mu
        if single:
            return x_prev[0], (None if z is None else z[0])
        return x_prev, z

    def sample(self, class_ids, rng, record: bool = False):
        """Ancestral samples for the given class ids.

        With record=True also returns the state array xs of shape
        (n_steps+1, n, dim), where xs[t] is the state at timestep t.
        """
        self._require_fitted()
        y = as_labels(class_ids, self.n_classes, "class_ids")
        n = y.shape[0]
        x = rng.standard_normal((n, self.dim_))
        xs = None
        if record:
            xs = np.empty((self.schedule_.n_steps + 1, n, self.dim_))
            xs[self.schedule_.n_steps] = x
        for t in range(self.schedule_.n_steps, 0, -1):
            x, _ = self.reverse_step(x, t, y, rng)
            if record:
                xs[t - 1] = x
        return (x, xs) if record else x

    def sample_one_recorded(self, class_id: int, seed: int) -> tuple[np.ndarray, TrajectoryRecord]:
        """Single trajectory from its own seeded generator, with noise digests
        recorded for replay."""
        self._require_fitted()
        rng = np.random.default_rng(int(seed))
        x = rng.standard_normal(self.dim_)
        rec = TrajectoryRecord(prompt=int(class_id), seed=int(seed),
                               x_init_digest=_digest(x))
        for t in range(self.schedule_.n_steps, 0, -1):
            x, z = self.reverse_step(x, t, [class_id], rng)
            if z is not None:
                rec.z_digests[t] = _digest(z)
        # The final digest depends on the model parameters, so replaying
        # against the wrong checkpoint is caught even though the noise
        # stream would reproduce bit-for-bit from the seed alone.
        rec.x_final_digest = _digest(x)
        return x, rec

    def pseudo_clean(self, x, t: int, y) -> np.ndarray:
        self._require_fitted()
        X, y, single = self._check_xy(x, y)
        t = check_timestep(t, 1, self.schedule_.n_steps)
        out = pseudo_clean_from_eps(self.schedule_, X, t, self.predict_eps(X, t, y))
        return out[0] if single else out

    # -- plumbing ----------------------------------------------------------

    def copy_model(self) -> "ConditionalDenoiser":
        """Independent copy with its own parameter store (same schedule)."""
        self._require_fitted()
        twin = ConditionalDenoiser(**self.get_params(deep=False))
        twin.dim_ = self.dim_
        twin.schedule_ = self.schedule_
        twin.store_ = self.store_.copy()
        twin.net_ = Mlp(twin.store_, "net", list(self.net_.widths))
        twin.loss_curve_ = list(getattr(self, "loss_curve_", []))
        return twin

    def save(self, stem) -> None:
        self._require_fitted()
        meta = {"kind": "denoiser", "dim": self.dim_, **self.get_params(deep=False)}
        meta["hidden"] = [int(h) for h in self.hidden]
        save_params(stem, self.store_, meta)

    @classmethod
    def load(cls, stem) -> "ConditionalDenoiser":
        store, meta = load_params(stem)
        if meta.get("kind") != "denoiser":
            raise ConfigurationError(f"{stem} is not a denoiser checkpoint")
        meta = dict(meta)
        dim = int(meta.pop("dim"))
        meta.pop("kind")
        unknown = sorted(set(meta) - set(cls().get_params(deep=False)))
        if unknown:
            raise ConfigurationError(f"{stem}: unknown checkpoint fields {unknown}")
        model = cls(**meta)
        rng = np.random.default_rng(0)
        model._init_model(dim, rng)
        model.store_.assign_from(store)
        return model


def log_ratio(policy: ConditionalDenoiser, reference: ConditionalDenoiser,
              x_parent, t: int, y, candidate) -> np.ndarray | float:
    """Log-likelihood ratio of a candidate next state under two denoisers
    sharing one schedule; differentiable through the policy mean only."""
    policy._require_fitted()
    reference._require_fitted()
    if not policy.schedule_.same_as(reference.schedule_):
        raise ConfigurationError("policy and reference schedules differ")
    t = check_timestep(t, 1, policy.schedule_.n_steps)
    var = policy.schedule_.posterior_var[t]
    mu_pol = policy.reverse_mean(x_parent, t, y)
    mu_ref = reference.reverse_mean(x_parent, t, y)
    return log_ratio_from_means(candidate, mu_pol, mu_ref, var)
