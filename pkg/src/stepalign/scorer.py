"""Time-conditioned preference scorer over noisy signals.

The scorer embeds a (possibly noisy) signal with a small tanh encoder whose
penultimate activations get a scale-and-shift computed from the timestep
features, then compares the normalized embedding against a trainable
per-class prompt embedding by cosine. Training minimizes the logistic
pairwise loss on (win, lose) pairs noised to a shared level with one shared
noise draw, so the comparison isolates the signal difference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_params, save_params
from .errors import ConfigurationError, DegenerateStateError, UsageError
from .nets import Mlp, ParamStore, time_features
from .schedule import NoiseSchedule, build_schedule, forward_sample
from .validation import as_labels, as_matrix

EMBED_NORM_FLOOR = 1e-12


def preference_probability(score_win, score_lose, temperature: float = 10.0):
    """Probability the first member is preferred: sigmoid(tau * gap)."""
    if temperature <= 0.0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    gap = np.asarray(score_win, dtype=np.float64) - np.asarray(score_lose, dtype=np.float64)
    out = expit(temperature * gap)
    return float(out) if out.ndim == 0 else out


def preference_loss(score_win, score_lose, temperature: float = 10.0):
    """Logistic pairwise loss log(1 + exp(-tau * gap))."""
    if temperature <= 0.0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    gap = np.asarray(score_win, dtype=np.float64) - np.asarray(score_lose, dtype=np.float64)
    out = np.logaddexp(0.0, -temperature * gap)
    return float(out) if out.ndim == 0 else out


@dataclass
class StepPreference:
    """Winner/loser chosen from one candidate pool at one timestep."""
    win: np.ndarray
    lose: np.ndarray
    score_win: float
    score_lose: float
    win_index: int
    lose_index: int
    t: int
    prompt: int


class StepwiseScorer(BaseEstimator):
    """Pairwise class-consistency scorer conditioned on the noise level.

    fit(X, y) takes stacked pairs X of shape (n, 2, dim) with X[:, 0] the
    preferred member, and prompt class ids y. After freeze() the parameters
    are immutable and the scorer can drive candidate ranking.
    """

    def __init__(self, schedule: NoiseSchedule | None = None, denoiser=None,
                 embed_dim: int = 16, hidden=(256,), n_time_freq: int = 8,
                 temperature: float = 10.0, time_conditioned: bool = True,
                 pseudo_clean_input: bool = False, pair_matched_noise: bool = True,
                 encoder_lr: float = 1e-5, head_lr: float = 1e-3,
                 epochs: int = 80, batch_size: int = 64,
                 t_min: int = 1, t_max: int | None = None,
                 n_classes: int = 5, seed: int = 0):
        self.schedule = schedule
        self.denoiser = denoiser
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.n_time_freq = n_time_freq
        self.temperature = temperature
        self.time_conditioned = time_conditioned
        self.pseudo_clean_input = pseudo_clean_input
        self.pair_matched_noise = pair_matched_noise
        self.encoder_lr = encoder_lr
        self.head_lr = head_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.t_min = t_min
        self.t_max = t_max
        self.n_classes = n_classes
        self.seed = seed

    # -- construction ------------------------------------------------------

    def _init_model(self, dim: int, rng) -> None:
        hidden = tuple(int(h) for h in self.hidden)
        if not hidden:
            raise ConfigurationError("scorer needs at least one hidden layer")
        if self.temperature <= 0.0:
            raise ConfigurationError("temperature must be positive")
        self.dim_ = int(dim)
        self.frozen_ = False
        self.store_ = ParamStore()
        n_feat = 2 * self.n_time_freq
        in_dim = self.dim_ + n_feat
        self.enc_ = Mlp(self.store_, "enc", [in_dim, *hidden], rng=rng, tanh_output=True)
        width = hidden[-1]
        # Zero-init scale/shift so the time modulation starts as identity.
        self.store_.add("film.scale", np.zeros((width, n_feat)))
        self.store_.add("film.shift", np.zeros((width, n_feat)))
        self.store_.add("out.W", rng.standard_normal((self.embed_dim, width)) / np.sqrt(width))
        self.store_.add("out.b", np.zeros(self.embed_dim))
        self.store_.add("prompt.table",
                        rng.standard_normal((self.n_classes, self.embed_dim))
                        / np.sqrt(self.embed_dim))

    def _require_fitted(self) -> None:
        if not hasattr(self, "store_"):
            raise NotFittedError("this StepwiseScorer is not fitted yet")

    def _lr_map(self) -> dict:
        return {"enc": self.encoder_lr, "film": self.head_lr,
                "out": self.head_lr, "prompt": self.head_lr}

    # -- scoring -----------------------------------------------------------

    def _time_input(self, t, n_rows: int) -> np.ndarray:
        tf = time_features(t, self.n_time_freq)
        if tf.ndim == 1:
            tf = np.broadcast_to(tf, (n_rows, tf.shape[0])).copy()
        if not self.time_conditioned:
            tf = np.zeros_like(tf)
        return tf

    def _pseudo_clean_rows(self, X: np.ndarray, t_arr: np.ndarray,
                           y: np.ndarray) -> np.ndarray:
        if self.denoiser is None:
            raise ConfigurationError("pseudo_clean_input requires a denoiser")
        sched = self.denoiser.schedule_
        active = t_arr > 0
        if not np.any(active):
            return X
        out = X.copy()
        ab = sched.alpha_bar[t_arr[active]]
        if np.any(ab < 1e-8):
            raise DegenerateStateError("pseudo-clean at a fully noised step")
        eps_hat = self.denoiser.predict_eps(X[active], t_arr[active], y[active])
        out[active] = (X[active] - np.sqrt(1.0 - ab)[:, None] * eps_hat) / np.sqrt(ab)[:, None]
        return out

    def _score_cached(self, x, t, y):
        self._require_fitted()
        single = np.asarray(x).ndim == 1
        X = as_matrix(x, cols=self.dim_, name="x")
        y = as_labels(y, self.n_classes, "prompt")
        if y.shape[0] == 1 and X.shape[0] > 1:
            y = np.repeat(y, X.shape[0])
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("prompt count does not match sample count")
        t_arr = np.asarray(t)
        if np.any(t_arr < 0):
            raise UsageError("t must be >= 0")
        if t_arr.ndim == 0:
            t_rows = np.full(X.shape[0], int(t_arr), dtype=np.int64)
        else:
            t_rows = t_arr.astype(np.int64)
            if t_rows.shape != (X.shape[0],):
                raise ConfigurationError("per-row t must have one entry per sample")
        if self.pseudo_clean_input:
            X = self._pseudo_clean_rows(X, t_rows, y)
        tf = self._time_input(t_rows, X.shape[0])
        u = np.concatenate([X, tf], axis=1)
        h_pre, enc_cache = self.enc_.forward(u)
        gain = 1.0 + tf @ self.store_.param("film.scale").T
        shift = tf @ self.store_.param("film.shift").T
        h = gain * h_pre + shift
        w_out = self.store_.param("out.W")
        emb = h @ w_out.T + self.store_.param("out.b")
        enorm = np.linalg.norm(emb, axis=1)
        if np.any(enorm < EMBED_NORM_FLOOR):
            raise DegenerateStateError("state embedding collapsed to zero norm")
        ehat = emb / enorm[:, None]
        prompt = self.store_.param("prompt.table")[y]
        pnorm = np.linalg.norm(prompt, axis=1)
        if np.any(pnorm < EMBED_NORM_FLOOR):
            raise DegenerateStateError("prompt embedding collapsed to zero norm")
        phat = prompt / pnorm[:, None]
        s = np.einsum("ij,ij->i", ehat, phat)
        cache = (enc_cache, tf, h_pre, gain, h, enorm, ehat, pnorm, phat, s, y)
        return (s, cache, single)

    def _backward(self, cache, d_score: np.ndarray) -> None:
        enc_cache, tf, h_pre, gain, h, enorm, ehat, pnorm, phat, s, y = cache
        ds = np.asarray(d_score, dtype=np.float64)
        d_emb = ds[:, None] * (phat - s[:, None] * ehat) / enorm[:, None]
        d_prompt = ds[:, None] * (ehat - s[:, None] * phat) / pnorm[:, None]
        np.add.at(self.store_.grad("prompt.table"), y, d_prompt)
        w_out = self.store_.param("out.W")
        self.store_.grad("out.W")[...] += d_emb.T @ h
        self.store_.grad("out.b")[...] += d_emb.sum(axis=0)
        dh = d_emb @ w_out
        self.store_.grad("film.scale")[...] += (dh * h_pre).T @ tf
        self.store_.grad("film.shift")[...] += dh.T @ tf
        self.enc_.backward(enc_cache, dh * gain)

    def score_state(self, x, t, prompt):
        """Cosine score of states against a prompt class; scalar in, scalar out."""
        s, _, single = self._score_cached(x, t, prompt)
        return float(s[0]) if single else s

    def score_batch(self, X, t, prompts) -> np.ndarray:
        s, _, _ = self._score_cached(X, t, prompts)
        return s

    # -- training ----------------------------------------------------------

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != 2:
            raise ConfigurationError(f"X must have shape (n, 2, dim), got {X.shape}")
        if self.schedule is None:
            raise ConfigurationError("scorer fit requires a noise schedule")
        if getattr(self, "frozen_", False):
            raise UsageError("cannot fit a frozen scorer")
        rng = np.random.default_rng(self.seed)
        self._init_model(X.shape[2], rng)
        wins = as_matrix(X[:, 0], cols=self.dim_, name="wins")
        loses = as_matrix(X[:, 1], cols=self.dim_, name="loses")
        y = as_labels(y, self.n_classes, "y")
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("y length does not match X")
        t_hi = self.schedule.n_steps if self.t_max is None else int(self.t_max)
        t_lo = int(self.t_min)
        if not 1 <= t_lo <= t_hi <= self.schedule.n_steps:
            raise ConfigurationError(f"bad training range [{t_lo}, {t_hi}]")
        n = X.shape[0]
        bs = int(self.batch_size)
        self.loss_curve_ = []
        for _ in range(int(self.epochs)):
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                losses.append(self._train_batch(wins[idx], loses[idx], y[idx],
                                                t_lo, t_hi, rng))
            self.loss_curve_.append(float(np.mean(losses)))
        return self

    def _train_batch(self, wins, loses, prompts, t_lo, t_hi, rng) -> float:
        """One optimizer step on a batch of pairs; returns the batch loss."""
        if getattr(self, "frozen_", False):
            raise UsageError("cannot train a frozen scorer")
        b = wins.shape[0]
        tb = rng.integers(t_lo, t_hi + 1, size=b)
        eps = rng.standard_normal(wins.shape)
        eps_lose = eps if self.pair_matched_noise else rng.standard_normal(wins.shape)
        xw = forward_sample(self.schedule, wins, tb, eps)
        xl = forward_sample(self.schedule, loses, tb, eps_lose)
        s_w, cache_w, _ = self._score_cached(xw, tb, prompts)
        s_l, cache_l, _ = self._score_cached(xl, tb, prompts)
        tau = float(self.temperature)
        gap = s_w - s_l
        loss = float(np.mean(np.logaddexp(0.0, -tau * gap)))
        d_gap = -tau * expit(-tau * gap) / b
        self.store_.zero_grads()
        self._backward(cache_w, d_gap)
        self._backward(cache_l, -d_gap)
        self.store_.adam_step(self._lr_map())
        return loss

    def freeze(self) -> "StepwiseScorer":
        self._require_fitted()
        self.store_.freeze()
        self.frozen_ = True
        return self

    # -- selection ---------------------------------------------------------

    def rank(self, candidates, t: int, prompt: int) -> StepPreference:
        """Pick winner (first max) and loser (first min among the rest) from a
        candidate pool at one timestep. Requires a frozen scorer."""
        self._require_fitted()
        if not self.frozen_:
            raise UsageError("rank requires a frozen scorer")
        C = as_matrix(candidates, cols=self.dim_, name="candidates")
        if C.shape[0] < 2:
            raise UsageError("rank needs at least 2 candidates")
        scores = self.score_batch(C, t, int(prompt))
        win = int(np.argmax(scores))
        rest = [i for i in range(C.shape[0]) if i != win]
        lose = min(rest, key=lambda i: (scores[i], i))
        return StepPreference(win=C[win].copy(), lose=C[lose].copy(),
                              score_win=float(scores[win]), score_lose=float(scores[lose]),
                              win_index=win, lose_index=lose, t=int(t), prompt=int(prompt))

    # -- evaluation --------------------------------------------------------

    def pair_accuracy(self, wins, loses, prompts, t_lo: int, t_hi: int,
                      draws_per_pair: int = 4, rng=None) -> float:
        """Fraction of noised pairs ranked correctly over a timestep range,
        with the shared-noise protocol used in training."""
        self._require_fitted()
        if rng is None:
            rng = np.random.default_rng(0)
        wins = as_matrix(wins, cols=self.dim_, name="wins")
        loses = as_matrix(loses, cols=self.dim_, name="loses")
        prompts = as_labels(prompts, self.n_classes, "prompts")
        sched = self.schedule if self.schedule is not None else (
            self.denoiser.schedule_ if self.denoiser is not None else None)
        if sched is None:
            raise ConfigurationError("pair_accuracy requires a noise schedule")
        hits = []
        for _ in range(int(draws_per_pair)):
            tb = rng.integers(t_lo, t_hi + 1, size=wins.shape[0])
            eps = rng.standard_normal(wins.shape)
            eps_l = eps if self.pair_matched_noise else rng.standard_normal(wins.shape)
            xw = forward_sample(sched, wins, tb, eps)
            xl = forward_sample(sched, loses, tb, eps_l)
            s_w = self.score_batch(xw, tb, prompts)
            s_l = self.score_batch(xl, tb, prompts)
            hits.append(np.mean(s_w > s_l))
        return float(np.mean(hits))

    def accuracy_by_bin(self, wins, loses, prompts, n_bins: int = 5,
                        t_lo: int = 1, t_hi: int | None = None,
                        draws_per_pair: int = 4, rng=None) -> list[dict]:
        """Held-out accuracy in equal timestep bins spanning [t_lo, t_hi]."""
        self._require_fitted()
        if rng is None:
            rng = np.random.default_rng(0)
        sched = self.schedule if self.schedule is not None else (
            self.denoiser.schedule_ if self.denoiser is not None else None)
        if sched is None:
            raise ConfigurationError("accuracy_by_bin requires a noise schedule")
        if t_hi is None:
            t_hi = sched.n_steps
        edges = np.linspace(t_lo, t_hi + 1, n_bins + 1).astype(int)
        rows = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            hi_inc = max(lo, hi - 1)
            acc = self.pair_accuracy(wins, loses, prompts, int(lo), int(hi_inc),
                                     draws_per_pair=draws_per_pair, rng=rng)
            rows.append({"t_lo": int(lo), "t_hi": int(hi_inc), "accuracy": acc})
        return rows

    # -- plumbing ----------------------------------------------------------

    def save(self, stem) -> None:
        self._require_fitted()
        params = self.get_params(deep=False)
        params.pop("schedule")
        params.pop("denoiser")
        meta = {"kind": "scorer", "dim": self.dim_, "frozen": bool(self.frozen_),
                **params}
        meta["hidden"] = [int(h) for h in self.hidden]
        if self.schedule is not None:
            meta["schedule_spec"] = [int(self.schedule.n_steps),
                                     float(self.schedule.betas[1]),
                                     float(self.schedule.betas[-1])]
        save_params(stem, self.store_, meta)

    @classmethod
    def load(cls, stem, denoiser=None) -> "StepwiseScorer":
        store, meta = load_params(stem)
        if meta.get("kind") != "scorer":
            raise ConfigurationError(f"{stem} is not a scorer checkpoint")
        meta = dict(meta)
        meta.pop("kind")
        dim = int(meta.pop("dim"))
        frozen = bool(meta.pop("frozen"))
        spec = meta.pop("schedule_spec", None)
        schedule = build_schedule(*spec) if spec else None
        allowed = set(cls().get_params(deep=False)) - {"schedule", "denoiser"}
        unknown = sorted(set(meta) - allowed)
        if unknown:
            raise ConfigurationError(f"{stem}: unknown checkpoint fields {unknown}")
        scorer = cls(schedule=schedule, denoiser=denoiser, **meta)
        scorer._init_model(dim, np.random.default_rng(0))
        scorer.store_.assign_from(store)
        if frozen:
            scorer.freeze()
        return scorer
