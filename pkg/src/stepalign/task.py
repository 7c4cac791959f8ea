"""Synthetic emotion-conditioned signal task with an analytic spectral judge.

Each of the C classes is a sinusoid family with its own frequency and
amplitude; samples add a random phase and a small stochastic texture. The
judge compares the unit-normalized magnitude spectrum of a signal against a
fixed per-class template, so it is phase-blind and shift-invariant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateStateError
from .validation import as_labels, as_matrix, as_vector

DEFAULT_DIM = 64
DEFAULT_N_CLASSES = 5
DEFAULT_TEXTURE_SCALE = 0.05


@dataclass(frozen=True)
class EmotionClass:
    class_id: int
    frequency: float
    amplitude: float


def class_table(n_classes: int = DEFAULT_N_CLASSES) -> list[EmotionClass]:
    """Class c has frequency 4 + 2c cycles and amplitude 0.5 + 0.1c."""
    return [EmotionClass(c, 4.0 + 2.0 * c, 0.5 + 0.1 * c) for c in range(n_classes)]


class SignalTask:
    """Sample generator plus the analytic class-consistency judge."""

    def __init__(self, dim: int = DEFAULT_DIM, n_classes: int = DEFAULT_N_CLASSES,
                 texture_scale: float = DEFAULT_TEXTURE_SCALE):
        dim = int(dim)
        n_classes = int(n_classes)
        if dim < 4:
            raise ConfigurationError(f"dim must be >= 4, got {dim}")
        if n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
        classes = class_table(n_classes)
        if classes[-1].frequency >= dim / 2:
            raise ConfigurationError(
                f"highest class frequency {classes[-1].frequency} is not below "
                f"the Nyquist bin {dim / 2}"
            )
        self.dim = dim
        self.n_classes = n_classes
        self.texture_scale = float(texture_scale)
        self.classes = classes
        self.templates = np.stack([self._template(c) for c in classes])

    def _template(self, cls: EmotionClass) -> np.ndarray:
        grid = np.arange(self.dim)
        pure = cls.amplitude * np.sin(2.0 * np.pi * cls.frequency * grid / self.dim)
        mag = np.abs(np.fft.rfft(pure))
        return mag / np.linalg.norm(mag)

    def generate_clean(self, class_ids, rng) -> np.ndarray:
        """Clean samples, shape (n, dim): phase-randomized class sinusoid plus texture."""
        y = as_labels(class_ids, self.n_classes, "class_ids")
        n = y.shape[0]
        grid = np.arange(self.dim)
        freqs = np.array([self.classes[c].frequency for c in y])
        amps = np.array([self.classes[c].amplitude for c in y])
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
        base = amps[:, None] * np.sin(
            2.0 * np.pi * freqs[:, None] * grid[None, :] / self.dim + phase[:, None]
        )
        texture = rng.standard_normal((n, self.dim))
        return base + self.texture_scale * texture

    def oracle_score(self, x, class_id) -> np.ndarray | float:
        """Cosine between the signal's unit magnitude spectrum and the class template.

        Invariant to positive rescaling and to circular time shifts; raises on
        an all-zero signal.
        """
        single = np.asarray(x).ndim == 1
        X = as_matrix(x, cols=self.dim, name="x")
        y = as_labels(class_id, self.n_classes, "class_id")
        if y.shape[0] == 1 and X.shape[0] > 1:
            y = np.repeat(y, X.shape[0])
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("class_id count does not match sample count")
        mag = np.abs(np.fft.rfft(X, axis=1))
        norms = np.linalg.norm(mag, axis=1)
        if np.any(norms < 1e-12):
            raise DegenerateStateError("oracle_score of an all-zero signal")
        scores = np.einsum("ij,ij->i", mag / norms[:, None], self.templates[y])
        scores = np.clip(scores, -1.0, 1.0)
        return float(scores[0]) if single else scores

    def make_preference_pair(self, target: int, distractor: int, rng):
        """One (win, lose, prompt) triple: win drawn from `target`, lose from
        `distractor`; the prompt is the target class."""
        target = int(target)
        distractor = int(distractor)
        as_labels([target, distractor], self.n_classes, "classes")
        if target == distractor:
            raise ConfigurationError("target and distractor classes must differ")
        win = self.generate_clean([target], rng)[0]
        lose = self.generate_clean([distractor], rng)[0]
        return win, lose, target

    def make_pair_dataset(self, n_pairs: int, rng):
        """Vectorized pair dataset: wins (n, dim), loses (n, dim), prompts (n,)."""
        n_pairs = int(n_pairs)
        if n_pairs < 1:
            raise ConfigurationError("n_pairs must be >= 1")
        prompts = rng.integers(0, self.n_classes, size=n_pairs)
        shift = rng.integers(1, self.n_classes, size=n_pairs)
        distractors = (prompts + shift) % self.n_classes
        wins = self.generate_clean(prompts, rng)
        loses = self.generate_clean(distractors, rng)
        return wins, loses, prompts.astype(np.int64)


def save_sample_set(stem, samples: np.ndarray, class_ids, seed: int) -> None:
    """Flat binary matrix plus a JSON header (count, dim, class ids, seed)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    X = as_matrix(samples, name="samples")
    y = as_labels(class_ids, np.iinfo(np.int64).max, "class_ids")
    if y.shape[0] != X.shape[0]:
        raise ConfigurationError("class id count does not match sample count")
    header = {
        "count": int(X.shape[0]),
        "dim": int(X.shape[1]),
        "class_ids": [int(c) for c in y],
        "seed": int(seed),
        "dtype": "<f8",
        "payload": stem.name + ".bin",
    }
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def load_sample_set(stem) -> tuple[np.ndarray, np.ndarray, int]:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        header = json.load(fh)
    raw = stem.with_suffix(".bin").read_bytes()
    X = np.frombuffer(raw, dtype="<f8").reshape(header["count"], header["dim"]).copy()
    y = np.asarray(header["class_ids"], dtype=np.int64)
    if y.shape[0] != X.shape[0]:
        raise ConfigurationError(f"{stem}: header class ids do not match payload rows")
    return X, y, int(header["seed"])


def save_pair_set(stem, wins, loses, prompts, seed: int) -> None:
    """Pair dataset: wins and loses interleaved row-wise in one payload."""
    wins = as_matrix(wins, name="wins")
    loses = as_matrix(loses, cols=wins.shape[1], name="loses")
    if wins.shape != loses.shape:
        raise ConfigurationError("wins and loses must have the same shape")
    stacked = np.empty((2 * wins.shape[0], wins.shape[1]))
    stacked[0::2] = wins
    stacked[1::2] = loses
    ids = np.repeat(np.asarray(prompts, dtype=np.int64), 2)
    save_sample_set(stem, stacked, ids, seed)


def load_pair_set(stem) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    X, y, seed = load_sample_set(stem)
    if X.shape[0] % 2 != 0:
        raise ConfigurationError(f"{stem}: pair payload has odd row count")
    wins = X[0::2]
    loses = X[1::2]
    prompts = y[0::2]
    if not np.array_equal(prompts, y[1::2]):
        raise ConfigurationError(f"{stem}: pair members disagree on the prompt")
    return wins, loses, prompts, seed
