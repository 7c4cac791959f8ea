"""Shared small-scale fixtures for the unit tests.

Everything here is deliberately tiny (short schedules, narrow nets, few
epochs) so the unit modules stay fast; the full-scale defaults are exercised
only by test_acceptance.py.
"""

import numpy as np
import pytest

from stepalign.diffusion import ConditionalDenoiser
from stepalign.schedule import build_schedule
from stepalign.scorer import StepwiseScorer
from stepalign.task import SignalTask

SMALL_DIM = 24
SMALL_CLASSES = 3
SMALL_STEPS = 10


@pytest.fixture(scope="session")
def small_task() -> SignalTask:
    return SignalTask(dim=SMALL_DIM, n_classes=SMALL_CLASSES)


@pytest.fixture(scope="session")
def small_schedule():
    return build_schedule(n_steps=SMALL_STEPS, beta_min=1e-4, beta_max=0.2)


def _fit_small_denoiser(task: SignalTask, seed: int, epochs: int = 150) -> ConditionalDenoiser:
    # (64, 64) x 150 epochs is the smallest configuration whose samples
    # clearly track their class label; one hidden layer stays muddled.
    rng = np.random.default_rng(seed + 1000)
    n_per_class = 200
    y = np.repeat(np.arange(task.n_classes), n_per_class)
    X = task.generate_clean(y, rng)
    model = ConditionalDenoiser(n_steps=SMALL_STEPS, beta_min=1e-4, beta_max=0.2,
                                hidden=(64, 64), n_time_freq=4,
                                n_classes=task.n_classes, epochs=epochs,
                                batch_size=32, lr=1e-3, seed=seed)
    return model.fit(X, y)


@pytest.fixture(scope="session")
def small_denoiser(small_task) -> ConditionalDenoiser:
    return _fit_small_denoiser(small_task, seed=0)


def fit_small_scorer(task, schedule, epochs=2, seed=3, **kw) -> StepwiseScorer:
    """A quickly trained, unfrozen scorer for behavioral tests."""
    rng = np.random.default_rng(seed + 500)
    wins, loses, prompts = task.make_pair_dataset(256, rng)
    scorer = StepwiseScorer(schedule=schedule, embed_dim=8, hidden=(32,),
                            n_time_freq=4, epochs=epochs, batch_size=64,
                            n_classes=task.n_classes, seed=seed, **kw)
    return scorer.fit(np.stack([wins, loses], axis=1), prompts)


@pytest.fixture(scope="session")
def small_scorer(small_task, small_schedule) -> StepwiseScorer:
    rng = np.random.default_rng(7)
    wins, loses, prompts = small_task.make_pair_dataset(800, rng)
    scorer = StepwiseScorer(schedule=small_schedule, embed_dim=8, hidden=(64,),
                            n_time_freq=4, temperature=10.0,
                            epochs=15, batch_size=64,
                            n_classes=small_task.n_classes, seed=1)
    scorer.fit(np.stack([wins, loses], axis=1), prompts)
    return scorer.freeze()
