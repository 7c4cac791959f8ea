"""Emotion-aware stepwise preference alignment for a desk-scale diffusion
model on a synthetic emotion-conditioned signal task with an analytic oracle.

The pipeline has four stages: pretrain a conditional denoiser, train and
freeze a step-conditioned preference scorer, align the denoiser against the
frozen scorer with stepwise preference supervision, and evaluate against the
frozen reference. A CLI (`stepalign`) drives all stages plus the ablation
sweep and trajectory replay.
"""

from .align import StepwiseAligner, sample_candidates, step_loss, time_weight
from .baselines import (EndpointDpoAligner, RewardGradientAligner,
                        dpo_pair_loss, policy_gradient_loss)
from .config import (AlignConfig, EvalConfig, PretrainConfig, RunConfig,
                     ScheduleConfig, ScorerConfig, TaskConfig, config_digest,
                     dump_config, load_config)
from .diffusion import (ConditionalDenoiser, TrajectoryRecord,
                        gaussian_log_density, log_ratio, log_ratio_from_means,
                        pseudo_clean_from_eps, reverse_mean_from_eps)
from .errors import (ConfigurationError, DegenerateStateError, StepalignError,
                     UsageError)
from .evaluate import EvalReport, evaluate, permutation_pvalue, win_fraction
from .pipeline import (run_align, run_eval, run_pipeline, run_pretrain,
                       run_train_scorer)
from .ablation import run_ablation
from .schedule import NoiseSchedule, build_schedule, forward_sample
from .scorer import (StepPreference, StepwiseScorer, preference_loss,
                     preference_probability)
from .seeding import derive_rng, derive_seed
from .task import EmotionClass, SignalTask, class_table

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "ConditionalDenoiser",
    "ConfigurationError",
    "DegenerateStateError",
    "EmotionClass",
    "EndpointDpoAligner",
    "EvalConfig",
    "EvalReport",
    "NoiseSchedule",
    "PretrainConfig",
    "RewardGradientAligner",
    "RunConfig",
    "ScheduleConfig",
    "ScorerConfig",
    "SignalTask",
    "StepPreference",
    "StepalignError",
    "StepwiseAligner",
    "StepwiseScorer",
    "TaskConfig",
    "TrajectoryRecord",
    "UsageError",
    "build_schedule",
    "class_table",
    "config_digest",
    "derive_rng",
    "derive_seed",
    "dpo_pair_loss",
    "dump_config",
    "evaluate",
    "forward_sample",
    "gaussian_log_density",
    "load_config",
    "log_ratio",
    "log_ratio_from_means",
    "permutation_pvalue",
    "policy_gradient_loss",
    "preference_loss",
    "preference_probability",
    "pseudo_clean_from_eps",
    "reverse_mean_from_eps",
    "run_ablation",
    "run_align",
    "run_eval",
    "run_pipeline",
    "run_pretrain",
    "run_train_scorer",
    "sample_candidates",
    "step_loss",
    "time_weight",
    "win_fraction",
]
