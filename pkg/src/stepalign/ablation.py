"""Ablation sweep over the six comparison axes.

Every cell is one full align+evaluate run. All cells of a seed share one
pretrained checkpoint and one frozen scorer, so differences between cells
come only from the axis under study. The time-conditioning axis retrains
the supervision scorer per value, but evaluation always uses the shared
time-conditioned scorer so the scorer_mean column stays comparable.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .baselines import EndpointDpoAligner, RewardGradientAligner
from .config import RunConfig, config_digest
from .errors import ConfigurationError
from .evaluate import EvalReport, evaluate
from .pipeline import build_task, run_align, run_pretrain, run_train_scorer, write_run_stamp
from .reporting import write_csv
from .seeding import derive_seed

AXIS_VALUES = {
    "time-conditioning": ("on", "off"),
    "next-state": ("win", "lose", "random"),
    "candidates": (2, 4, 8),
    "timestep-range": ("pooled", "early", "late", "full"),
    "method": ("stepwise", "endpoint-dpo", "reward-pg"),
    "pair-selection": ("best-worst", "random-pair"),
}

CELL_COLUMNS = ["value", "seed", "oracle_mean", "win_rate", "scorer_mean",
                "logratio_drift"]


class _SeedArtifacts:
    """Shared per-seed models: pretrained denoiser plus frozen scorers."""

    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg = dataclasses.replace(cfg, seed=int(seed))
        self.task = build_task(cfg)
        self.denoiser = run_pretrain(self.cfg)
        self.scorer, _ = run_train_scorer(self.cfg, self.denoiser)
        self._blind_scorer = None
        self._default_report: EvalReport | None = None

    @property
    def blind_scorer(self):
        if self._blind_scorer is None:
            self._blind_scorer, _ = run_train_scorer(
                self.cfg, self.denoiser, time_conditioned=False)
        return self._blind_scorer

    def report(self, aligner) -> EvalReport:
        return evaluate(
            aligner.policy_, aligner.reference_, self.scorer, self.task,
            n_per_class=self.cfg.eval.n_per_class,
            seed=derive_seed(self.cfg.seed, "eval"),
            config_digest=config_digest(self.cfg),
            drift_trajectories=self.cfg.eval.drift_trajectories,
        )

    def default_report(self) -> EvalReport:
        if self._default_report is None:
            aligner = run_align(self.cfg, self.denoiser, self.scorer)
            self._default_report = self.report(aligner)
        return self._default_report


def _timestep_range(cfg: RunConfig, value: str):
    n_steps = int(cfg.schedule.n_steps)
    mid = n_steps // 2
    if value == "pooled":
        return None
    if value == "early":
        return (1, mid)
    if value == "late":
        return (mid + 1, n_steps - 1)
    if value == "full":
        return (1, n_steps - 1)
    raise ConfigurationError(f"unknown timestep-range value {value!r}")


def _is_default(axis: str, value) -> bool:
    return {
        "time-conditioning": value == "on",
        "next-state": value == "random",
        "candidates": value == 4,
        "timestep-range": value == "pooled",
        "method": value == "stepwise",
        "pair-selection": value == "best-worst",
    }[axis]


def _run_cell(art: _SeedArtifacts, axis: str, value) -> EvalReport:
    cfg = art.cfg
    if axis != "next-state" and _is_default(axis, value) and cfg.align.k == 4 \
            and cfg.align.pair_selection == "best-worst" \
            and cfg.align.t_range is None:
        return art.default_report()
    if axis == "time-conditioning":
        supervisor = art.scorer if value == "on" else art.blind_scorer
        aligner = run_align(cfg, art.denoiser, supervisor)
    elif axis == "next-state":
        # The continuation choice only shapes training when pooling happens
        # at many steps of a trajectory, so this axis runs in per-step mode.
        aligner = run_align(cfg, art.denoiser, art.scorer, mode="per-step",
                            next_state=str(value))
    elif axis == "candidates":
        aligner = run_align(cfg, art.denoiser, art.scorer, k=int(value))
    elif axis == "timestep-range":
        aligner = run_align(cfg, art.denoiser, art.scorer,
                            t_range=_timestep_range(cfg, str(value)))
    elif axis == "pair-selection":
        aligner = run_align(cfg, art.denoiser, art.scorer,
                            pair_selection=str(value))
    elif axis == "method":
        seed = derive_seed(cfg.seed, "align")
        if value == "stepwise":
            aligner = run_align(cfg, art.denoiser, art.scorer)
        elif value == "endpoint-dpo":
            aligner = EndpointDpoAligner(
                task=art.task, pairs_per_batch=max(1, cfg.align.batch_size // 2),
                lr=cfg.align.lr, epochs=cfg.align.epochs,
                batches_per_epoch=cfg.align.batches_per_epoch, seed=seed)
            aligner.fit(art.denoiser)
        elif value == "reward-pg":
            aligner = RewardGradientAligner(
                scorer=art.scorer, batch_size=cfg.align.batch_size,
                lr=cfg.align.lr, epochs=cfg.align.epochs,
                batches_per_epoch=cfg.align.batches_per_epoch, seed=seed)
            aligner.fit(art.denoiser)
        else:
            raise ConfigurationError(f"unknown method value {value!r}")
    else:
        raise ConfigurationError(f"unknown ablation axis {axis!r}")
    return art.report(aligner)


def summarize(rows_by_axis: dict) -> list[dict]:
    """Across-seed mean and standard deviation for every (axis, value)."""
    out = []
    for axis, rows in rows_by_axis.items():
        values = []
        for row in rows:
            if row["value"] not in values:
                values.append(row["value"])
        for value in values:
            block = [r for r in rows if r["value"] == value]
            entry = {"axis": axis, "value": value, "n_seeds": len(block)}
            for col in ("oracle_mean", "win_rate", "scorer_mean", "logratio_drift"):
                data = np.array([r[col] for r in block], dtype=np.float64)
                entry[col] = float(np.mean(data))
                entry[f"{col}_std"] = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
            out.append(entry)
    return out


SUMMARY_COLUMNS = ["axis", "value", "n_seeds",
                   "oracle_mean", "oracle_mean_std",
                   "win_rate", "win_rate_std",
                   "scorer_mean", "scorer_mean_std",
                   "logratio_drift", "logratio_drift_std"]


def run_ablation(cfg: RunConfig, out_dir=None, axes=None, seeds=None,
                 progress=None) -> dict[str, list[dict]]:
    """One full align+evaluate run per (axis value, seed).

    Returns {axis: [cell rows]}; with out_dir set, writes one CSV per axis
    plus an aggregate summary CSV.
    """
    axes = tuple(axes) if axes is not None else tuple(cfg.ablate.axes)
    seeds = tuple(int(s) for s in (seeds if seeds is not None else cfg.ablate.seeds))
    for axis in axes:
        if axis not in AXIS_VALUES:
            raise ConfigurationError(
                f"unknown ablation axis {axis!r}; supported axes: {list(AXIS_VALUES)}")
    if not seeds:
        raise ConfigurationError("ablation needs at least one seed")
    artifacts = {}
    rows_by_axis: dict[str, list[dict]] = {}
    for axis in axes:
        rows = []
        for value in AXIS_VALUES[axis]:
            for seed in seeds:
                if seed not in artifacts:
                    if progress:
                        progress(f"preparing shared models for seed {seed}")
                    artifacts[seed] = _SeedArtifacts(cfg, seed)
                if progress:
                    progress(f"axis {axis}: value {value}, seed {seed}")
                report = _run_cell(artifacts[seed], axis, value)
                rows.append({
                    "value": value,
                    "seed": seed,
                    "oracle_mean": report.oracle_mean,
                    "win_rate": report.win_rate,
                    "scorer_mean": report.scorer_mean_t0,
                    "logratio_drift": report.logratio_drift,
                })
        rows_by_axis[axis] = rows
        if out_dir is not None:
            out = write_run_stamp(cfg, out_dir)
            write_csv(out / f"ablation_{axis}.csv", CELL_COLUMNS, rows)
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation_summary.csv", SUMMARY_COLUMNS,
                  summarize(rows_by_axis))
    return rows_by_axis
