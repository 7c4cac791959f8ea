"""Stage runners shared by the command line and the ablation sweep.

Each runner builds its stage from a RunConfig, draws randomness from a named
substream of the root seed, and (optionally) writes the stage's artifacts
into an output directory. Wall-clock timings go into a JSON sidecar, never
into a CSV, so CSV output is byte-stable across reruns.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .align import StepwiseAligner
from .config import RunConfig, config_digest, dump_config
from .diffusion import ConditionalDenoiser, TrajectoryRecord
from .errors import ConfigurationError, UsageError
from .evaluate import EvalReport, evaluate
from .reporting import write_csv
from .schedule import build_schedule
from .scorer import StepwiseScorer
from .seeding import derive_rng, derive_seed
from .task import SignalTask, save_pair_set, save_sample_set


def build_task(cfg: RunConfig) -> SignalTask:
    return SignalTask(dim=cfg.task.dim, n_classes=cfg.task.n_classes,
                      texture_scale=cfg.task.texture_scale)


def write_run_stamp(cfg: RunConfig, out_dir) -> Path:
    """Resolved config plus its digest; every stage directory carries both."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    (out_dir / "digest.txt").write_text(config_digest(cfg) + "\n")
    return out_dir


def _write_timing(out_dir, stage: str, seconds: float, extra: dict | None = None) -> None:
    payload = {"stage": stage, "wall_seconds": float(seconds)}
    if extra:
        payload.update(extra)
    with open(Path(out_dir) / "timing.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def run_pretrain(cfg: RunConfig, out_dir=None) -> ConditionalDenoiser:
    """Denoising-score-matching pretraining on freshly generated task data."""
    start = time.perf_counter()
    task = build_task(cfg)
    rng = derive_rng(cfg.seed, "pretrain-data")
    y = np.repeat(np.arange(task.n_classes), int(cfg.pretrain.n_per_class))
    X = task.generate_clean(y, rng)
    model = ConditionalDenoiser(
        n_steps=cfg.schedule.n_steps,
        beta_min=cfg.schedule.beta_min,
        beta_max=cfg.schedule.beta_max,
        hidden=cfg.pretrain.hidden,
        n_time_freq=cfg.pretrain.n_time_freq,
        n_classes=task.n_classes,
        epochs=cfg.pretrain.epochs,
        batch_size=cfg.pretrain.batch_size,
        lr=cfg.pretrain.lr,
        seed=derive_seed(cfg.seed, "pretrain"),
    )
    model.fit(X, y)
    if out_dir is not None:
        out_dir = write_run_stamp(cfg, out_dir)
        model.save(out_dir / "denoiser")
        save_sample_set(out_dir / "train_set", X, y, derive_seed(cfg.seed, "pretrain-data"))
        rows = [{"epoch": e + 1, "loss": v} for e, v in enumerate(model.loss_curve_)]
        write_csv(out_dir / "pretrain_loss.csv", ["epoch", "loss"], rows)
        _write_timing(out_dir, "pretrain", time.perf_counter() - start)
    return model


def make_pair_data(cfg: RunConfig, task: SignalTask | None = None):
    """Training and held-out preference pairs from the scorer-data substream."""
    task = task if task is not None else build_task(cfg)
    rng = derive_rng(cfg.seed, "scorer-data")
    train = task.make_pair_dataset(cfg.scorer.n_pairs, rng)
    holdout = task.make_pair_dataset(cfg.scorer.holdout_pairs, rng)
    return train, holdout


def pooled_upper(cfg: RunConfig) -> int:
    """Last timestep eligible for pooled supervision: T minus the cutoff."""
    n_steps = int(cfg.schedule.n_steps)
    kappa = int(round(float(cfg.align.kappa_frac) * n_steps))
    return max(1, n_steps - kappa)


def run_train_scorer(cfg: RunConfig, denoiser: ConditionalDenoiser | None = None,
                     pairs=None, out_dir=None, time_conditioned: bool | None = None
                     ) -> tuple[StepwiseScorer, dict]:
    """Train and freeze the step-conditioned scorer; report held-out accuracy.

    Returns (frozen scorer, status dict). Accuracy below the configured floor
    is recorded as a warning flag, not an error.
    """
    start = time.perf_counter()
    task = build_task(cfg)
    if pairs is None:
        train, holdout = make_pair_data(cfg, task)
    else:
        train, holdout = pairs
    wins, loses, prompts = train
    sc = cfg.scorer
    schedule = build_schedule(cfg.schedule.n_steps, cfg.schedule.beta_min,
                              cfg.schedule.beta_max)
    if denoiser is not None and hasattr(denoiser, "schedule_") \
            and not denoiser.schedule_.same_as(schedule):
        raise ConfigurationError("denoiser schedule does not match the config")
    scorer = StepwiseScorer(
        schedule=schedule,
        denoiser=denoiser,
        embed_dim=sc.embed_dim,
        hidden=sc.hidden,
        n_time_freq=sc.n_time_freq,
        temperature=sc.temperature,
        time_conditioned=sc.time_conditioned if time_conditioned is None else time_conditioned,
        pseudo_clean_input=sc.pseudo_clean_input,
        pair_matched_noise=sc.pair_matched_noise,
        encoder_lr=sc.encoder_lr,
        head_lr=sc.head_lr,
        epochs=sc.epochs,
        batch_size=sc.batch_size,
        n_classes=task.n_classes,
        seed=derive_seed(cfg.seed, "scorer"),
    )
    scorer.fit(np.stack([wins, loses], axis=1), prompts)
    scorer.freeze()

    h_wins, h_loses, h_prompts = holdout
    n_steps = int(cfg.schedule.n_steps)
    bins = scorer.accuracy_by_bin(
        h_wins, h_loses, h_prompts, n_bins=sc.n_bins, t_lo=1, t_hi=n_steps,
        draws_per_pair=sc.draws_per_pair, rng=derive_rng(cfg.seed, "scorer-eval-bins"))
    acc_half = scorer.pair_accuracy(
        h_wins, h_loses, h_prompts, 1, n_steps // 2,
        draws_per_pair=sc.draws_per_pair, rng=derive_rng(cfg.seed, "scorer-eval-half"))
    acc_pooled = scorer.pair_accuracy(
        h_wins, h_loses, h_prompts, 1, pooled_upper(cfg),
        draws_per_pair=sc.draws_per_pair, rng=derive_rng(cfg.seed, "scorer-eval-pooled"))
    status = {
        "holdout_pairs": int(h_wins.shape[0]),
        "accuracy_half_range": acc_half,
        "accuracy_pooled_range": acc_pooled,
        "accuracy_floor": float(sc.accuracy_floor),
        "below_floor": bool(acc_pooled < float(sc.accuracy_floor)),
        "bins": bins,
    }
    if out_dir is not None:
        out_dir = write_run_stamp(cfg, out_dir)
        scorer.save(out_dir / "scorer")
        if pairs is None:
            save_pair_set(out_dir / "pairs", wins, loses, prompts,
                          derive_seed(cfg.seed, "scorer-data"))
        write_csv(out_dir / "scorer_accuracy.csv",
                  ["t_lo", "t_hi", "accuracy"], bins)
        with open(out_dir / "scorer_status.json", "w") as fh:
            json.dump(status, fh, indent=2)
            fh.write("\n")
        _write_timing(out_dir, "train-scorer", time.perf_counter() - start)
    return scorer, status


def run_align(cfg: RunConfig, denoiser: ConditionalDenoiser,
              scorer: StepwiseScorer, out_dir=None, mode: str | None = None,
              **overrides) -> StepwiseAligner:
    """Stepwise preference alignment of a pretrained denoiser.

    overrides tweak individual AlignConfig fields (used by the ablation
    sweep); everything else comes from the config.
    """
    start = time.perf_counter()
    task = build_task(cfg)
    al = cfg.align
    params = {
        "k": al.k, "kappa_frac": al.kappa_frac, "lam": al.lam, "eta": al.eta,
        "mode": mode if mode is not None else al.mode,
        "next_state": al.next_state, "pair_selection": al.pair_selection,
        "batch_size": al.batch_size, "lr": al.lr, "epochs": al.epochs,
        "batches_per_epoch": al.batches_per_epoch,
        "t_range": None if al.t_range is None else tuple(al.t_range),
        "seed": derive_seed(cfg.seed, "align"),
    }
    unknown = sorted(set(overrides) - set(params))
    if unknown:
        raise ConfigurationError(f"unknown align overrides: {unknown}")
    params.update(overrides)
    aligner = StepwiseAligner(scorer=scorer, task=task, **params)
    aligner.fit(denoiser)
    if out_dir is not None:
        out_dir = write_run_stamp(cfg, out_dir)
        aligner.policy_.save(out_dir / "aligned")
        rows = aligner.history_
        write_csv(out_dir / "metrics.csv", list(rows[0].keys()), rows)
        with open(out_dir / "align_stats.json", "w") as fh:
            json.dump({
                "pooled_t_lo": aligner.t_lo_,
                "pooled_t_hi": aligner.t_hi_,
                "n_pooled_steps": len(aligner.pooled_ts_),
                "continuation_counts": [int(c) for c in aligner.continuation_counts_],
            }, fh, indent=2)
            fh.write("\n")
        with open(out_dir / "trajectories.jsonl", "w") as fh:
            for c in range(task.n_classes):
                _, rec = aligner.policy_.sample_one_recorded(
                    c, derive_seed(cfg.seed, f"replay-{c}"))
                rec.checkpoint = str(out_dir / "aligned")
                fh.write(json.dumps(rec.to_json()) + "\n")
        _write_timing(out_dir, "align", time.perf_counter() - start,
                      extra={"epoch_seconds": aligner.epoch_seconds_})
    return aligner


def run_eval(cfg: RunConfig, policy: ConditionalDenoiser,
             reference: ConditionalDenoiser, scorer: StepwiseScorer | None = None,
             out_dir=None) -> EvalReport:
    start = time.perf_counter()
    task = build_task(cfg)
    report = evaluate(
        policy, reference, scorer, task,
        n_per_class=cfg.eval.n_per_class,
        seed=derive_seed(cfg.seed, "eval"),
        config_digest=config_digest(cfg),
        drift_trajectories=cfg.eval.drift_trajectories,
    )
    if out_dir is not None:
        out_dir = write_run_stamp(cfg, out_dir)
        row = report.to_row()
        write_csv(out_dir / "eval.csv", list(row.keys()), [row])
        _write_timing(out_dir, "eval", time.perf_counter() - start)
    return report


def run_pipeline(cfg: RunConfig, out_dir) -> dict:
    """pretrain -> train-scorer -> align -> eval into one directory tree."""
    out_dir = Path(out_dir)
    denoiser = run_pretrain(cfg, out_dir / "pretrain")
    scorer, status = run_train_scorer(cfg, denoiser, out_dir=out_dir / "scorer")
    aligner = run_align(cfg, denoiser, scorer, out_dir=out_dir / "align")
    report = run_eval(cfg, aligner.policy_, aligner.reference_, scorer,
                      out_dir=out_dir / "eval")
    write_run_stamp(cfg, out_dir)
    return {"denoiser": denoiser, "scorer": scorer, "scorer_status": status,
            "aligner": aligner, "report": report}


def replay_trajectories(path, checkpoint=None) -> list[dict]:
    """Re-run recorded trajectories and compare state digests.

    Raises UsageError on any mismatch; the noise stream is reproduced from
    the recorded seed, so a mismatch means the checkpoint differs from the
    one that produced the dump.
    """
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ConfigurationError(f"{path}: no trajectory records")
    results = []
    models: dict[str, ConditionalDenoiser] = {}
    for i, obj in enumerate(records):
        rec = TrajectoryRecord.from_json(obj)
        stem = str(checkpoint) if checkpoint is not None else rec.checkpoint
        if not stem:
            raise ConfigurationError(
                f"{path}: record {i} names no checkpoint and none was given")
        if stem not in models:
            models[stem] = ConditionalDenoiser.load(stem)
        _, fresh = models[stem].sample_one_recorded(rec.prompt, rec.seed)
        ok = (fresh.x_init_digest == rec.x_init_digest
              and fresh.z_digests == rec.z_digests
              and fresh.x_final_digest == rec.x_final_digest)
        results.append({"index": i, "prompt": rec.prompt, "seed": rec.seed,
                        "match": bool(ok)})
    bad = [r["index"] for r in results if not r["match"]]
    if bad:
        raise UsageError(f"{path}: digest mismatch for records {bad}")
    return results
