"""Command line surface: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 precondition violation,
4 I/O error. CSV columns are documented in csv_columns.md next to this
module.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .ablation import AXIS_VALUES, run_ablation
from .config import RunConfig, config_digest, load_config
from .diffusion import ConditionalDenoiser
from .errors import ConfigurationError, UsageError
from .pipeline import (replay_trajectories, run_align, run_eval, run_pretrain,
                       run_train_scorer)
from .scorer import StepwiseScorer
from .task import load_pair_set


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigurationError(
            "an output directory is required: pass --out or set out_dir in the config")
    return out


def _cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    model = run_pretrain(cfg, out)
    print(f"pretrained denoiser -> {out}/denoiser "
          f"(final loss {model.loss_curve_[-1]:.4f}, digest {config_digest(cfg)})")
    return 0


def _cmd_train_scorer(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    denoiser = ConditionalDenoiser.load(args.denoiser) if args.denoiser else None
    pairs = None
    if args.pairs:
        wins, loses, prompts, _ = load_pair_set(args.pairs)
        n_hold = int(cfg.scorer.holdout_pairs)
        if wins.shape[0] <= n_hold:
            raise ConfigurationError(
                f"pair set has {wins.shape[0]} pairs; need more than the "
                f"{n_hold} reserved for holdout")
        pairs = ((wins[:-n_hold], loses[:-n_hold], prompts[:-n_hold]),
                 (wins[-n_hold:], loses[-n_hold:], prompts[-n_hold:]))
    _, status = run_train_scorer(cfg, denoiser, pairs=pairs, out_dir=out)
    print(f"frozen scorer -> {out}/scorer "
          f"(holdout accuracy {status['accuracy_pooled_range']:.3f} over the "
          f"pooled range, {status['accuracy_half_range']:.3f} over the low half)")
    if status["below_floor"]:
        print(f"warning: accuracy {status['accuracy_pooled_range']:.3f} is below "
              f"the configured floor {status['accuracy_floor']:.3f}", file=sys.stderr)
    return 0


def _cmd_align(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    denoiser = ConditionalDenoiser.load(args.denoiser)
    scorer = StepwiseScorer.load(args.scorer, denoiser=denoiser)
    aligner = run_align(cfg, denoiser, scorer, out_dir=out, mode=args.mode)
    last = aligner.history_[-1]
    print(f"aligned policy -> {out}/aligned "
          f"(final oracle mean {last['oracle_mean']:.4f}, "
          f"step loss {last['mean_step_loss']:.6f})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    policy = ConditionalDenoiser.load(args.policy)
    reference = ConditionalDenoiser.load(args.reference)
    scorer = StepwiseScorer.load(args.scorer) if args.scorer else None
    report = run_eval(cfg, policy, reference, scorer, out_dir=out)
    print(f"eval -> {out}/eval.csv (oracle {report.oracle_mean:.4f} vs "
          f"reference {report.oracle_ref_mean:.4f}, win rate {report.win_rate:.3f})")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    axes = [args.axis] if args.axis else None

    def progress(msg: str) -> None:
        if not args.quiet:
            print(msg)

    rows = run_ablation(cfg, out, axes=axes, progress=progress)
    print(f"ablation over {len(rows)} axes -> {out}/ablation_*.csv "
          f"and {out}/ablation_summary.csv")
    return 0


def _cmd_replay(args) -> int:
    results = replay_trajectories(args.trajectories, checkpoint=args.denoiser)
    print(f"replayed {len(results)} trajectories: all state digests match")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepalign",
        description="Emotion-conditioned diffusion alignment on a synthetic "
                    "signal task with an analytic oracle.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--out", help="output directory (overrides config out_dir)")

    p = sub.add_parser("pretrain", help="train the base denoiser on task data")
    common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train-scorer", help="train and freeze the step scorer")
    common(p)
    p.add_argument("--denoiser", help="denoiser checkpoint stem (enables "
                                      "pseudo-clean input; optional)")
    p.add_argument("--pairs", help="pair dataset stem; generated from the "
                                   "config when omitted")
    p.set_defaults(func=_cmd_train_scorer)

    p = sub.add_parser("align", help="stepwise preference alignment")
    common(p)
    p.add_argument("denoiser", help="pretrained denoiser checkpoint stem")
    p.add_argument("scorer", help="frozen scorer checkpoint stem")
    p.add_argument("--mode", choices=["single-tau", "per-step"],
                   help="pooled-step supervision mode (overrides config)")
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("eval", help="compare two denoiser checkpoints")
    common(p)
    p.add_argument("policy", help="checkpoint stem under evaluation")
    p.add_argument("reference", help="checkpoint stem to compare against")
    p.add_argument("--scorer", help="frozen scorer stem for the learned-score "
                                    "column (optional)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep the comparison axes")
    common(p)
    p.add_argument("axis", nargs="?", choices=sorted(AXIS_VALUES),
                   help="single axis to sweep (all configured axes if omitted)")
    p.add_argument("--quiet", action="store_true", help="suppress per-cell progress")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("replay", help="re-run recorded trajectories and verify "
                                      "state digests")
    p.add_argument("trajectories", help="trajectories.jsonl from an align run")
    p.add_argument("--denoiser", help="checkpoint stem override (defaults to "
                                      "the stem stored in each record)")
    p.set_defaults(func=_cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
