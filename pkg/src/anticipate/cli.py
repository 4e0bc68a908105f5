"""Command-line surface: corpus generation, the two training stages,
evaluation, the modality-ablation and label-corruption harnesses, and the
gradient self-check.

Exit codes: 0 ok, 1 usage, 2 data/config problem, 3 numeric failure.
Set ANTICIPATE_LOG to error|info|debug to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

from .config import PRESETS, ExperimentConfig, load_experiment
from .data import Corpus
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    NumericError,
    ShapeError,
)
from .metrics import report_to_csv, report_to_json
from .model import AnticipationModel, load_checkpoint, save_checkpoint
from .rngstream import rng_stream
from .train import evaluate, run_stage
from .world import build_world, export_corpus, load_world, oracle_accuracy

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_SALT_INIT = 505


def _configure_logging() -> None:
    raw = os.environ.get("ANTICIPATE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if raw not in levels:
        print(f"warning: ANTICIPATE_LOG={raw!r} not one of error|info|debug; "
              "using error", file=sys.stderr)
        raw = "error"
    logging.basicConfig(
        level=levels[raw], format="%(levelname)s %(name)s: %(message)s", force=True
    )


class Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_modalities(raw):
    if raw is None:
        return None
    names = tuple(m.strip() for m in raw.split(",") if m.strip())
    if not names:
        raise ConfigError("--modalities given but empty")
    return names


def _experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        exp = load_experiment(args.config)
    else:
        exp = PRESETS[args.preset](args.seed if args.seed is not None else 7)
    if args.seed is not None:
        exp.seed = args.seed
        exp.pretrain = dataclasses.replace(exp.pretrain, seed=args.seed)
        exp.finetune = dataclasses.replace(exp.finetune, seed=args.seed + 1)
    # top-level restrictions flow into stages that did not set their own
    if exp.modalities is not None:
        if exp.pretrain.modalities is None:
            exp.pretrain = dataclasses.replace(exp.pretrain, modalities=exp.modalities)
        if exp.finetune.modalities is None:
            exp.finetune = dataclasses.replace(exp.finetune, modalities=exp.modalities)
    if exp.corrupt_keep != 1.0:
        if exp.pretrain.corrupt_keep == 1.0:
            exp.pretrain = dataclasses.replace(exp.pretrain, corrupt_keep=exp.corrupt_keep)
        if exp.finetune.corrupt_keep == 1.0:
            exp.finetune = dataclasses.replace(exp.finetune, corrupt_keep=exp.corrupt_keep)
    return exp


def _stage_overrides(args, settings):
    if getattr(args, "epochs", None) is not None:
        warmup = min(settings.warmup, args.epochs)
        settings = dataclasses.replace(settings, epochs=args.epochs, warmup=warmup)
    mods = _parse_modalities(getattr(args, "modalities", None))
    if mods is not None:
        settings = dataclasses.replace(settings, modalities=mods)
    if getattr(args, "corrupt_keep", None) is not None:
        settings = dataclasses.replace(settings, corrupt_keep=args.corrupt_keep)
    return settings


def _check_compatible(model: AnticipationModel, corpus: Corpus) -> None:
    if model.config.classes != corpus.vocab.n_actions:
        raise DataError(
            f"checkpoint expects {model.config.classes} classes but the corpus "
            f"has {corpus.vocab.n_actions}"
        )
    missing = set(model.config.modalities()) - set(corpus.modalities)
    if missing:
        raise DataError(f"corpus lacks modalities the model uses: {sorted(missing)}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(args) -> int:
    exp = _experiment(args)
    n_videos = args.videos if args.videos is not None else exp.n_videos
    frames = args.frames if args.frames is not None else exp.frames_per_video
    train_cap = args.train_cap if args.train_cap is not None else exp.train_cap
    eval_cap = args.eval_cap if args.eval_cap is not None else exp.eval_cap

    world = build_world(exp.world, exp.seed)
    counts = export_corpus(
        world, args.out, n_videos=n_videos, frames_per_video=frames,
        window=exp.window, train_cap=train_cap, eval_cap=eval_cap,
    )
    corpus = Corpus(args.out)
    ev = corpus.segments("eval")
    oracle = oracle_accuracy(
        world, [corpus.last_observed(d) for d in ev], [d.action for d in ev]
    )
    print(f"corpus written to {args.out}")
    print(f"videos={counts['videos']} train_segments={counts['train_segments']} "
          f"eval_segments={counts['eval_segments']}")
    print(f"label_oracle_top1={oracle['label_oracle_top1']:.4f}")
    print(f"chance={oracle['chance']:.4f}")
    return EXIT_OK


def _init_model(exp: ExperimentConfig) -> AnticipationModel:
    return AnticipationModel(exp.model, rng_stream(exp.seed, _SALT_INIT))


def cmd_pretrain(args) -> int:
    exp = _experiment(args)
    corpus = Corpus(args.corpus)
    settings = _stage_overrides(args, exp.pretrain)
    model = _init_model(exp)
    _check_compatible(model, corpus)
    t0 = time.time()
    history = run_stage(
        model, corpus, settings, log_path=args.log,
        rescue_path=str(args.out) + ".rescue",
    )
    save_checkpoint(model, args.out)
    print(f"checkpoint written to {args.out}")
    print(f"epochs={len(history)} final_loss={history[-1].total:.4f} "
          f"seconds={time.time() - t0:.1f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    if (args.checkpoint is None) == (not args.from_scratch):
        # exactly one of the two starting points must be chosen
        raise UsageError("finetune needs --checkpoint PATH or --from-scratch")
    exp = _experiment(args)
    corpus = Corpus(args.corpus)
    settings = _stage_overrides(args, exp.finetune)
    settings = dataclasses.replace(settings, mode=args.mode, beta=args.beta)
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        model = _init_model(exp)
    _check_compatible(model, corpus)
    t0 = time.time()
    history = run_stage(
        model, corpus, settings, log_path=args.log,
        rescue_path=str(args.out) + ".rescue",
    )
    save_checkpoint(model, args.out)
    print(f"checkpoint written to {args.out}")
    print(f"epochs={len(history)} mode={settings.mode} "
          f"final_loss={history[-1].total:.4f} seconds={time.time() - t0:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = Corpus(args.corpus)
    model = load_checkpoint(args.checkpoint)
    _check_compatible(model, corpus)
    modalities = _parse_modalities(args.modalities)
    report, _ = evaluate(
        model, corpus, split=args.split, modalities=modalities, seed=args.seed,
        corrupt_keep=args.corrupt_keep, marginal_mode=args.marginal_mode,
    )
    Path(args.report).write_text(report_to_json(report), encoding="utf-8")
    print(f"report written to {args.report}")
    if args.csv:
        Path(args.csv).write_text(report_to_csv(report), encoding="utf-8")
        print(f"csv written to {args.csv}")
    cell = report["action"]["overall"]
    print(f"action_top1={cell['top1']:.4f} action_top5={cell['top5']:.4f} "
          f"n_eval={report['n_eval']}")
    return EXIT_OK


ABLATE_HEADER = "set,top1_action,top5_action,cm_top1_action,cm_recall5_action"


def _report_row(report: dict) -> str:
    cell = report["action"]["overall"]
    return (f"{cell['top1']:.6f},{cell['top5']:.6f},"
            f"{cell['class_mean_top1']:.6f},{cell['class_mean_recall5']:.6f}")


def cmd_ablate_modalities(args) -> int:
    exp = _experiment(args)
    corpus = Corpus(args.corpus)
    sets = []
    for chunk in args.sets.split(";"):
        names = tuple(m.strip() for m in chunk.split(",") if m.strip())
        if names:
            sets.append(names)
    if not sets:
        raise UsageError("--sets parsed to nothing")
    if args.mask_only and args.checkpoint is None:
        raise UsageError("--mask-only needs --checkpoint")

    lines = [ABLATE_HEADER]
    for names in sets:
        if args.mask_only:
            model = load_checkpoint(args.checkpoint)
            _check_compatible(model, corpus)
        else:
            model = _init_model(exp)
            _check_compatible(model, corpus)
            run_stage(model, corpus,
                      dataclasses.replace(exp.pretrain, modalities=names))
            run_stage(model, corpus,
                      dataclasses.replace(exp.finetune, modalities=names))
        report, _ = evaluate(model, corpus, modalities=names, seed=exp.seed)
        row = f"{' '.join(names)},{_report_row(report)}"
        lines.append(row)
        print(row)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"ablation table written to {args.out}")
    return EXIT_OK


SWEEP_HEADER = "p,top1_action,top5_action,cm_top1_action,cm_recall5_action"


def cmd_sweep_actions(args) -> int:
    exp = _experiment(args)
    corpus = Corpus(args.corpus)
    try:
        p_list = [float(p) for p in args.p_list.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--p-list must be comma-separated floats, got {args.p_list!r}")
    if not p_list:
        raise UsageError("--p-list parsed to nothing")
    for p in p_list:
        if not (0.0 <= p <= 1.0):
            raise ConfigError(f"keep probability {p} outside [0, 1]")

    lines = [SWEEP_HEADER]
    for p in p_list:
        model = load_checkpoint(args.checkpoint)
        _check_compatible(model, corpus)
        if args.refit:
            run_stage(model, corpus,
                      dataclasses.replace(exp.finetune, corrupt_keep=p))
        report, _ = evaluate(model, corpus, seed=exp.seed, corrupt_keep=p)
        row = f"{p:g},{_report_row(report)}"
        lines.append(row)
        print(row)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"sweep table written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import module_checks, op_checks

    t0 = time.time()
    cases = []
    if args.seed is None:
        op_cases, module_cases = op_checks(), module_checks()
    else:
        op_cases, module_cases = op_checks(args.seed), module_checks(args.seed + 1)
    if args.scope == "all":
        cases.extend(("op", name, runner) for name, runner in op_cases)
    cases.extend(("module", name, runner) for name, runner in module_cases)
    failures = 0
    for kind, name, runner in cases:
        result = runner()
        status = "ok" if result.passed else "FAIL"
        if not result.passed:
            failures += 1
        print(f"{kind} {name}: max_rel_err={result.max_rel_err:.3e} {status}")
    print(f"gradcheck: {len(cases) - failures}/{len(cases)} passed "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _add_common(p, corpus=True):
    if corpus:
        p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> Parser:
    parser = Parser(prog="anticipate", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-world", help="build a synthetic world and export its corpus")
    _add_common(p, corpus=False)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--videos", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--train-cap", type=int, default=None)
    p.add_argument("--eval-cap", type=int, default=None)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("pretrain", help="stage 1: contrastive pre-training")
    _add_common(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="run-log CSV path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--modalities", default=None, help="comma-separated subset")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: classifier fine-tuning")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="stage-1 checkpoint to start from")
    p.add_argument("--from-scratch", action="store_true",
                   help="start from random initialization instead of a checkpoint")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="run-log CSV path")
    p.add_argument("--mode", choices=["full", "frozen"], default="full")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--modalities", default=None)
    p.add_argument("--corrupt-keep", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a split and write the metric report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="report JSON output path")
    p.add_argument("--csv", default=None, help="flat CSV output path")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--modalities", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-keep", type=float, default=1.0)
    p.add_argument("--marginal-mode", choices=["sum", "max"], default="sum")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-modalities",
                       help="train and score each modality combination")
    _add_common(p)
    p.add_argument("--sets", required=True,
                   help="semicolon-separated combinations, e.g. 'rgb; rgb,act_text'")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--mask-only", action="store_true",
                   help="evaluate one checkpoint under each mask instead of retraining")
    p.add_argument("--checkpoint", default=None, help="checkpoint for --mask-only")
    p.set_defaults(func=cmd_ablate_modalities)

    p = sub.add_parser("sweep-actions",
                       help="evaluate under corrupted action labels for each keep-probability")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--p-list", default="0.0,0.2,0.5,0.8,1.0")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--refit", action="store_true",
                   help="re-finetune at each keep-probability before scoring")
    p.set_defaults(func=cmd_sweep_actions)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--scope", choices=["all", "module"], default="all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.error("a command is required")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, ContractError, ShapeError, DomainError) as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"{parser.prog}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
