"""Command-line interface.

Subcommands:

* gen-data           write a synthetic mixed-type corpus
* train              fit the diffusion model on a corpus
* sample             draw synthetic series from a checkpoint
* eval               score a synthetic corpus against real train/test
* gradcheck          finite-difference audit of the training gradients
* validate-schedule  self-check of the noise schedule tables

Exit codes: 0 success, 1 usage or invalid arguments, 2 unreadable or
malformed data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline
from .data import (DataError, corpus_layout, make_mixed_corpus, read_corpus,
                   stats_from_sidecar, write_corpus)
from .evaluation import FeatureSpace, MetricConfig
from .nn_core import NumericalError
from .report import run_evaluation, write_report
from .schedule import cosine_schedule, validate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(ValueError):
    """Bad command-line input; exits with the usage code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixdiff",
                     description="Mixed-type time-series diffusion models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                            parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="write a synthetic corpus")
    p.add_argument("--kind", choices=("mixed", "sine"), default="mixed",
                   help="mixed adds categorical channels and missing values")
    p.add_argument("--n", type=int, default=1000,
                   help="number of samples (0 writes a header-only file)")
    p.add_argument("--num-channels", type=int, default=2)
    p.add_argument("--cat-channels", type=int, default=1)
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--length", type=int, default=24)
    p.add_argument("--missing-rate", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train",
                       help="train on a corpus file")
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--corpus", help="training corpus (overrides config)")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--steps", type=int, help="optimizer-step budget")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="categorical loss weight")
    p.add_argument("--diffusion-steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("sample",
                       help="draw synthetic series from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval",
                       help="score a synthetic corpus")
    p.add_argument("--real-train", required=True)
    p.add_argument("--real-test", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reruns", type=int, default=10)
    p.add_argument("--metric-steps", type=int, default=2000,
                   help="training steps per metric model")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-channels", type=int, default=1)
    p.add_argument("--cat-channels", type=int, default=1)
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--embed-width", type=int, default=16)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)

    p = sub.add_parser("validate-schedule",
                       help="audit the cosine noise schedule")
    p.add_argument("--diffusion-steps", type=int, default=1000)
    return parser


def cmd_gen_data(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    if args.n == 0:
        write_corpus(args.out, [], length=args.length)
        print(f"wrote header-only corpus to {args.out}")
        return EXIT_OK
    cat = 0 if args.kind == "sine" else args.cat_channels
    missing = 0.0 if args.kind == "sine" else args.missing_rate
    samples = make_mixed_corpus(n=args.n, num_channels=args.num_channels,
                                cat_channels=cat,
                                num_categories=args.categories,
                                length=args.length, missing_rate=missing,
                                seed=args.seed)
    write_corpus(args.out, samples)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = pipeline.load_config_file(args.config) if args.config else None
    config = pipeline.config_from_sources(
        file_values, corpus=args.corpus, out=args.out, steps=args.steps,
        lam=args.lam, diffusion_steps=args.diffusion_steps, batch=args.batch,
        seed=args.seed, checkpoint_every=args.checkpoint_every,
        log_every=args.log_every)
    log = None if args.quiet else print
    state = pipeline.train(config, resume=args.resume, log=log)
    print(f"saved checkpoint {config.out} "
          f"({state.opt.step} optimizer steps)")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    samples = pipeline.sample_to_file(args.checkpoint, n=args.n,
                                      seed=args.seed, out_path=args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _read_eval_corpus(path):
    samples = read_corpus(path)
    if not samples:
        raise DataError(f"{path}: corpus has no samples")
    sidecar = Path(str(path) + ".stats")
    stats, cat_ks = (stats_from_sidecar(sidecar) if sidecar.exists()
                     else (None, None))
    return samples, corpus_layout(samples, cat_ks), stats


def cmd_eval(args) -> int:
    real_train, layout, stats = _read_eval_corpus(args.real_train)
    real_test, layout_test, _ = _read_eval_corpus(args.real_test)
    synth, layout_synth, _ = _read_eval_corpus(args.synth)
    if not (layout == layout_test == layout_synth):
        raise UsageError(
            f"corpus layouts differ: train {layout}, test {layout_test}, "
            f"synth {layout_synth}")
    space = FeatureSpace.from_corpus(real_train, cat_ks=layout.cat_ks,
                                     stats=stats)
    payload = run_evaluation(real_train, real_test, synth, space,
                             reruns=args.reruns, seed=args.seed,
                             metric_cfg=MetricConfig(steps=args.metric_steps))
    written = write_report(args.out, payload, real_train, synth,
                           figures=not args.no_figures)
    d, p = payload["discriminative"], payload["predictive"]
    print(f"discriminative {d['mean']:.4f} ± {d['sd']:.4f} "
          f"({args.reruns} runs)")
    print(f"predictive     {p['mean']:.4f} ± {p['sd']:.4f} "
          f"(baseline {payload['predictive_baseline']['mean']:.4f}, "
          f"gap {payload['predictive_gap']:+.4f})")
    nn = payload["nnaa"]
    print(f"nnaa           {nn['value']:.4f} "
          f"(aa_train {nn['aa_train']:.4f}, aa_test {nn['aa_test']:.4f})")
    if payload["overfit_warning"]:
        print("warning: nearest-neighbour accuracies indicate the model may "
              "have memorized training rows")
    print(f"report written to {args.out} ({', '.join(written)})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = pipeline.gradcheck(num_channels=args.num_channels,
                                cat_channels=args.cat_channels,
                                num_categories=args.categories,
                                length=args.length, hidden=args.hidden,
                                embed_width=args.embed_width, seed=args.seed,
                                lam=args.lam)
    worst = max(report.values())
    for name in sorted(report):
        flag = "" if report[name] <= pipeline.GRADCHECK_TOL else "  <-- FAIL"
        print(f"{name:24s} {report[name]:.3e}{flag}")
    if worst > pipeline.GRADCHECK_TOL:
        bad = sorted(n for n, v in report.items() if v > pipeline.GRADCHECK_TOL)
        raise NumericalError(
            f"gradient mismatch above {pipeline.GRADCHECK_TOL:g} in: "
            + ", ".join(bad))
    print(f"all {len(report)} parameter groups within "
          f"{pipeline.GRADCHECK_TOL:g} (worst {worst:.3e})")
    return EXIT_OK


def cmd_validate_schedule(args) -> int:
    schedule = cosine_schedule(args.diffusion_steps)
    violations = validate(schedule)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        raise NumericalError(f"{len(violations)} schedule violation(s)")
    print(f"schedule with {schedule.total_steps} steps: 0 violations "
          f"(final cumulative retention "
          f"{schedule.alpha_bar[-1]:.3e})")
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "validate-schedule": cmd_validate_schedule,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
