"""
Command-line front end.

    python -m modroute gen-data      --config configs/default.ini --seed 7
    python -m modroute train-phase1  --config configs/default.ini
    python -m modroute train-phase2  --config configs/default.ini --strategy hard_select
    python -m modroute eval          --config configs/default.ini --split test
    python -m modroute analyze       --config configs/default.ini --split test
    python -m modroute decode        --config configs/default.ini --ids 0 1 2
    python -m modroute gradcheck

Exit codes: 0 success, 1 usage / configuration / missing input, 2 runtime failure.
"""

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import modality_probe, plot_training_log, plot_weight_covariate, weight_covariate_analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .evaluation import evaluate, read_report, write_report
from .exceptions import ConfigError, ModrouteError
from .framework import BrainDecoder
from .gradcheck import run_gradcheck_suite
from .router import STRATEGIES
from .synthdata import generate, modality_name, read_corpus, select_split, split, write_corpus
from . import tensor as T
from .tensor import Tensor
from .training import run_phase1, run_phase2

logger = logging.getLogger("modroute")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
DEFAULT_CONFIG = "configs/default.ini"
THREADS_ENV = "MODROUTE_THREADS"
RULE = "=" * 70


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def banner(title: str):
    print(RULE)
    print(title)
    print(RULE)


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="INI configuration file")
    common.add_argument("--seed", type=int, help="sets corpus.seed and model.seed")
    common.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="dotted override such as optim.lr=1e-4 (repeatable, last wins)")
    common.add_argument("--out", default="model_outputs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = ArgumentParser(prog="modroute", description="Brain-signal captioning with routed projectors.")
    verbs = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=ArgumentParser)
    verbs.required = True

    verbs.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    verbs.add_parser("train-phase1", parents=[common], help="multimodal instruction tuning")
    p2 = verbs.add_parser("train-phase2", parents=[common], help="projector fusion with the router")
    p2.add_argument("--strategy", choices=STRATEGIES)

    for name, text in (("decode", "print generated captions"), ("eval", "write the metrics report"),
                       ("analyze", "weight vs covariate analysis")):
        sub = verbs.add_parser(name, parents=[common], help=text)
        sub.add_argument("--split", choices=("train", "val", "test"), default="test")
        sub.add_argument("--checkpoint", help="defaults to phase2.ckpt, else phase1.ckpt, in --out")
        sub.add_argument("--strategy", choices=STRATEGIES)
        if name == "decode":
            sub.add_argument("--ids", type=int, nargs="+", help="sample ids (default: first 5 of the split)")
        if name == "eval":
            sub.add_argument("--shuffle-brain", action="store_true", help="permute brain vectors across samples")

    gc = verbs.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--trials", type=int, default=10)
    return parser


def resolve_config(args) -> Config:
    overrides = []
    if args.seed is not None:
        overrides += [f"corpus.seed={args.seed}", f"model.seed={args.seed}"]
    if getattr(args, "strategy", None):
        overrides.append(f"router.strategy={args.strategy}")
    overrides += args.override
    if args.verb == "gradcheck" and not Path(args.config).exists():
        return Config().with_overrides(overrides).validate()
    return load_config(args.config, overrides)


def echo_config(config: Config):
    print("\nConfiguration:")
    for line in config.describe():
        print(f"  {line}")
    print()


def _corpus(out: Path):
    path = out / "corpus.jsonl"
    if not path.exists():
        raise UsageError(f"corpus {path} not found; run gen-data first")
    return read_corpus(path)


def _checkpoint_path(args, out: Path) -> Path:
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise UsageError(f"checkpoint {path} not found")
        return path
    for name in ("phase2.ckpt", "phase1.ckpt"):
        if (out / name).exists():
            return out / name
    raise UsageError(f"no checkpoint in {out}; run train-phase1 first")


def _warn_ignored_overrides(args, verb: str) -> None:
    """eval and decode rebuild the model from the checkpoint's stored configuration."""
    if args.override:
        logger.warning(
            "%s uses the configuration stored in the checkpoint; ignoring --override %s",
            verb,
            ", ".join(args.override),
        )


def cmd_gen_data(args, config: Config, out: Path) -> int:
    banner("GENERATING SYNTHETIC CORPUS")
    corpus = generate(config.corpus)
    path = write_corpus(corpus, out / "corpus.jsonl")
    train, val, test = split(corpus)
    print(f"✓ {len(corpus)} samples written to {path}")
    print(f"  train/val/test: {len(train)}/{len(val)}/{len(test)}")
    for m in range(config.corpus.num_modalities):
        count = sum(1 for s in corpus if s.oracle_modality == m)
        print(f"  {modality_name(m):>8s}-informative samples: {count}")
    print(f"  spec hash: {corpus.spec.spec_hash()}")
    return EXIT_OK


def cmd_train_phase1(args, config: Config, out: Path) -> int:
    banner("PHASE 1: MULTIMODAL INSTRUCTION TUNING")
    corpus = _corpus(out)
    ckpt = run_phase1(corpus, config, log_path=out / "phase1_log.tsv")
    path = save_checkpoint(ckpt, out / "phase1.ckpt")
    print(f"✓ phase-1 checkpoint saved to {path}")
    print(f"✓ training log saved to {out / 'phase1_log.tsv'}")
    return EXIT_OK


def cmd_train_phase2(args, config: Config, out: Path) -> int:
    banner(f"PHASE 2: PROJECTOR FUSION ({config.router.strategy})")
    phase1_path = out / "phase1.ckpt"
    if not phase1_path.exists():
        raise UsageError(f"phase-1 checkpoint {phase1_path} not found; run train-phase1 first")
    corpus = _corpus(out)
    ckpt = run_phase2(load_checkpoint(phase1_path), corpus, config, log_path=out / "phase2_log.tsv")
    path = save_checkpoint(ckpt, out / "phase2.ckpt")
    print(f"✓ phase-2 checkpoint saved to {path}")
    print(f"✓ training log saved to {out / 'phase2_log.tsv'}")
    return EXIT_OK


def cmd_decode(args, config: Config, out: Path) -> int:
    corpus = _corpus(out)
    samples = select_split(corpus, args.split)
    if args.ids:
        by_id = {s.sample_id: s for s in corpus}
        missing = [i for i in args.ids if i not in by_id]
        if missing:
            raise UsageError(f"unknown sample ids: {missing}")
        samples = [by_id[i] for i in args.ids]
    else:
        samples = samples[:5]
    _warn_ignored_overrides(args, "decode")
    ckpt_path = _checkpoint_path(args, out)
    ckpt = load_checkpoint(ckpt_path)
    model = BrainDecoder.from_state(Config.from_dict(ckpt.config), ckpt.tensors)
    strategy = args.strategy or ckpt.strategy

    banner(f"DECODING {len(samples)} SAMPLES ({ckpt_path.name}, {strategy})")
    with T.no_grad():
        brain = Tensor(np.stack([s.brain for s in samples]))
        h, decision, _ = model.fused(brain, strategy, training=False)
        generated = model.caption(h)
    for sample, ids, w in zip(samples, generated, decision.weights.data):
        weights = " ".join(f"{x:.2f}" for x in w)
        print(f"\n[{sample.sample_id}] oracle={modality_name(sample.oracle_modality)} weights=({weights})")
        print(f"  ids:       {ids}")
        print(f"  generated: {model.vocab.decode(ids)}")
        print(f"  reference: {model.vocab.decode(sample.targets)}")
    return EXIT_OK


def cmd_eval(args, config: Config, out: Path) -> int:
    corpus = _corpus(out)
    samples = select_split(corpus, args.split)
    _warn_ignored_overrides(args, "eval")
    ckpt_path = _checkpoint_path(args, out)
    banner(f"EVALUATING {ckpt_path.name} ON {args.split.upper()} ({len(samples)} samples)")
    ckpt = load_checkpoint(ckpt_path)
    if args.strategy:
        ckpt.strategy = args.strategy
    report = evaluate(ckpt, samples, split=args.split, shuffle_brain=args.shuffle_brain)
    paths = write_report(report, out)
    print("\nMetrics:")
    for name, value in report.metrics.items():
        print(f"  {name:<8s} {value:.4f}")
    print(f"  oracle agreement {report.oracle_agreement:.3f}")
    print(f"  routing entropy  {report.routing_entropy:.3f}")
    print(f"\n✓ report saved to {paths['json']}")
    return EXIT_OK


def cmd_analyze(args, config: Config, out: Path) -> int:
    corpus = _corpus(out)
    samples = select_split(corpus, args.split)
    report_path = out / f"eval_{args.split}.json"
    ckpt_path = _checkpoint_path(args, out)
    stale = report_path.exists() and report_path.stat().st_mtime < ckpt_path.stat().st_mtime
    if stale:
        logger.warning("%s is older than %s; evaluating again", report_path.name, ckpt_path.name)
    if report_path.exists() and not stale:
        report = read_report(report_path)
    else:
        ckpt = load_checkpoint(ckpt_path)
        report = evaluate(ckpt, samples, split=args.split)
        write_report(report, out)

    banner(f"ROUTER WEIGHT ANALYSIS ({args.split})")
    analysis = weight_covariate_analysis(
        report, samples, window=config.eval.rolling_window, modality=config.eval.text_modality
    )
    table_path = out / f"analysis_{args.split}.tsv"
    analysis.table.to_csv(table_path, sep="\t", index=False)
    with open(out / f"analysis_{args.split}.txt", "w", encoding="utf-8") as f:
        f.write(f"r\t{analysis.r:.6f}\np\t{analysis.p:.6g}\nn\t{len(analysis.table)}\n")
    plot_weight_covariate(analysis, out / f"weight_covariate_{args.split}.png")
    print(f"  {modality_name(analysis.modality)} weight vs abstractness: {analysis.summary()}")

    train, _, _ = split(corpus)
    probe = modality_probe(train, samples, seed=config.model.seed)
    print(f"  linear modality probe accuracy: {probe:.3f} (router agreement {report.oracle_agreement:.3f})")
    for phase in (1, 2):
        log_path = out / f"phase{phase}_log.tsv"
        if log_path.exists():
            plot_training_log(log_path, out / f"phase{phase}_curves.png")
    print(f"\n✓ analysis table saved to {table_path}")
    return EXIT_OK


def cmd_gradcheck(args, config: Config, out: Path) -> int:
    banner("GRADIENT CHECK SUITE")
    seed = args.seed if args.seed is not None else 0
    reports = run_gradcheck_suite(seed=seed, tol=args.tol, trials=args.trials)
    for report in reports:
        print(f"  {report}")
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"\n✗ {len(failed)} of {len(reports)} checks failed")
        return EXIT_FAILURE
    print(f"\n✓ all {len(reports)} checks passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-phase1": cmd_train_phase1,
    "train-phase2": cmd_train_phase2,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if limit < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {limit}")
    return threadpool_limits(limits=limit)


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb != "gradcheck":
            echo_config(config)
        with thread_limit():
            return COMMANDS[args.verb](args, config, out)
    except ConfigError as e:
        print(f"✗ configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModrouteError as e:
        logger.debug("%s failed", args.verb, exc_info=True)
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
