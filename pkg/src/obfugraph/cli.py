"""CLI entrypoint for obfuscation detection runs."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from obfugraph import __version__
from obfugraph.cfg_model import FunctionSample, filter_opt_level, read_corpus, write_corpus
from obfugraph.config import GeneratorConfig, RunConfig, load_gnn_config, load_tree_config
from obfugraph.dataset import (
    DEFAULT_BINS,
    DEFAULT_RATIOS,
    SplitManifest,
    audit_leakage,
    class_ratio_report,
    dedupe_shared_functions,
    split_per_binary,
    split_per_function,
)
from obfugraph.errors import DatasetError, ObfugraphError
from obfugraph.eval import DEFAULT_EQUIVALENCES, MODES, TASKS, evaluate
from obfugraph.exporter import ReportBundle, write_lines
from obfugraph.featurize import SCHEMES, FeatureExtractor, export_feature_rows
from obfugraph.models import GNN_ALGORITHMS, TREE_ALGORITHMS, TrainedModel, train_model
from obfugraph.pipeline import BenchmarkSpec, run_benchmark
from obfugraph.synthgen import gen_corpus
from obfugraph.utils import ensure_unique_paths, file_digest, normalize_token, parse_csv_list, stable_json, write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CELL_FAILED = 1
EXIT_ERROR = 2


@dataclass
class RunResult:
    paths: List[Path] = field(default_factory=list)
    exit_code: int = EXIT_OK


def _token(choices: Sequence[str]):
    def convert(value: str) -> str:
        token = normalize_token(value)
        if token not in choices:
            raise argparse.ArgumentTypeError(f"invalid choice {value!r} (choose from {', '.join(choices)})")
        return token

    return convert


def _ratios(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(chunk) for chunk in parse_csv_list(value))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"ratios must be comma-separated numbers: {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obfugraph", description="Detect and classify obfuscated binary functions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    commands = parser.add_subparsers(dest="subcommand", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic obfuscation corpus.")
    synth.add_argument("--config", type=Path, help="Generator config JSON; defaults apply when omitted.")
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--out", type=Path, required=True, help="Corpus file (JSON Lines).")

    split = commands.add_parser("split", help="Assign functions to train/validation/test.")
    split.add_argument("--corpus", type=Path, required=True)
    split.add_argument("--strategy", type=_token(("per_function", "per_binary")), default="per_function")
    split.add_argument("--seed", type=int, required=True)
    split.add_argument("--ratios", type=_ratios, default=DEFAULT_RATIOS, help="train,validation,test")
    split.add_argument("--train-projects", help="Comma-separated projects (per-binary).")
    split.add_argument("--test-projects", help="Comma-separated projects (per-binary).")
    split.add_argument("--val-ratio", type=float, default=0.20)
    split.add_argument("--bins", type=int, default=DEFAULT_BINS)
    split.add_argument("--opt-level", choices=["O0", "O2"])
    split.add_argument("--dedupe", action="store_true", help="Drop functions shared between projects first.")
    split.add_argument("--out", type=Path, required=True, help="Manifest file.")

    featurize = commands.add_parser("featurize", help="Export feature vectors or node matrices.")
    featurize.add_argument("--corpus", type=Path, required=True)
    featurize.add_argument("--features", type=_token(SCHEMES), required=True)
    featurize.add_argument("--manifest", type=Path, help="Fit corpus-level state on the train set only.")
    featurize.add_argument("--out", type=Path, required=True, help="JSON Lines export.")

    train = commands.add_parser("train", help="Train one detector.")
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--manifest", type=Path, required=True)
    train.add_argument("--model", type=_token(tuple(TREE_ALGORITHMS) + GNN_ALGORITHMS), required=True)
    train.add_argument("--features", type=_token(SCHEMES), required=True)
    train.add_argument("--task", type=_token(TASKS), default="binary")
    train.add_argument("--mode", type=_token(MODES), default="obfuscated_only")
    train.add_argument("--seed", type=int, required=True)
    train.add_argument("--config", type=Path, help="TreeConfig or GnnConfig JSON.")
    train.add_argument("--tune", action="store_true", help="Search hyperparameters on the validation set.")
    train.add_argument("--n-trials", type=int, default=20)
    train.add_argument("--n-seeds", type=int, default=3)
    train.add_argument("--opt-level", choices=["O0", "O2"])
    train.add_argument("--out", type=Path, required=True, help="Model file.")

    evaluate_cmd = commands.add_parser("eval", help="Score a trained model on one split set.")
    evaluate_cmd.add_argument("--model", type=Path, required=True)
    evaluate_cmd.add_argument("--corpus", type=Path, required=True)
    evaluate_cmd.add_argument("--manifest", type=Path, required=True)
    evaluate_cmd.add_argument("--set", dest="set_name", choices=["train", "validation", "test"], default="test")
    evaluate_cmd.add_argument("--task", type=_token(TASKS), help="Defaults to the model's task.")
    evaluate_cmd.add_argument("--mode", type=_token(MODES), help="Defaults to the model's mode.")
    evaluate_cmd.add_argument("--dataset", default="", help="Dataset id recorded in the report.")
    evaluate_cmd.add_argument("--lenient", action="store_true", help="Count OpaquePredicates->EncodeArithmetic as correct.")
    evaluate_cmd.add_argument("--opt-level", choices=["O0", "O2"])
    evaluate_cmd.add_argument("--out", type=Path, required=True, help="Report stem; .csv and .json are written.")

    benchmark = commands.add_parser("benchmark", help="Run a (features x algorithm) benchmark table.")
    benchmark.add_argument("--corpus", type=Path, required=True)
    benchmark.add_argument("--manifest", type=Path, required=True)
    benchmark.add_argument("--spec", type=Path, required=True, help="Benchmark spec JSON.")
    benchmark.add_argument("--seed", type=int, required=True)
    benchmark.add_argument("--cache-dir", type=Path, help="Reuse finished cells across runs.")
    benchmark.add_argument("--out", type=Path, required=True, help="Output directory.")

    predict = commands.add_parser("predict", help="Label every function of a corpus.")
    predict.add_argument("--model", type=Path, required=True)
    predict.add_argument("--corpus", type=Path, required=True)
    predict.add_argument("--out", type=Path, required=True, help="Predictions CSV.")
    return parser


def _record_run(args: argparse.Namespace, output: Path, inputs: Sequence[Optional[Path]]) -> Path:
    arguments = {key: value for key, value in vars(args).items() if key not in ("verbose",)}
    digest = file_digest([path for path in inputs if path is not None])
    return RunConfig(args.subcommand, arguments, __version__, digest).save(output)


def cmd_synth(args: argparse.Namespace) -> RunResult:
    config = GeneratorConfig.load(args.config, seed=args.seed) if args.config else GeneratorConfig(seed=args.seed)
    corpus = gen_corpus(config)
    write_corpus(args.out, corpus)
    logger.info("Wrote %d samples", len(corpus))
    return RunResult([args.out, _record_run(args, args.out, [args.config])])


def cmd_split(args: argparse.Namespace) -> RunResult:
    corpus = filter_opt_level(read_corpus(args.corpus), args.opt_level)
    if args.dedupe:
        corpus, _ = dedupe_shared_functions(corpus)
    if args.strategy == "per_function":
        manifest = split_per_function(corpus, args.ratios, seed=args.seed, n_bins=args.bins)
    else:
        manifest = split_per_binary(
            corpus,
            parse_csv_list(args.train_projects),
            parse_csv_list(args.test_projects),
            val_ratio=args.val_ratio,
            seed=args.seed,
            n_bins=args.bins,
        )
    violations = audit_leakage(manifest, corpus)
    if violations:
        raise DatasetError("split leaks: " + "; ".join(v.describe() for v in violations[:5]))
    manifest.save(args.out)
    print(class_ratio_report(manifest, corpus).to_table())
    return RunResult([args.out, _record_run(args, args.out, [args.corpus])])


def cmd_featurize(args: argparse.Namespace) -> RunResult:
    corpus = read_corpus(args.corpus)
    fit_on: Sequence[FunctionSample] = corpus
    if args.manifest:
        fit_on = SplitManifest.load(args.manifest).select(corpus, "train")
    extractor = FeatureExtractor.fit(args.features, fit_on)
    write_lines(args.out, export_feature_rows(extractor, corpus))
    return RunResult([args.out, _record_run(args, args.out, [args.corpus, args.manifest])])


def _estimator_configs(args: argparse.Namespace) -> Dict[str, Any]:
    if args.config is None:
        return {}
    if args.model in TREE_ALGORITHMS:
        return {"tree_config": replace(load_tree_config(args.config), kind=TREE_ALGORITHMS[args.model])}
    return {"gnn_config": replace(load_gnn_config(args.config), architecture=args.model)}


def cmd_train(args: argparse.Namespace) -> RunResult:
    corpus = filter_opt_level(read_corpus(args.corpus), args.opt_level)
    manifest = SplitManifest.load(args.manifest)
    outcome = train_model(
        args.model,
        args.features,
        manifest.select(corpus, "train"),
        manifest.select(corpus, "validation"),
        args.task,
        args.mode,
        args.seed,
        tune=args.tune,
        n_trials=args.n_trials,
        n_seeds=args.n_seeds,
        **_estimator_configs(args),
    )
    written = [args.out]
    log_path = args.out.with_name(args.out.name + ".log.csv")
    search_path = args.out.with_name(args.out.name + ".search.json")
    ensure_unique_paths([args.out, log_path, search_path])
    outcome.model.save(args.out)
    if outcome.log is not None:
        outcome.log.write_csv(log_path)
        written.append(log_path)
    if outcome.search_rows:
        write_text(search_path, stable_json(outcome.search_rows) + "\n")
        written.append(search_path)
    written.append(_record_run(args, args.out, [args.corpus, args.manifest, args.config]))
    return RunResult(written)


def cmd_eval(args: argparse.Namespace) -> RunResult:
    model = TrainedModel.load(args.model)
    corpus = filter_opt_level(read_corpus(args.corpus), args.opt_level)
    samples = SplitManifest.load(args.manifest).select(corpus, args.set_name)
    report = evaluate(
        model,
        samples,
        args.task or model.task,
        args.mode or model.mode,
        dataset_id=args.dataset,
        equivalences=DEFAULT_EQUIVALENCES if args.lenient else None,
    )
    bundle = ReportBundle.for_output(args.out)
    paths = list(bundle.write_report([report]))
    return RunResult(paths + [_record_run(args, bundle.csv_path, [args.model, args.corpus, args.manifest])])


def cmd_benchmark(args: argparse.Namespace) -> RunResult:
    spec = BenchmarkSpec.load(args.spec)
    table = run_benchmark(read_corpus(args.corpus), SplitManifest.load(args.manifest), spec, args.seed, args.cache_dir)
    bundle = ReportBundle(root_dir=args.out, stem="benchmark")
    paths = list(bundle.write_benchmark(table))
    paths.append(_record_run(args, bundle.csv_path, [args.corpus, args.manifest, args.spec]))
    if table.failed:
        logger.error("%d benchmark cell(s) failed", len(table.failed))
        return RunResult(paths, EXIT_CELL_FAILED)
    return RunResult(paths)


def cmd_predict(args: argparse.Namespace) -> RunResult:
    model = TrainedModel.load(args.model)
    corpus = read_corpus(args.corpus)
    scores = model.predict_scores(corpus)
    predicted = [model.classes[index] for index in np.argmax(scores, axis=1)]
    confidence = scores.max(axis=1)
    bundle = ReportBundle.for_output(args.out)
    path = bundle.write_predictions([sample.function_id for sample in corpus], predicted, confidence)
    return RunResult([path, _record_run(args, path, [args.model, args.corpus])])


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "predict": cmd_predict,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        result = HANDLERS[args.subcommand](args)
    except ObfugraphError as exc:
        print(f"obfugraph {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_ERROR

    for path in result.paths:
        print(f"Wrote {path}")
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
