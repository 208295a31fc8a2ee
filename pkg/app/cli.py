"""
Command-line surface: ``python -m app <command>``.

Exit codes: 0 success, 1 attack did not converge, 2 usage, configuration
or data error, 3 model backend failure.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from app.config import RunConfig, load_run_config
from app.errors import AnalysisError, BackendError, ConfigError, DataError, ModelError
from app.models.attack import AttackResult
from app.models.schema import FeatureSchema
from app.services import analysis
from app.services.artifacts import (
    SCHEMA_FILE,
    Envelope,
    RunContext,
    open_run,
    train_run,
    write_output,
    write_text,
)
from app.services.ga_core import PermuteAttack, alternative_counterfactuals
from app.services.scorecard import pd_to_score, score_report
from app.services.tabular import encode_instance, load_schema

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3


def _csv_list(value: str) -> List[str]:
    # "features=a,b" and "a,b" are equivalent
    _, _, names = value.strip().rpartition("features=")
    return [item.strip() for item in names.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="Run directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="Attack seed")
    common.add_argument("--gibbs", choices=["on", "off"], help="Conditional sampling")
    common.add_argument("--workers", type=int, help="Parallel workers for batches")

    restrict = argparse.ArgumentParser(add_help=False)
    group = restrict.add_mutually_exclusive_group()
    group.add_argument("--exclude", type=_csv_list, help="Comma-separated features the attack may not change")
    group.add_argument("--allow-only", type=_csv_list, help="Comma-separated features the attack may change")
    restrict.add_argument("--target", type=int, help="Target class (default: flip a binary prediction)")

    parser = argparse.ArgumentParser(
        prog="permute-attack",
        description="Counterfactual explanations by permutation genetic search.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[common], help="Split data, train and persist the model")

    attack = commands.add_parser("attack", parents=[common, restrict], help="Explain one instance")
    selector = attack.add_mutually_exclusive_group(required=True)
    selector.add_argument("--row", type=int, help="Row index in the data file")
    selector.add_argument("--instance", help='Inline JSON instance, e.g. {"age": 35, ...}')
    attack.add_argument("--n-counterfactuals", type=int, default=1, help="Distinct counterfactuals to report")

    batch = commands.add_parser("batch", parents=[common, restrict], help="Attack the test split")
    batch.add_argument("--limit", type=int, help="Attack only the first N test rows")

    commands.add_parser("analyze", parents=[common], help="Recompute summaries from results.json")

    realism = commands.add_parser("realism", parents=[common], help="Discriminator fail rates, gibbs off/on")
    realism.add_argument("--seed-b", type=int, help="Held-out seed (default: seed + 1)")
    realism.add_argument("--limit", type=int, help="Use only the first N test rows")

    score = commands.add_parser("score", parents=[common], help="Probability of default to credit score")
    score.add_argument("pds", type=float, nargs="+", help="Probabilities of default")

    serve = commands.add_parser("serve", parents=[common], help="Run the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Flags override the config file, which overrides environment and defaults."""
    attack: Dict[str, Any] = {}
    if args.seed is not None:
        attack["seed"] = args.seed
    if args.gibbs is not None:
        attack["gibbs"] = args.gibbs
    if getattr(args, "target", None) is not None:
        attack["target_class"] = args.target
    return load_run_config(
        args.config,
        output_dir=args.out,
        workers=args.workers,
        attack=attack or None,
    )


def _restricted(context: RunContext, args: argparse.Namespace):
    config = context.config.attack
    if args.allow_only:
        return analysis.restricted_config(config, args.allow_only, context.dataset)
    if args.exclude:
        return analysis.excluded_config(config, args.exclude, context.dataset)
    return config


def _describe(result: AttackResult) -> str:
    if result.error:
        return f"instance {result.instance_id}: error: {result.error}"
    if result.already_target:
        return f"instance {result.instance_id}: already predicted as class {result.target_class} (no changes)"
    status = "flipped" if result.success else "not flipped"
    changes = ", ".join(f"{c.name}: {c.old} -> {c.new}" for c in result.changed_features) or "none"
    return (
        f"instance {result.instance_id}: {status} to class {result.target_class} "
        f"after {result.generations_used} generation(s); changes: {changes}"
    )


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    report = train_run(config)
    print(f"train rows: {report.n_train}, test rows: {report.n_test}")
    if report.train_accuracy is not None:
        print(f"train accuracy: {report.train_accuracy:.4f}")
    if report.test_accuracy is not None:
        print(f"test accuracy: {report.test_accuracy:.4f}")
    return EXIT_OK


def _select_instance(context: RunContext, args: argparse.Namespace) -> tuple:
    if args.row is not None:
        if not 0 <= args.row < context.dataset.n_rows:
            raise ConfigError(f"row {args.row} outside 0..{context.dataset.n_rows - 1}")
        return context.dataset.rows[args.row], args.row
    try:
        raw = json.loads(args.instance)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--instance is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("--instance must be a JSON object of feature values")
    return encode_instance(raw, context.dataset.features), None


def cmd_attack(config: RunConfig, args: argparse.Namespace) -> int:
    if args.n_counterfactuals < 1:
        raise ConfigError("--n-counterfactuals must be >= 1")
    context = open_run(config)
    try:
        x, instance_id = _select_instance(context, args)
        runner = PermuteAttack(context.model, context.train, _restricted(context, args))
        if args.n_counterfactuals == 1:
            results = [runner.run(x, instance_id=instance_id)]
        else:
            results = alternative_counterfactuals(runner, x, args.n_counterfactuals, instance_id=instance_id)
            if not results:
                results = [runner.run(x, instance_id=instance_id)]
    finally:
        context.close()

    write_output(config, "attack", "attack.json", [r.model_dump(mode="json") for r in results])
    for result in results:
        print(_describe(result))
    successes = [r for r in results if r.success]
    if successes and config.default_class < len(successes[0].original_probs):
        report = score_report(successes[0].original_probs, successes, config.scorecard, config.default_class)
        write_output(config, "attack", "scorecard.json", report.model_dump(mode="json"))
        print(report.render())
    return EXIT_OK if successes else EXIT_NOT_CONVERGED


def export_analysis(
    config: RunConfig,
    command: str,
    results: Sequence[AttackResult],
    features: Sequence[FeatureSchema],
) -> None:
    summary = analysis.summarize(results, features)
    graph = analysis.cooccurrence(results)
    write_output(config, command, "summary.json", summary.model_dump(mode="json"))
    write_text(config, command, "histogram.csv", analysis.histogram_csv(summary))
    write_text(config, command, "feature_changes.csv", analysis.feature_changes_csv(summary))
    write_text(config, command, "outcomes.csv", analysis.outcomes_csv(results))
    write_text(config, command, "cooccurrence.tsv", graph.to_edge_list())
    write_text(config, command, "cooccurrence.dot", graph.to_dot(), comment="//")
    write_output(config, command, "cooccurrence.json", graph.to_payload())
    print(
        f"attacked: {summary.n_attacked}, already target: {summary.n_already_target}, "
        f"successful: {summary.n_success} "
        f"({100 * summary.success_rate:.1f}%), mean changed features: {summary.mean_changed_features:.2f}"
    )


def _test_rows(context: RunContext, limit: Optional[int]) -> tuple:
    rows, ids = context.test.rows, context.test_indices
    if limit is not None:
        rows, ids = rows[:limit], ids[:limit]
    if len(rows) == 0:
        raise DataError("the test split is empty")
    return rows, ids


def cmd_batch(config: RunConfig, args: argparse.Namespace) -> int:
    context = open_run(config)
    try:
        rows, ids = _test_rows(context, args.limit)
        results, _ = analysis.run_batch(
            rows,
            context.model,
            context.train,
            _restricted(context, args),
            instance_ids=ids,
            workers=config.workers,
        )
    finally:
        context.close()
    write_output(config, "batch", "results.json", [r.model_dump(mode="json") for r in results])
    export_analysis(config, "batch", results, context.dataset.features)
    return EXIT_OK


def cmd_analyze(config: RunConfig, args: argparse.Namespace) -> int:
    path = config.output_dir / "results.json"
    if not path.is_file():
        raise DataError(f"{path} not found; run 'batch' first")
    envelope = Envelope.model_validate_json(path.read_text(encoding="utf-8"))
    results = [AttackResult.model_validate(item) for item in envelope.payload]
    features = load_schema(config.output_dir / SCHEMA_FILE).features
    export_analysis(config, "analyze", results, features)
    return EXIT_OK


def cmd_realism(config: RunConfig, args: argparse.Namespace) -> int:
    context = open_run(config)
    seed_a = config.attack.seed
    seed_b = seed_a + 1 if args.seed_b is None else args.seed_b
    try:
        rows, _ = _test_rows(context, args.limit)
        report = analysis.realism_report(
            rows, config.attack, context.model, context.train, seed_a, seed_b, workers=config.workers
        )
    finally:
        context.close()
    write_output(config, "realism", "realism.json", report.model_dump(mode="json"))
    for label, rate in report.fail_rate.items():
        print(f"{label}: discriminator fail rate {rate:.3f}")
    return EXIT_OK


def cmd_score(config: RunConfig, args: argparse.Namespace) -> int:
    scores = [pd_to_score(pd, config.scorecard) for pd in args.pds]
    write_output(config, "score", "scores.json", {"pds": args.pds, "scores": scores})
    for pd, score in zip(args.pds, scores):
        print(f"{pd:.4f}\t{score}")
    return EXIT_OK


def cmd_serve(config: RunConfig, args: argparse.Namespace) -> int:
    import uvicorn

    from app.main import create_app

    uvicorn.run(create_app(config), host=args.host, port=args.port, log_level=config.log_level.lower())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "batch": cmd_batch,
    "analyze": cmd_analyze,
    "realism": cmd_realism,
    "score": cmd_score,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        logging.basicConfig(
            level=config.log_level.upper(),
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        )
        return COMMANDS[args.command](config, args)
    except (DataError, ConfigError, ModelError, AnalysisError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        logger.error("Model backend failed: %s", exc)
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
