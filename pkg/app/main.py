"""
TriDomain Retrieval - Command Line Interface
generate -> summarize -> train -> embed -> evaluate -> report, plus gradcheck
and summary-accuracy
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Type, TypeVar

import orjson
from pydantic import BaseModel, ValidationError

from app.config import settings
from app.exceptions import DataValidationError, TriDomainError, UsageError
from app.modules.evaluation import (
    REPORT_FORMATS,
    evaluate_all,
    histogram_frame,
    load_report,
    render_report,
    save_report,
)
from app.modules.fusion import embed_dataset
from app.modules.summarization import (
    LabeledSummary,
    RemoteLLMClient,
    evaluate_summarizer,
    summarize_dataset,
)
from app.modules.synthgen import generate_dataset
from app.modules.training import (
    grad_check,
    gradcheck_fixture,
    load_model_checkpoint,
    train,
)
from app.schemas import Command, ModelConfig, SummarizerKind, SynthConfig, TaskId, TrainingConfig
from app.services.tensor_io import (
    describe_validation_error,
    load_dataset,
    load_embeddings,
    load_ground_truth,
    load_summaries,
    save_embeddings,
    save_summaries,
)

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)

SUMMARIZER_CHOICES = {
    "llm_remote": SummarizerKind.LLM_REMOTE,
    "llm_mock": SummarizerKind.LLM_MOCK,
    "keyword": SummarizerKind.KEYWORD_BASELINE,
    "raw": SummarizerKind.RAW_PASSTHROUGH,
    "name_only": SummarizerKind.NAME_ONLY,
    "features_only": SummarizerKind.FEATURES_ONLY,
}


# =============================================================================
# Helpers
# =============================================================================

class _ArgumentParser(argparse.ArgumentParser):
    """Parser that reports usage problems as UsageError instead of exiting"""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_config(path: Optional[str], model: Type[ConfigT]) -> ConfigT:
    """Experiment config from a JSON file; defaults when no path is given"""
    if path is None:
        return model()
    config_path = Path(path)
    if not config_path.exists():
        raise DataValidationError(f"config not found: {config_path}", path=str(config_path))
    try:
        return model.model_validate(orjson.loads(config_path.read_bytes()))
    except orjson.JSONDecodeError as e:
        raise DataValidationError(f"malformed config {config_path}: {e}", path=str(config_path)) from e
    except ValidationError as e:
        raise DataValidationError(f"invalid config {config_path}: {describe_validation_error(e)}",
                                  path=str(config_path)) from e


def _parse_tasks(value: Optional[str]) -> Optional[List[TaskId]]:
    if not value:
        return None
    try:
        return [TaskId(item.strip().upper()) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise UsageError(f"unknown task in --tasks: {value}") from e


def _write_json(path: Path, payload: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n")


# =============================================================================
# Commands
# =============================================================================

def cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config, SynthConfig)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    paths = generate_dataset(config, args.out)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    instances = load_dataset(args.dataset)
    kind = SUMMARIZER_CHOICES[args.kind]
    client = None
    if kind is SummarizerKind.LLM_REMOTE or (args.remote and kind in (SummarizerKind.NAME_ONLY,
                                                                      SummarizerKind.FEATURES_ONLY)):
        if not settings.llm_configured:
            raise UsageError("remote summarization needs LLM_ENDPOINT_URL")
        client = RemoteLLMClient()

    try:
        records = summarize_dataset(instances, kind, client=client,
                                    degrade_on_failure=not args.strict)
    finally:
        if client is not None:
            client.close()
    save_summaries(records, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, TrainingConfig)
    if args.epochs is not None:
        config = config.model_copy(update={"epochs": args.epochs})
    instances = load_dataset(args.dataset)
    summaries = load_summaries(args.summaries) if args.summaries else None
    result = train(instances, summaries, config, out_dir=args.out, seed=args.seed)
    final = result.logs[-1].losses
    print(f"epochs: {len(result.logs)}  final loss: {final.total:.6f}  temperature: {final.temperature:.6f}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model = load_model_checkpoint(args.checkpoint)
    instances = load_dataset(args.dataset)
    summaries = load_summaries(args.summaries) if args.summaries else None
    records = embed_dataset(instances, summaries, model, batch_size=args.batch_size)
    save_embeddings(records, args.out)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    embeddings = load_embeddings(args.embeddings)
    summaries = load_summaries(args.summaries) if args.summaries else None
    report = evaluate_all(embeddings, tasks=_parse_tasks(args.tasks), summaries=summaries)
    save_report(report, args.report)
    print(render_report(report, "text", signal_task=TaskId(args.signal_task)), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    report = load_report(args.report)
    print(render_report(report, args.format, signal_task=TaskId(args.signal_task)), end="")
    if args.histogram:
        if report.distance_stats is None:
            raise DataValidationError("report has no distance statistics", path=args.report)
        histogram_frame(report.distance_stats).to_csv(args.histogram, index=False)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = load_config(args.config, ModelConfig)
    model, batch = gradcheck_fixture(config, batch_size=args.batch_size, seed=args.seed)
    result = grad_check(model, batch, epsilon=args.epsilon, samples_per_tensor=args.samples,
                        param_filter=args.filter or None, seed=args.seed)
    for name, error in sorted(result.per_tensor.items()):
        print(f"{error:12.3e}  {name}")
    print(f"max relative error: {result.max_rel_error:.3e} over {result.checked_entries} entries")
    if args.out:
        _write_json(Path(args.out), result.model_dump(mode="json"))
    return 0 if result.max_rel_error < args.tolerance else 2


def cmd_summary_accuracy(args: argparse.Namespace) -> int:
    summaries = load_summaries(args.summaries)
    truth = load_ground_truth(args.ground_truth)
    samples = []
    for inst in load_dataset(args.dataset):
        if not inst.domain.has_asr or inst.instance_id not in summaries:
            continue
        gt = truth.get(inst.product_id)
        if gt is None:
            raise DataValidationError(f"no ground truth for product {inst.product_id}", path=args.ground_truth)
        samples.append(LabeledSummary(record=summaries[inst.instance_id], true_name=gt.true_name,
                                      true_attributes=gt.true_attributes, domain=inst.domain))
    if not samples:
        raise DataValidationError("no summarized S/L instances to score", path=args.summaries)

    print(f"{'Domain':<10}{'Samples':>9}{'Name acc':>10}{'Attr rec':>10}{'Attr acc':>10}")
    for key, acc in evaluate_summarizer(samples).items():
        attr_acc = f"{acc.attr_accuracy:.4f}" if acc.attr_accuracy is not None else "n/a"
        print(f"{key:<10}{acc.n_samples:>9d}{acc.name_accuracy:>10.4f}{acc.attr_recall:>10.4f}{attr_acc:>10}")
    return 0


COMMANDS: Dict[Command, Callable[[argparse.Namespace], int]] = {
    Command.GENERATE: cmd_generate,
    Command.SUMMARIZE: cmd_summarize,
    Command.TRAIN: cmd_train,
    Command.EMBED: cmd_embed,
    Command.EVALUATE: cmd_evaluate,
    Command.REPORT: cmd_report,
    Command.GRADCHECK: cmd_gradcheck,
    Command.SUMMARY_ACCURACY: cmd_summary_accuracy,
}


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="tridomain",
        description="Cross-domain product retrieval over product pages, short videos and live streams",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None,
                        help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_ArgumentParser)
    sub.required = True

    p = sub.add_parser(Command.GENERATE.value, help="Generate a synthetic tri-domain dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")

    p = sub.add_parser(Command.SUMMARIZE.value, help="Summarize raw titles and transcripts")
    p.add_argument("--dataset", required=True, help="Dataset manifest")
    p.add_argument("--kind", required=True, choices=list(SUMMARIZER_CHOICES))
    p.add_argument("--out", required=True, help="Summaries JSONL")
    p.add_argument("--remote", action="store_true",
                   help="Filter remote LLM output for name_only/features_only (default: mock output)")
    p.add_argument("--strict", action="store_true", help="Fail instead of degrading LLM failures to no_output")

    p = sub.add_parser(Command.TRAIN.value, help="Train the embedding model")
    p.add_argument("--config", help="TrainingConfig JSON (defaults when omitted)")
    p.add_argument("--dataset", required=True, help="Training manifest")
    p.add_argument("--summaries", help="Summaries JSONL (not needed for visual-only models)")
    p.add_argument("--out", required=True, help="Output directory for checkpoints and the loss log")
    p.add_argument("--epochs", type=int, default=None, help="Override the config epoch count")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")

    p = sub.add_parser(Command.EMBED.value, help="Embed a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--summaries")
    p.add_argument("--out", required=True, help="Embeddings JSONL")
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser(Command.EVALUATE.value, help="Evaluate cross-domain retrieval")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--summaries", help="Summaries JSONL; enables the signal-level tables")
    p.add_argument("--report", required=True, help="Report JSON output")
    p.add_argument("--tasks", help="Comma-separated subset, e.g. P2S,L2P (default: all six)")
    p.add_argument("--signal-task", default=TaskId.L2P.value, choices=[t.value for t in TaskId])

    p = sub.add_parser(Command.REPORT.value, help="Render a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--format", default="text", choices=list(REPORT_FORMATS))
    p.add_argument("--signal-task", default=TaskId.L2P.value, choices=[t.value for t in TaskId])
    p.add_argument("--histogram", help="Also write the distance histograms as CSV")

    p = sub.add_parser(Command.GRADCHECK.value, help="Finite-difference gradient verification")
    p.add_argument("--config", help="ModelConfig JSON (desk defaults when omitted)")
    p.add_argument("--samples", type=int, default=200, help="Entries checked per tensor")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--filter", action="append", help="Parameter-name substring (repeatable)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Write the result as JSON")

    p = sub.add_parser(Command.SUMMARY_ACCURACY.value, help="Score summaries against ground truth")
    p.add_argument("--summaries", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--dataset", required=True)

    return parser


# =============================================================================
# Entry Point
# =============================================================================

def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one command

    Returns:
        0 on success, 1 on a usage error, 2 on a data or validation error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level or settings.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    command = Command(args.command)
    logger.info(f"Running {command.value}")

    try:
        return COMMANDS[command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return e.exit_code
    except TriDomainError as e:
        logger.error(f"{command.value} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, ValidationError) as e:
        logger.error(f"{command.value} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
