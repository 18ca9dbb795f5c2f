from logging import DEBUG, Logger, basicConfig, getLogger, INFO
from argparse import ArgumentParser, Namespace
from typing import Dict, List, Optional
from pathlib import Path
from sys import path
import sys

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.routelab.traces import (
    TraceError,
    diff_traces,
    export_trace,
    per_head_frame,
    summary_frame,
    trace_frame,
    trace_sentences,
)
from src.utils.config_loader import (
    ConfigFormatError,
    ResourceNotFoundError,
    RunConfigLoader,
    load_sentences,
    write_key_values,
)
from src.config.settings import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    MANIFEST_NAME,
    TOOL_VERSION,
    get_settings,
)
from src.trainer.train_loop import (
    ComparisonMismatchError,
    evaluate,
    run_experiment,
    run_sweep,
    train_run,
)
from src.numerics.tensor import IndexRangeError
from src.config.run_config import RunConfig, load_run_config, resolve_values
from src.model.checkpoint import CheckpointError, load_model
from src.data.tokenizer import TokenizerError, detokenize, tokenize_bytes
from src.model.transformer import SequenceLengthError, build_model, generate
from src.utils.ledger_store import LedgerStore
from src.costmodel.flops import flop_report
from src.data.stream import CorpusError
from src.model.config import ConfigError

USAGE_ERRORS = (
    ConfigError,
    ConfigFormatError,
    ResourceNotFoundError,
    TraceError,
    CorpusError,
    TokenizerError,
    IndexRangeError,
    ComparisonMismatchError,
    SequenceLengthError,
)


class UsageError(Exception):
    """
    Exception raised for invalid command-line usage.
    """

    pass


class LabArgumentParser(ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message: str) -> None:
        raise UsageError(message)


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(prog="movelab", description="MoVE desk-scale laboratory")
    parser.add_argument("--version", action="version", version=f"movelab {TOOL_VERSION}")
    common = LabArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="KEY=VALUE run config")
    common.add_argument("--output", type=Path, default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override MODEL/TRAIN seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="train one model")
    train.add_argument("--resume", type=Path, default=None, help="checkpoint to resume")

    evaluate_cmd = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True)

    gen = commands.add_parser("generate", parents=[common], help="decode from a checkpoint")
    gen.add_argument("--checkpoint", type=Path, required=True)
    gen.add_argument("--prompt", type=str, default=None, help="prompt text (byte tokens)")
    gen.add_argument("--prompt-ids", type=str, default=None, help="comma-separated ids")
    gen.add_argument("--steps", type=int, default=32)
    gen.add_argument("--mode", choices=["greedy", "temperature"], default="greedy")
    gen.add_argument("--temperature", type=float, default=1.0)

    flops = commands.add_parser("flops", parents=[common], help="per-token cost report")
    flops.add_argument("--d", type=int, default=None)
    flops.add_argument("--heads", type=int, default=None)
    flops.add_argument("--slots", type=int, default=None)
    flops.add_argument("--context", type=int, default=None)
    flops.add_argument("--machine-readable", action="store_true")

    trace = commands.add_parser("trace", parents=[common], help="gate-trace analysis")
    trace.add_argument("--checkpoint", type=Path, required=True)
    trace.add_argument("--sentences", type=Path, default=None)
    trace.add_argument("--target", type=str, default=None)
    trace.add_argument("--tokenizer", choices=["bytes", "ids"], default=None)
    trace.add_argument("--format", choices=["csv", "jsonl"], default=None)

    commands.add_parser("sweep", parents=[common], help="multi-seed variant sweep")
    return parser


def _seed_overrides(values: Dict[str, str], seed: Optional[int]) -> Dict[str, object]:
    if seed is None:
        return {}
    overrides: Dict[str, object] = {}
    if any(k.startswith("MODEL_") for k in values):
        overrides["MODEL_SEED"] = seed
    if any(k.startswith("TRAIN_") for k in values):
        overrides["TRAIN_SEED"] = seed
    return overrides


def _resolve(args: Namespace, extra: Optional[Dict[str, object]] = None) -> RunConfig:
    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    loader = RunConfigLoader()
    values = loader.load(args.config)
    overrides = {**_seed_overrides(values, args.seed), **(extra or {})}
    return load_run_config(args.config, overrides, loader)


def _output_dir(args: Namespace) -> Path:
    if args.output is not None:
        return Path(args.output)
    stem = Path(args.config).stem if args.config else args.command
    return Path(get_settings().output_dir) / f"{args.command}-{stem}"


def _write_manifest(output: Path, values: Dict[str, object]) -> Path:
    return write_key_values(output / MANIFEST_NAME, values)


def cmd_train(args: Namespace) -> int:
    run = _resolve(args)
    if run.model is None or run.train is None:
        raise ConfigError("train needs MODEL_* and TRAIN_* keys")
    output = _output_dir(args)
    _write_manifest(output, run.manifest("train"))
    data = run.load_task()
    if args.resume is not None:
        params = build_model(run.model)
        ledger = train_run(params, run.train, data, output_dir=output, resume_from=args.resume)
        ledger.write_jsonl(output)
        final = ledger.final
    else:
        result = run_experiment([run.model], run.train, data, output)
        final = result.ledgers[run.model.label].final
    if final is not None:
        print(f"label={run.model.label}")
        print(f"final_eval_loss={final.eval_loss!r}")
        print(f"final_bpb={final.bpb!r}")
    return EXIT_OK


def cmd_eval(args: Namespace) -> int:
    params, _ = load_model(args.checkpoint)
    run = _resolve(args)
    output = _output_dir(args)
    _write_manifest(output, {**run.manifest("eval"), "RUN_CHECKPOINT": args.checkpoint})
    batch_size = run.train.batch_size if run.train else 16
    report = evaluate(params, run.load_task(), batch_size, run.data.max_eval_windows)
    for key, value in report.to_record().items():
        print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return EXIT_OK


def cmd_generate(args: Namespace) -> int:
    params, _ = load_model(args.checkpoint)
    if args.prompt_ids:
        try:
            prompt: List[int] = [int(t) for t in args.prompt_ids.split(",") if t.strip()]
        except ValueError as e:
            raise UsageError(f"--prompt-ids must be comma-separated integers: {e}") from e
    elif args.prompt is not None:
        prompt = tokenize_bytes(args.prompt).tokens.tolist()
    else:
        raise UsageError("generate needs --prompt or --prompt-ids")
    seed = args.seed if args.seed is not None else get_settings().default_seed
    output = _output_dir(args)
    _write_manifest(
        output,
        {
            "TOOL_VERSION": TOOL_VERSION,
            "RUN_SUBCOMMAND": "generate",
            "RUN_CHECKPOINT": args.checkpoint,
            "RUN_PROMPT_IDS": ",".join(str(t) for t in prompt),
            "RUN_STEPS": args.steps,
            "RUN_MODE": args.mode,
            "RUN_TEMPERATURE": args.temperature,
            "RUN_SEED": seed,
        },
    )
    tokens = generate(params, prompt, args.steps, args.mode, args.temperature, seed)
    print("tokens=" + ",".join(str(t) for t in tokens.tolist()))
    if params.config.vocab_size == 256:
        try:
            print("text=" + detokenize(tokens))
        except TokenizerError:
            logger.warning("Generated bytes are not valid UTF-8; printing ids only")
    return EXIT_OK


def cmd_flops(args: Namespace) -> int:
    dims = {"d": args.d, "heads": args.heads, "slots": args.slots, "context": args.context}
    if args.config is not None:
        model = _resolve(args).model
        if model is not None:
            defaults = {
                "d": model.d_model,
                "heads": model.n_heads,
                "slots": model.n_slots,
                "context": model.max_seq_len,
            }
            dims = {k: v if v is not None else defaults[k] for k, v in dims.items()}
    missing = [k for k, v in dims.items() if v is None]
    if missing:
        raise UsageError(f"flops needs --{' --'.join(missing)} (or a config)")
    if dims["d"] < 1 or dims["heads"] < 1 or dims["slots"] < 0 or dims["context"] < 0:
        raise UsageError(f"flops dimensions must be positive, got {dims}")

    report = flop_report(dims["d"], dims["heads"], dims["slots"], dims["context"])
    if args.output is not None:
        manifest = {f"RUN_{k.upper()}": v for k, v in dims.items()}
        _write_manifest(
            Path(args.output),
            {**manifest, "TOOL_VERSION": TOOL_VERSION, "RUN_SUBCOMMAND": "flops"},
        )
    if args.machine_readable:
        for key, value in report.records().items():
            print(f"{key}={value}")
    else:
        print(report.render())
    return EXIT_OK


def cmd_trace(args: Namespace) -> int:
    params, _ = load_model(args.checkpoint)
    extra = {
        "TRACE_SENTENCES": args.sentences,
        "TRACE_TARGET": args.target,
        "TRACE_TOKENIZER": args.tokenizer,
        "TRACE_FORMAT": args.format,
    }
    if args.config is not None:
        run = _resolve(args, extra)
        options, manifest = run.trace, run.manifest("trace")
    else:
        flat = {k: str(v) for k, v in extra.items() if v is not None}
        run = resolve_values(flat)
        options, manifest = run.trace, run.manifest("trace")
    if options.sentences is None or options.target is None:
        raise UsageError("trace needs a sentence file and a target (flags or TRACE_*)")

    sentences = load_sentences(options.sentences)
    traces = trace_sentences(params, sentences, options.target, options.tokenizer)
    diffs = diff_traces(traces)

    output = _output_dir(args)
    _write_manifest(output, {**manifest, "RUN_CHECKPOINT": args.checkpoint})
    suffix = options.format
    table = trace_frame(traces, diffs)
    export_trace(table, output / f"trace_table.{suffix}", suffix)
    export_trace(per_head_frame(traces), output / f"trace_heads.{suffix}", suffix)
    summary = summary_frame(diffs)
    export_trace(summary, output / f"trace_summary.{suffix}", suffix)
    print(summary.to_string(index=False))
    print(f"rows={len(table)}")
    return EXIT_OK


def cmd_sweep(args: Namespace) -> int:
    run = _resolve(args)
    if run.model is None or run.train is None:
        raise ConfigError("sweep needs MODEL_* and TRAIN_* keys")
    configs = run.sweep_configs()
    seeds = [args.seed] if args.seed is not None else run.sweep.seed_list()
    output = _output_dir(args)
    _write_manifest(output, run.manifest("sweep"))
    data = run.load_task()
    with LedgerStore(get_settings().ledger_db) as store:
        medians = run_sweep(
            configs, run.train, data, seeds, run.sweep.name, output, store, run.sweep.baseline
        )
    print(medians.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "flops": cmd_flops,
    "trace": cmd_trace,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parses ``argv`` and runs one subcommand.
    Returns:
        0 on success, 1 for usage/config errors, 2 for runtime failures.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"movelab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    level = DEBUG if args.verbose else get_settings().log_level.upper()
    getLogger().setLevel(level)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *USAGE_ERRORS) as e:
        logger.error(f"{args.command}: {e}")
        print(f"movelab {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        logger.error(f"{args.command}: checkpoint error: {e}")
        print(f"movelab {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"movelab {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
