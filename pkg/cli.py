"""
Command-line surface of the grounding toolkit
gen-data, make-surrogate, train, eval, bench, inspect and ablate; every command writes a
manifest of its outputs under --out-dir
"""

import argparse
import logging
import os
import sys
from typing import Dict, Optional, Sequence

from config import load_run_config, log_level_from_env, read_config_file, save_run_config
from exceptions import (
    AnnotationError,
    CapacityError,
    DimensionError,
    FormatError,
    FreezeViolationError,
    GroundingError,
    LoadError,
    NumericError,
    OracleError,
    UnsupportedModeError,
    ValidationError,
)
from models import RunConfig, SynthSpec
from tools.ssm import SsmMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_ERRORS = (FormatError, LoadError, AnnotationError, ValidationError, CapacityError, DimensionError, OSError)
NUMERIC_ERRORS = (NumericError, OracleError, FreezeViolationError)


class UsageError(GroundingError):
    """Arguments parsed but cannot be honored together"""


# settings a trained checkpoint may take from --config or flags at eval / inspect time
EVAL_FIELDS = ("seed", "nms_iou", "top_k", "very_good_threshold")

BENCH_D_MODEL = 64
BENCH_SCANS = {SsmMode.SELECTIVE_RECURRENT.value: "recurrent", SsmMode.SELECTIVE_PARALLEL_SCAN.value: "parallel"}


def _config_overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "seed": args.seed,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "frozen_block_path": getattr(args, "frozen_block", None),
    }


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    try:
        return load_run_config(args.config, _config_overrides(args))
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def _explicit_values(args: argparse.Namespace) -> Dict[str, object]:
    """RunConfig fields set by --config or by flags, without defaults or environment"""
    try:
        values = read_config_file(args.config) if args.config else {}
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc
    values.update({key: value for key, value in _config_overrides(args).items() if value is not None})
    return values


def _load_checkpoint(args: argparse.Namespace, path: str, adjustable: Sequence[str]):
    """
    Load a checkpoint with the requested settings applied

    Only the `adjustable` fields may differ from the checkpoint's own configuration; any
    other requested change is a usage error rather than being dropped.
    """
    from grounding_agent import VideoGroundingAgent

    requested = _explicit_values(args)
    agent = VideoGroundingAgent.load_checkpoint(path)
    try:
        merged = RunConfig.from_dict({**agent.config.to_dict(), **requested})
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc
    fixed = sorted(key for key in requested if key not in adjustable and getattr(merged, key) != getattr(agent.config, key))
    if fixed:
        raise UsageError(
            f"{args.command} cannot change {', '.join(fixed)} of checkpoint {path}; "
            f"adjustable here: {', '.join(adjustable)}"
        )
    overrides = {key: getattr(merged, key) for key in requested if key in adjustable}
    if overrides:
        agent = VideoGroundingAgent.load_checkpoint(path, overrides)
    return agent


def _report(args: argparse.Namespace):
    from tools.report_generator import ReportGeneratorTool

    return ReportGeneratorTool(args.out_dir)


# ----- commands -----

def cmd_gen_data(args: argparse.Namespace) -> int:
    from tools.data_io import generate_synthetic, save_dataset

    config = _resolve_config(args)
    spec = SynthSpec(
        n_samples=args.n_samples,
        video_len=tuple(args.video_len),
        query_len=tuple(args.query_len),
        video_dim=args.video_dim or config.video_dim,
        query_dim=args.query_dim or config.query_dim,
        concept_dim=args.concept_dim,
        signal_strength=args.signal_strength,
        seed=_explicit_values(args).get("seed", SynthSpec.seed),
        clip_len_s=args.clip_len or 1.0 / config.fps,
    )
    report = _report(args)
    for path in save_dataset(generate_synthetic(spec), args.out_dir):
        report.record(path)
    report.write_manifest("gen-data", {"seed": spec.seed, "n_samples": spec.n_samples})
    return EXIT_OK


def cmd_make_surrogate(args: argparse.Namespace) -> int:
    from tools.refiner import make_surrogate_block, save_frozen_block

    config = _resolve_config(args)
    block = make_surrogate_block(
        d_llm=args.d_llm or config.d_llm,
        layer_index=config.llm_layer_index if args.layer_index is None else args.layer_index,
        architecture=args.architecture or config.llm_architecture,
        seed=config.seed,
        state_size=args.state_size or config.ssm_state,
    )
    report = _report(args)
    path = report.path(args.name)
    save_frozen_block(block, path)
    report.record(path)
    report.write_manifest("make-surrogate", {"checksum": block.recorded_checksum})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from grounding_agent import VideoGroundingAgent
    from tools.data_io import load_dataset

    samples = load_dataset(args.data_dir)
    report = _report(args)
    if args.resume:
        agent = _load_checkpoint(args, args.resume, adjustable=("epochs",))
    else:
        agent = VideoGroundingAgent(_resolve_config(args))
    config_path = report.path("run_config.json")
    save_run_config(agent.config, config_path)
    report.record(config_path)

    summary = agent.train(samples, args.out_dir, report=report, resume=bool(args.resume), show_progress=not args.quiet)
    report.write_json("train_summary.json", summary)
    report.write_manifest("train", {"seed": agent.config.seed, "steps": agent.step})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from tools.data_io import load_dataset

    agent = _load_checkpoint(args, args.checkpoint, adjustable=EVAL_FIELDS)
    samples = load_dataset(args.data_dir)
    metrics, predictions = agent.evaluate(samples)

    report = _report(args)
    report.write_json("metrics.json", metrics)
    report.write_jsonl(
        "predictions.jsonl",
        [
            {
                "sample_id": p.sample_id,
                "spans": [[s.st, s.ed, s.confidence] for s in p.spans],
                "saliency": [float(v) for v in p.saliency],
            }
            for p in predictions
        ],
    )
    report.metrics_pdf(metrics)
    report.write_manifest("eval", {"checkpoint": os.path.abspath(args.checkpoint), "seed": agent.config.seed})
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from tools.bench import BenchmarkTool

    config = _resolve_config(args)
    explicit = _explicit_values(args)
    scan = args.scan or BENCH_SCANS.get(explicit.get("ssm_mode", SsmMode.SELECTIVE_RECURRENT.value))
    if scan is None:
        raise UsageError(f"bench times a selective scan; ssm_mode {explicit['ssm_mode']!r} has none")
    tool = BenchmarkTool(
        d_model=args.d_model or explicit.get("d_model", BENCH_D_MODEL),
        seed=config.seed,
        d_inner=explicit.get("d_inner"),
        state_size=explicit.get("ssm_state", config.ssm_state),
        scan=scan,
    )
    bench_report = tool.run_bench(args.lengths, repeats=args.repeats, warmup=args.warmup)
    report = _report(args)
    report.write_bench(bench_report)
    report.write_manifest("bench", {"slopes": bench_report.slopes})
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    from tools.data_io import load_dataset

    agent = _load_checkpoint(args, args.checkpoint, adjustable=EVAL_FIELDS)
    matching = [sample for sample in load_dataset(args.data_dir) if sample.sample_id == args.sample_id]
    if not matching:
        raise ValidationError(f"Sample {args.sample_id!r} not found in {args.data_dir}")
    agent.check_compatible(matching)

    report = _report(args)
    for tap, matrix in agent.inspect(matching[0]).items():
        report.write_similarity(f"similarity_{tap}.csv", matrix)
        report.plot_heatmap(f"similarity_{tap}.png", matrix, f"{args.sample_id}: after {tap}")
    report.write_manifest("inspect", {"sample_id": args.sample_id, "seed": agent.config.seed})
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from grounding_agent import ablate
    from tools.data_io import load_dataset

    config = _resolve_config(args)
    samples = load_dataset(args.data_dir)
    results = ablate(config, samples, args.seeds, os.path.join(args.out_dir, "runs"), study=args.study)

    report = _report(args)
    report.write_json("ablation.json", {"study": args.study, "seeds": list(args.seeds), "variants": results})
    report.ablation_pdf(results)
    report.write_manifest("ablate", {"study": args.study})
    return EXIT_OK


# ----- parser -----

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random stream of the command")
    parser.add_argument("--config", default=None, help="JSON file with RunConfig fields")
    parser.add_argument("--out-dir", required=True, help="Directory receiving every output")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlvtg", description="Desk-scale video temporal grounding toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a synthetic dataset")
    _common(gen)
    gen.add_argument("--n-samples", type=int, default=32)
    gen.add_argument("--signal-strength", type=float, default=1.0)
    gen.add_argument("--video-len", type=int, nargs=2, default=(16, 32), metavar=("MIN", "MAX"))
    gen.add_argument("--query-len", type=int, nargs=2, default=(4, 8), metavar=("MIN", "MAX"))
    gen.add_argument("--video-dim", type=int, default=None, help="Defaults to video_dim of the run config")
    gen.add_argument("--query-dim", type=int, default=None, help="Defaults to query_dim of the run config")
    gen.add_argument("--concept-dim", type=int, default=8)
    gen.add_argument("--clip-len", type=float, default=None, help="Seconds per clip; defaults to 1 / fps")
    gen.set_defaults(handler=cmd_gen_data)

    surrogate = commands.add_parser("make-surrogate", help="Write a seeded surrogate frozen block")
    _common(surrogate)
    surrogate.add_argument("--d-llm", type=int, default=None, help="Defaults to d_llm of the run config")
    surrogate.add_argument("--layer-index", type=int, default=None)
    surrogate.add_argument("--architecture", choices=("mamba_block", "linear_residual"), default=None)
    surrogate.add_argument("--state-size", type=int, default=None)
    surrogate.add_argument("--name", default="frozen_block.mlvg")
    surrogate.set_defaults(handler=cmd_make_surrogate)

    train = commands.add_parser("train", help="Train the full pipeline")
    _common(train)
    train.add_argument("--data-dir", required=True)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--frozen-block", default=None, help="Frozen block file written by make-surrogate")
    train.add_argument("--resume", default=None, metavar="CHECKPOINT")
    train.add_argument("--quiet", action="store_true", help="Hide the progress bar")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint")
    _common(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data-dir", required=True)
    evaluate.set_defaults(handler=cmd_eval)

    bench = commands.add_parser("bench", help="Aligner block vs attention scaling benchmark")
    _common(bench)
    bench.add_argument("--lengths", type=int, nargs="+", default=[512, 1024, 2048, 4096, 8192])
    bench.add_argument("--repeats", type=int, default=9)
    bench.add_argument("--warmup", type=int, default=3)
    bench.add_argument("--d-model", type=int, default=None, help=f"Defaults to d_model of --config, else {BENCH_D_MODEL}")
    bench.add_argument("--scan", choices=("recurrent", "parallel"), default=None, help="Defaults to the ssm_mode of --config, else recurrent")
    bench.set_defaults(handler=cmd_bench)

    inspect = commands.add_parser("inspect", help="Query/clip similarity matrices at three taps")
    _common(inspect)
    inspect.add_argument("--checkpoint", required=True)
    inspect.add_argument("--data-dir", required=True)
    inspect.add_argument("--sample-id", required=True)
    inspect.set_defaults(handler=cmd_inspect)

    ablation = commands.add_parser("ablate", help="Train and evaluate pipeline variants")
    _common(ablation)
    ablation.add_argument("--data-dir", required=True)
    ablation.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ablation.add_argument("--study", choices=("components", "refiner"), default="components")
    ablation.add_argument("--epochs", type=int, default=None)
    ablation.set_defaults(handler=cmd_ablate)

    return parser


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (UsageError, UnsupportedModeError)):
        return EXIT_USAGE
    if isinstance(error, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(error, DATA_ERRORS):
        return EXIT_DATA
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    level = (args.log_level or log_level_from_env()).upper()
    if not isinstance(logging.getLevelName(level), int):
        parser.print_usage(sys.stderr)
        logger.error(f"Unknown log level {level!r}")
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    os.makedirs(args.out_dir, exist_ok=True)
    try:
        return args.handler(args)
    except GroundingError as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed ({type(e).__name__}): {str(e)}")
        return code
    except OSError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_DATA
