"""
Command Line
Subcommands for every pipeline stage plus the synthetic fixture generator.

Usage: python -m src.cli [global options] <command> [command options]

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 partial failure
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

from loguru import logger

from . import __version__
from .config import RunConfig, configure_logging, load_run_config
from .errors import ConfigError, ToolkitError
from .eval_harness import render_table
from .pipeline import StageRunner, scene_id_of
from .qa_generator import QACategory
from .synthetic_scene import write_synthetic_scene

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3

SCENE_STAGES = ("ingest", "render", "keyframes", "genqa", "bundle", "dispatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene2prompt", description="Spatial QA prompting toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--output-root", help="artifact root, overrides the config")
    parser.add_argument("--workers", type=int, help="scenes processed in parallel")
    parser.add_argument("--scene", action="append", dest="scenes", help="manifest path or glob (repeatable)")
    parser.add_argument("--force", action="store_true", help="ignore stage stamps and recompute")
    parser.add_argument("--strict", action="store_true", help="reject unknown manifest keys")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--json-logs", action="store_true", help="one JSON log record per line")

    sub = parser.add_subparsers(dest="command", required=True)
    for stage in ("ingest", "render", "keyframes", "bundle", "dispatch"):
        sub.add_parser(stage, help=f"run the {stage} stage")
    genqa = sub.add_parser("genqa", help="generate QA items")
    genqa.add_argument("--category", action="append", dest="categories",
                       help="category name such as rel_direction (repeatable)")
    genqa.add_argument("--seed", type=int, help="base seed")
    genqa.add_argument("--count", type=int, help="items per category")
    evaluate = sub.add_parser("eval", help="score responses and print the accuracy table")
    evaluate.add_argument("--report", help="write the report JSON here")
    evaluate.add_argument("--weighted", action="store_true", help="item-weighted overall average")
    fixture = sub.add_parser("make-fixture", help="write the synthetic test scene")
    fixture.add_argument("--out", required=True, help="output directory")
    fixture.add_argument("--seed", type=int, default=0)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, object] = {
        "output_root": args.output_root,
        "workers": args.workers,
        "scenes": args.scenes,
    }
    if args.command == "genqa":
        overrides["base_seed"] = args.seed
        overrides["items_per_category"] = args.count
        if args.categories:
            overrides["categories"] = [c.upper() for c in args.categories]
    if args.command == "eval" and args.weighted:
        overrides["weighted_average"] = True
    return load_run_config(args.config, overrides)


def run_scenes(scenes: Sequence[str], fn: Callable[[str], object], workers: int) -> int:
    """Apply fn to every scene; one scene failing does not stop the others"""
    if not scenes:
        logger.error("No scenes to process; pass --scene or list scenes in the config")
        return EXIT_VALIDATION

    def guarded(scene: str) -> Optional[ToolkitError]:
        try:
            fn(scene)
            return None
        except ToolkitError as e:
            logger.bind(scene_id=scene).error("{}: {}", type(e).__name__, e)
            return e

    with ThreadPoolExecutor(max_workers=workers) as pool:
        errors = [e for e in pool.map(guarded, scenes) if e is not None]
    if not errors:
        return EXIT_OK
    if len(errors) < len(scenes):
        return EXIT_PARTIAL
    return errors[0].exit_code


def scene_ids(config: RunConfig, runner: StageRunner) -> List[str]:
    """Scene ids named by the config, or every ingested scene under the output root"""
    if config.scenes:
        return [scene_id_of(path) for path in config.scene_paths()]
    return runner.layout.ingested_scenes()


def run_command(args: argparse.Namespace) -> int:
    if args.command == "make-fixture":
        print(write_synthetic_scene(args.out, seed=args.seed))
        return EXIT_OK

    config = config_from_args(args)
    runner = StageRunner(config, force=args.force, strict=args.strict, progress=not args.json_logs)

    if args.command == "ingest":
        return run_scenes(config.scene_paths(), runner.ingest, config.workers)

    if args.command == "dispatch":
        failed: List[int] = []

        def dispatch(scene_id: str):
            failed.append(sum(1 for r in runner.dispatch(scene_id) if not r.ok))

        # Requests already run concurrently inside each scene
        code = run_scenes(scene_ids(config, runner), dispatch, 1)
        if code == EXIT_OK and any(failed):
            logger.warning("{} items failed after retries", sum(failed))
            return EXIT_PARTIAL
        return code

    if args.command == "eval":
        report = runner.evaluate(scene_ids(config, runner))
        if args.report:
            report.export_to_json(args.report)
            logger.info("Wrote report to {}", args.report)
        print(render_table(report))
        return EXIT_OK

    stage = getattr(runner, args.command)
    return run_scenes(scene_ids(config, runner), stage, config.workers)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level, serialize=args.json_logs)
    except ValueError as e:
        parser.error(f"invalid --log-level: {e}")
    if args.command == "genqa" and args.categories:
        valid = {c.value for c in QACategory}
        bad = [c for c in args.categories if c.upper() not in valid]
        if bad:
            parser.error(f"unknown categories: {', '.join(bad)}")

    try:
        return run_command(args)
    except ConfigError as e:
        logger.error("Configuration error: {}", e)
        return EXIT_VALIDATION
    except ToolkitError as e:
        logger.error("{}: {}", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
