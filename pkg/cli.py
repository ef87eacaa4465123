import argparse
import asyncio
import logging
import sys
import time
from pathlib import Path

import settings
from config import (
    OUTPUT_FORMATS,
    STAGE_ORDER,
    PipelineConfig,
    closure,
    load_config,
    validate,
    write_config,
)
from inputs import AsyncInputLoader
from report import RunReport, emit_report
from stages import STAGES, PipelineContext
from stopsafe.exceptions import ConfigError, StageError, StopSafeError
from stopsafe.synthetic import generate_corpus, write_corpus

logger = logging.getLogger(__name__)

# Stages with no dependencies run side by side
INDEPENDENT_STAGES = ("intersections", "cgm")
SYNTH_CONFIG = "pipeline.env"


async def run_pipeline(config: PipelineConfig) -> RunReport:
    """
    Main pipeline function that is handed over to the asyncio event loop.
    Loads the inputs the requested stages need, runs the independent
    intersections and cgm stages in parallel, then the rest in dependency order.

    :param config: Pipeline configuration; validated before anything runs.
    :raises ConfigError: If the configuration does not validate.
    :raises StageError: If loading inputs or any stage fails.
    """
    config = validate(config)
    config.output_path.mkdir(parents=True, exist_ok=True)

    context = PipelineContext(config=config)
    context.report.stages = list(config.stages)

    try:
        context.inputs = await AsyncInputLoader.for_stages(config).load()
    except (StopSafeError, OSError) as exc:
        raise StageError("ingest", exc) from exc
    context.report.inputs = context.inputs.counts()

    independent = [s for s in config.stages if s in INDEPENDENT_STAGES]
    try:
        async with asyncio.TaskGroup() as tg:
            for stage in independent:
                tg.create_task(STAGES[stage](context).run())
    except ExceptionGroup as eg:
        raise eg.exceptions[0]

    for stage in config.stages:
        if stage not in independent:
            await STAGES[stage](context).run()

    return context.report


def synthesize(out: Path, seed: int) -> Path:
    """
    Writes a synthetic corpus and a configuration file that runs every stage on it.

    :return: Path of the configuration file
    """
    paths = write_corpus(generate_corpus(seed=seed), out)
    return write_config(
        Path(out) / SYNTH_CONFIG,
        {
            **{key: path.name for key, path in paths.items()},
            "OUTPUT_PATH": "output",
            "OUTPUT_FORMAT": settings.DEFAULT_OUTPUT_FORMAT,
            "STAGES": STAGE_ORDER,
        },
    )


def parse_arguments(argv: list[str] | None = None):
    """
    Parses command line arguments.
    """
    parser = argparse.ArgumentParser(
        description="CLI client for the stop intersection behavior pipeline"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    pipeline_options = argparse.ArgumentParser(add_help=False)
    pipeline_options.add_argument(
        "--config", "-c", required=True, help="Path to the pipeline configuration file"
    )
    pipeline_options.add_argument(
        "--out",
        "-o",
        default=None,
        help="Output directory. Overrides OUTPUT_PATH of the configuration file.",
    )
    pipeline_options.add_argument(
        "--output-format",
        "-f",
        choices=OUTPUT_FORMATS,
        default=None,
        help="Format of intermediate tables. Overrides OUTPUT_FORMAT.",
    )

    run = commands.add_parser(
        "run", parents=[pipeline_options], help="Run the configured stages"
    )
    run.add_argument(
        "--stage",
        "-s",
        action="append",
        choices=STAGE_ORDER,
        default=None,
        help="Stage to run, with the stages it depends on. Repeatable; "
        "overrides STAGES.",
    )

    for stage in STAGE_ORDER:
        commands.add_parser(
            stage,
            parents=[pipeline_options],
            help=f"Run the {stage} stage and the stages it depends on",
        )

    synth = commands.add_parser(
        "synth", help="Write a synthetic corpus and a configuration file for it"
    )
    synth.add_argument("--out", "-o", required=True, help="Directory to write to")
    synth.add_argument("--seed", type=int, default=0, help="Random seed. Defaults to 0.")

    return parser.parse_args(argv)


def build_config(args) -> PipelineConfig:
    config = load_config(args.config)
    stages = args.stage if args.command == "run" else [args.command]
    return config.with_overrides(
        output_path=args.out,
        output_format=args.output_format,
        stages=closure(stages) if stages else None,
    )


def main(argv: list[str] | None = None) -> int:
    """
    Main function that is called when the script is run from the command line.

    :return: Process exit status, 1 on a configuration or stage error
    """
    args = parse_arguments(argv)

    logger.info(f"{'-' * 30} Starting {args.command} {'-' * 30}")
    start = time.perf_counter()

    try:
        if args.command == "synth":
            path = synthesize(Path(args.out), args.seed)
            logger.info(f"Wrote synthetic corpus; run it with --config {path}")
        else:
            config = build_config(args)
            # Start the asyncio event loop and run the pipeline
            report = asyncio.run(run_pipeline(config))
            report.timings["total"] = time.perf_counter() - start
            emit_report(report, config.output_path)
    except (ConfigError, StageError) as exc:
        logger.error(str(exc))
        return 1

    elapsed = time.perf_counter() - start
    logger.info(f"{'-' * 30} {args.command} completed in {elapsed:.3f} seconds {'-' * 30}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
