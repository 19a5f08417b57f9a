#!/usr/bin/env python3
"""
Edcurate CLI - Dataset curation, late-fusion classification and trend analysis
Each subcommand runs one pipeline stage against a work directory of artifacts.
"""

import logging
from typing import Any, Callable, Dict, List, Optional

import click

from .dsl import ConfigParser, STAGE_NAMES, config_to_yaml
from .pipeline import PipelineEngine, replay, run_stage
from .types import ConfigError, DataError, PipelineResult, ReplayReport, StageOutcome

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

STAGE_HELP = {
    "ingest": "Load posts, apply source labels, sanitize text and keep multimodal posts",
    "dedupe": "Remove exact-id, exact-text and near-image duplicates",
    "audit": "Flag posts whose nearest neighbours disagree with their label",
    "balance": "Undersample every class to the minority class count",
    "split": "Stratified train/val/test split",
    "train": "Train the late-fusion head on the train split",
    "eval": "Evaluate unimodal, mean-fusion and trained-fusion models on the test split",
    "classify": "Classify trend posts with the trained fusion head",
    "trend": "Monthly abundance series with polynomial and linear fits",
}


def parse_fractions(value: Optional[str]) -> Optional[list]:
    if value is None:
        return None
    try:
        fractions = [float(part) for part in value.split(",")]
    except ValueError:
        raise ConfigError(f"split.fractions must be comma-separated numbers, got '{value}'") from None
    if len(fractions) != 3:
        raise ConfigError(f"split.fractions needs three values, got {len(fractions)}")
    return fractions


def build_overrides(options: Dict[str, Any]) -> Dict[str, Any]:
    """Flag values that were actually given, shaped like the config file"""
    overrides: Dict[str, Any] = {}
    if options.get("seed") is not None:
        overrides["seed"] = options["seed"]
    if options.get("out_dir"):
        overrides["workdir"] = options["out_dir"]
    if options.get("near_threshold") is not None:
        overrides["dedup"] = {"near_threshold": options["near_threshold"]}
    fractions = parse_fractions(options.get("fractions"))
    if fractions is not None:
        overrides["split"] = {"fractions": fractions}
    return overrides


def load_config(options: Dict[str, Any]):
    return ConfigParser.resolve(options.get("config_path"), build_overrides(options))


def common_options(fn: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Pipeline YAML config"),
        click.option("--input", "input_path", type=click.Path(dir_okay=False), help="Override the stage's primary input file"),
        click.option("--out-dir", "out_dir", type=click.Path(file_okay=False), help="Work directory for artifacts"),
        click.option("--seed", type=int, help="Seed for every random choice"),
        click.option("--near-threshold", type=float, help="Near-duplicate image similarity threshold"),
        click.option("--fractions", type=str, help="Split fractions, e.g. 0.6,0.2,0.2"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def guarded(ctx: click.Context, action: Callable[[], Any]) -> Any:
    """Run action, mapping toolkit errors to exit codes"""
    try:
        return action()
    except ConfigError as e:
        click.echo(f"CONFIG ERROR: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    except (DataError, OSError) as e:
        click.echo(f"DATA ERROR: {e}", err=True)
        ctx.exit(EXIT_DATA)


def display_outcome(outcome: StageOutcome):
    """Display stage result"""
    click.echo(f"Stage: {outcome.stage}")
    click.echo(f"Status: {outcome.status}")
    for key, value in outcome.summary.items():
        click.echo(f"  {key}={value}")
    click.echo("Artifacts:")
    for name in sorted(outcome.outputs):
        click.echo(f"  {name}")


def display_result(result: PipelineResult):
    """Display pipeline execution result"""
    click.echo("SUCCESS!")
    click.echo(f"Pipeline: {result.name}")
    click.echo(f"Status: {result.status}")
    click.echo("Stages:")
    for stage, outcome in result.stages.items():
        click.echo(f"  {stage}: {outcome.status}")
        for key, value in outcome.summary.items():
            click.echo(f"    {key}={value}")


def display_replay(report: ReplayReport):
    click.echo(f"Replay: {report.stage}")
    click.echo(f"Matched: {len(report.matched)}")
    for label, names in (
        ("Mismatched", report.mismatched),
        ("Missing", report.missing),
        ("Changed inputs", report.changed_inputs),
    ):
        if names:
            click.echo(f"{label}: {', '.join(names)}")
    click.echo("IDENTICAL" if report.identical else "DIFFERENT")


class ConfigUsageMixin:
    """Report bad flags and arguments with the configuration exit status"""

    def parse_args(self, ctx: click.Context, args: List[str]) -> List[str]:
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as e:
            e.exit_code = EXIT_CONFIG
            raise


class StageCommand(ConfigUsageMixin, click.Command):
    pass


class StageGroup(ConfigUsageMixin, click.Group):
    command_class = StageCommand

    def resolve_command(self, ctx: click.Context, args: List[str]):
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError as e:
            e.exit_code = EXIT_CONFIG
            raise


@click.group(cls=StageGroup)
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, verbose: bool):
    """Edcurate - curation, late-fusion classification and trend analysis"""
    ctx.ensure_object(dict)
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def _register_stage(stage: str):
    @cli.command(stage, help=STAGE_HELP[stage])
    @common_options
    @click.pass_context
    def command(ctx, **options):
        def action():
            cfg = load_config(options)
            return run_stage(cfg, stage, options.get("input_path"))

        display_outcome(guarded(ctx, action))

    return command


for _stage in STAGE_NAMES:
    _register_stage(_stage)


@cli.command()
@common_options
@click.pass_context
def pipeline(ctx, **options):
    """Run the configured stage graph in dependency order"""

    def action():
        if options.get("input_path"):
            raise ConfigError("--input applies to single stages; set inputs.posts for a pipeline run")
        return PipelineEngine(load_config(options)).run()

    display_result(guarded(ctx, action))


@cli.command("replay")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.pass_context
def replay_command(ctx, manifest: str):
    """Re-run a recorded stage from its manifest and compare output digests"""
    report = guarded(ctx, lambda: replay(manifest))
    display_replay(report)
    if not report.identical:
        ctx.exit(EXIT_DATA)


@cli.command("show-config")
@common_options
@click.pass_context
def show_config(ctx, **options):
    """Print the fully merged configuration"""
    cfg = guarded(ctx, lambda: load_config(options))
    click.echo(config_to_yaml(cfg), nl=False)


def main():
    """Main CLI entry point"""
    cli()


if __name__ == "__main__":
    main()
