"""Click-based CLI for moeforge."""

from __future__ import annotations

import functools
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeVar

import click
from pydantic import ValidationError

from moeforge.errors import BackendError, ConfigurationError, FixtureError

if TYPE_CHECKING:
    from moeforge.harness import ExperimentSpec

F = TypeVar("F", bound=Callable[..., Any])

EXIT_CONFIG = 1
EXIT_BACKEND = 2
EXIT_FIXTURE = 3


@click.group()
@click.version_option(package_name="moeforge")
@click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """moeforge: virtual mixture-of-experts decoding fusion."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _experiment_options(fn: F) -> F:
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="Experiment config (JSON)."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                     help="Seed for both the mock backend and noise injection."),
        click.option("--backend", type=click.Choice(["mock", "http"]), default=None),
        click.option("--out", type=click.Path(file_okay=False), default=None,
                     help="Output directory."),
        click.option("--steps", type=click.IntRange(min=1), default=None,
                     help="Generation steps per run."),
        click.option("--experts", type=str, default=None,
                     help="Expert counts, e.g. '3' or '128,32,3'."),
        click.option("--variant",
                     type=click.Choice(["baseline", "fusion_full", "fusion_no_truncation",
                                        "fusion_no_noise"]),
                     default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _handle_errors(fn: F) -> F:
    """Map library errors to exit codes: 1 configuration, 2 backend, 3 fixture."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except FixtureError as e:
            click.echo(f"Fixture error: {e}", err=True)
            sys.exit(EXIT_FIXTURE)
        except BackendError as e:
            click.echo(f"Backend error: {e}", err=True)
            sys.exit(EXIT_BACKEND)
        except (ConfigurationError, ValidationError) as e:
            click.echo(f"Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper  # type: ignore[return-value]


def _parse_counts(text: str) -> list[int]:
    try:
        counts = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"--experts must be comma-separated integers, got {text!r}") from e
    if not counts:
        raise ConfigurationError("--experts must name at least one count")
    return counts


def _load_spec(
    config_path: str | None,
    seed: int | None,
    backend: str | None,
    out: str | None,
    steps: int | None,
    experts: str | None,
    variant: str | None,
) -> ExperimentSpec:
    from moeforge.harness import ExperimentSpec

    spec = ExperimentSpec.from_file(Path(config_path)) if config_path else ExperimentSpec()
    if seed is not None:
        spec = spec.with_seed(seed)
    if backend is not None:
        spec = spec.override(backend={**spec.backend.model_dump(), "kind": backend})
    return spec.override(
        output_dir=Path(out) if out else None,
        steps=steps,
        expert_counts=_parse_counts(experts) if experts else None,
        variant=variant,
    )


@main.command()
@_experiment_options
@click.option("--task", "task_index", type=click.IntRange(min=0), default=0,
              help="Index into the experiment's task list.")
@_handle_errors
def generate(task_index: int, **options: Any) -> None:
    """Fuse one generation per expert count and write its trace."""
    from moeforge.harness import run_generation

    spec = _load_spec(**options)
    for count in spec.expert_counts:
        path = Path(spec.output_dir) / "generate" / (
            f"task{task_index}_n{count}_{spec.variant.value}.trace.jsonl"
        )
        trace = run_generation(spec, task_index, count, trace_path=path)
        click.echo(f"N={count}: {len(trace.tokens)} tokens -> {path}")


@main.command()
@_experiment_options
@click.option("--no-plots", is_flag=True, help="Skip SVG output.")
@_handle_errors
def orthogonality(no_plots: bool, **options: Any) -> None:
    """Sweep tasks x expert counts and record orthogonality per step."""
    from moeforge.harness import run_orthogonality_experiment

    spec = _load_spec(**options)
    report = run_orthogonality_experiment(spec, plots=not no_plots)
    for cell in report.cells:
        click.echo(
            f"task {cell.task_index} N={cell.expert_count}: mean O = {cell.mean_orthogonality:.4f}"
        )
    click.echo(f"Written to {spec.output_dir}")


@main.command()
@_experiment_options
@click.option("--runs", type=click.IntRange(min=1), default=None, help="Repetitions per task.")
@click.option("--eval-cases", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Eval fixture (JSONL) for per-variant accuracy.")
@_handle_errors
def ablation(runs: int | None, eval_cases: str | None, **options: Any) -> None:
    """Compare baseline, full fusion and the two single-module ablations."""
    from moeforge.harness import load_eval_cases, run_ablation

    spec = _load_spec(**options).override(runs=runs)
    path = eval_cases or spec.eval_path
    cases = load_eval_cases(Path(path)) if path else None
    rows = run_ablation(spec, cases)
    for row in rows:
        click.echo(
            f"{row.variant.value:22s} distinct={row.distinct_token_ratio:.3f} "
            f"bigram_repeat={row.repeated_bigram_rate:.3f} agreement={row.majority_agreement:.3f}"
        )
    click.echo(f"Written to {Path(spec.output_dir) / 'ablation.csv'}")


@main.command(name="eval")
@_experiment_options
@click.argument("cases_path", type=click.Path(exists=True, dir_okay=False), required=False)
@_handle_errors
def eval_command(cases_path: str | None, **options: Any) -> None:
    """Hallucination rate and per-query latency on a reference-answer fixture.

    Compares the single-expert baseline with full fusion unless --variant names one.
    """
    from moeforge.harness import (
        EVAL_COMPARISON,
        AblationVariant,
        compare_eval,
        load_eval_cases,
        write_eval_report,
    )

    variants = [AblationVariant(options["variant"])] if options["variant"] else EVAL_COMPARISON
    spec = _load_spec(**options)
    path = cases_path or spec.eval_path
    if path is None:
        raise ConfigurationError("no eval fixture given (argument or eval_path in the config)")
    for report in compare_eval(spec, load_eval_cases(Path(path)), variants):
        out = write_eval_report(report, Path(spec.output_dir))
        click.echo(
            f"{report.variant.value:12s} hallucination rate {report.rate:.3f} "
            f"({report.hallucinated}/{report.total}), "
            f"{report.mean_latency_s:.4f}s per query -> {out}"
        )


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--no-plots", is_flag=True, help="Skip SVG output.")
@_handle_errors
def report(run_dir: str, no_plots: bool) -> None:
    """Consolidate every trace under RUN_DIR into report.json, report.csv and report.svg."""
    from moeforge.report import emit_report

    out = emit_report(Path(run_dir), plots=not no_plots)
    click.echo(f"Written to {out}")


@main.command()
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON reports here instead of stdout.")
@_handle_errors
def oracle(seed: int, output: str | None) -> None:
    """Monte Carlo checks of the ensemble claims, as JSON reports."""
    from moeforge.oracle import run_all

    reports = run_all(seed)
    text = json.dumps([r.model_dump(by_alias=True) for r in reports], indent=2) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
        click.echo(f"Written to {output}")
    else:
        click.echo(text, nl=False)
    passed = sum(1 for r in reports if r.passed)
    click.echo(f"{passed}/{len(reports)} claims passed", err=True)
