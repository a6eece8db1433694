"""Command-line interface.

Subcommands mirror the pipeline stages (`severity`, `anchors`, `synth`,
`siv`, `train`, `infer`, `eval`, `run`), plus `make-phantoms` to generate
synthetic labeled subjects for demos and tests. Exit codes: 0 success,
2 configuration error, 3 data error, 4 internal invariant violation.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import load_config
from .errors import CardioLatticeError, ConfigError
from .phantom import GridSpec
from .pipeline import (
    Pipeline,
    make_phantom_subjects_dir,
    make_phantom_test_dir,
    run_pipeline,
)
from .volume import Pathology


def _fail(exc: Exception) -> None:
    if isinstance(exc, CardioLatticeError):
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    click.echo(f"internal error: {exc}", err=True)
    sys.exit(4)


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(), help="JSON config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--jobs", type=int, default=None, help="Worker count (outputs are identical for any value).")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None, help="Override the output directory.")(fn)
    return fn


def _pipeline(config_path, seed, jobs, out_dir) -> Pipeline:
    return Pipeline(load_config(config_path, seed=seed, out_dir=out_dir, jobs=jobs))


def _run_stages(pipeline: Pipeline, stages) -> None:
    for stage in stages:
        getattr(pipeline, f"stage_{stage}")()
    for status in pipeline.statuses:
        click.echo(f"{status.name}: {status.status}")


@click.group()
def main() -> None:
    """Virtual-cohort synthesis and lattice-of-experts segmentation."""


def _stage_command(name: str, prerequisites: tuple[str, ...], help_text: str):
    @main.command(name=name, help=help_text)
    @_config_options
    def command(config_path, seed, jobs, out_dir):
        try:
            pipeline = _pipeline(config_path, seed, jobs, out_dir)
            _run_stages(pipeline, prerequisites + (name.replace("-", "_"),))
        except Exception as exc:  # noqa: BLE001 - mapped to exit codes
            _fail(exc)

    return command


_stage_command("severity", (), "Compute biomarkers and severity scores for the subject directory.")
_stage_command("anchors", ("severity",), "Select the anchor set for the configured regime.")
_stage_command("synth", ("severity", "anchors"), "Synthesize the virtual cohorts.")
_stage_command("siv", ("severity", "anchors", "synth"), "Emit interleaved train/validation plans for every cell.")
_stage_command("train", ("severity", "anchors", "synth", "siv"), "Train the lattice of experts.")
_stage_command(
    "infer",
    ("severity", "anchors", "synth", "siv", "train"),
    "Segment the test volumes via dynamic expert activation.",
)
_stage_command(
    "eval",
    ("severity", "anchors", "synth", "siv", "train", "infer"),
    "Score predictions against ground truth and write metric reports.",
)


@main.command(name="run", help="Run the full pipeline end to end.")
@_config_options
def run_command(config_path, seed, jobs, out_dir):
    try:
        config = load_config(config_path, seed=seed, out_dir=out_dir, jobs=jobs)
        manifest = run_pipeline(config)
        for name, info in manifest["stages"].items():
            click.echo(f"{name}: {info['status']}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command(name="make-phantoms", help="Generate a synthetic labeled subject directory.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Target subject directory.")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--healthy", type=int, default=6, show_default=True, help="Healthy subject count.")
@click.option("--per-pathology", type=int, default=8, show_default=True, help="Subjects per pathology.")
@click.option("--dims", default="64,64,64", show_default=True, help="Grid dims nx,ny,nz.")
@click.option("--spacing", default="2.0,2.0,2.0", show_default=True, help="Voxel spacing mm sx,sy,sz.")
@click.option("--test", "as_test_set", is_flag=True, help="Generate a held-out test set between anchors instead.")
@click.option(
    "--test-severities",
    default="0.3,0.62",
    show_default=True,
    help="Severities for --test subjects, strictly between the anchor extremes.",
)
def make_phantoms_command(out_dir, seed, healthy, per_pathology, dims, spacing, as_test_set, test_severities):
    try:
        try:
            grid = GridSpec(
                tuple(int(v) for v in dims.split(",")),
                tuple(float(v) for v in spacing.split(",")),
            )
        except ValueError as exc:
            raise ConfigError(f"bad grid options: {exc}") from exc
        if as_test_set:
            severities = tuple(float(v) for v in test_severities.split(","))
            ids = make_phantom_test_dir(Path(out_dir), grid, seed, severities=severities)
        else:
            ids = make_phantom_subjects_dir(
                Path(out_dir), grid, seed, n_healthy=healthy, n_per_pathology=per_pathology
            )
        click.echo(f"wrote {len(ids)} subjects to {out_dir}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
