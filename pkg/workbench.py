#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GAN Workbench command line.

    python workbench.py gen-data --out data/faces --n 1000 --seed 7
    python workbench.py train --config configs/tiny.yaml
    python workbench.py sample --checkpoint runs/tiny/checkpoints/latest.ckpt --n 64 --seed 0 --out out/
    python workbench.py eval --checkpoint runs/tiny/checkpoints/latest.ckpt --data data/faces --extractor toy
    python workbench.py ablate --config configs/ablation.yaml
    python workbench.py plot --log runs/tiny/loss_log.txt --out runs/tiny/losses.png

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import sys
from typing import Optional, Sequence

import click

from core_utils import (
    EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, Config, ConfigValidationError, SafeErrorLogger,
    UnknownExtractorError, WorkbenchError, setup_logging,
)
from dataset_manager import DECODE_WORKERS, HAIR_PALETTE, SyntheticFaceSpec, generate_synthetic_dataset
from metric_evaluator import AVAILABLE_EXTRACTORS, DEFAULT_SPLITS, MIN_EVAL_SAMPLES
import run_manager

error_logger = SafeErrorLogger("workbench")


def _parse_activation_files(values: Sequence[str]) -> dict:
    files = {}
    for value in values:
        role, sep, path = value.partition("=")
        if not sep or role not in ("real", "fake") or not path:
            raise click.BadParameter(f"expected real=PATH or fake=PATH, got '{value}'", param_hint="--activations")
        files[role] = path
    return files


@click.group()
def cli():
    """Desk-scale GAN workbench: USE / CMHSA generator ablations."""
    problems = Config.validate()
    if problems:
        raise ConfigValidationError(problems)


@cli.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--n", "n", required=True, type=click.IntRange(min=1), help="Number of images")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--size", default=64, show_default=True, type=click.IntRange(min=8), help="Image side in pixels")
@click.option("--classes", default=4, show_default=True, type=click.IntRange(1, len(HAIR_PALETTE)),
              help="Hair-colour classes")
def gen_data(out_dir, n, seed, size, classes):
    """Render a synthetic labelled face dataset plus manifest."""
    dataset = generate_synthetic_dataset(SyntheticFaceSpec(seed=seed, image_size=size, num_classes=classes),
                                         n, Config.resolve_output_dir(out_dir))
    click.echo(f"✅ [Data] {n} images written to {dataset.root}")
    click.echo(f"   manifest digest: {dataset.digest}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--no-resume", is_flag=True, help="Ignore an existing checkpoint and start over")
@click.option("--quiet", is_flag=True, help="Hide the progress bar")
def train(config_path, no_resume, quiet):
    """Train one variant as described by a run config."""
    cfg = run_manager.RunConfig.from_yaml(config_path)
    result = run_manager.train_run(cfg, resume=not no_resume, progress=not quiet)
    click.echo(f"✅ [Train] {cfg.model.variant} reached step {result.step}")
    click.echo(f"   checkpoint: {result.checkpoint}")
    click.echo(f"   loss log:   {result.loss_log}")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n", default=64, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def sample(checkpoint, n, seed, out_dir):
    """Write an N-image grid generated from seeded latents."""
    path = run_manager.sample_run(checkpoint, n, seed, out_dir)
    click.echo(f"🖼️  [Sample] {n} images -> {path}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data", required=True, type=click.Path(exists=True))
@click.option("--extractor", default="toy", show_default=True,
              help=f"Feature extractor ({', '.join(AVAILABLE_EXTRACTORS)})")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-samples", default=256, show_default=True, type=click.IntRange(min=MIN_EVAL_SAMPLES))
@click.option("--splits", default=DEFAULT_SPLITS, show_default=True, type=click.IntRange(min=1))
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "val", "test"]))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Where metrics.json goes (default: the checkpoint's run directory)")
@click.option("--activations", multiple=True, help="real=PATH / fake=PATH for the external extractor")
@click.option("--workers", default=DECODE_WORKERS, show_default=True, type=click.IntRange(min=1),
              help="Image decoding threads")
def eval_cmd(checkpoint, data, extractor, seed, n_samples, splits, split, out_dir, activations, workers):
    """Compute FID and IS for a checkpoint."""
    report = run_manager.evaluate_run(
        checkpoint, data, extractor, seed=seed, n_samples=n_samples, splits=splits, split=split,
        out_dir=out_dir, activation_files=_parse_activation_files(activations) or None, workers=workers,
    )
    click.echo(f"📊 [Metrics] {report.format_text()}")
    if report.noise_floor is not None:
        click.echo(f"   real-vs-real noise floor: {report.noise_floor:.4f}")
    if report.mode_collapsed:
        click.echo(f"⚠️  [Metrics] generated batch std {report.fake_pixel_std:.4f} looks mode-collapsed")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1),
              help="Independent worker processes")
def ablate(config_path, jobs):
    """Train and evaluate DCGAN, USE-GAN, CMHSA-GAN and USE-CMHSA-GAN."""
    cfg = run_manager.RunConfig.from_yaml(config_path)
    report = run_manager.run_ablation(cfg, jobs=jobs)
    click.echo(report.format_text())


@cli.command()
@click.option("--log", "loss_log", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def plot(loss_log, out_path):
    """Render a loss log to PNG."""
    path = run_manager.plot_losses(loss_log, out_path)
    click.echo(f"📈 [Plot] {path}")


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures onto the stable exit codes."""
    setup_logging()
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="workbench",
                      standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except (ConfigValidationError, UnknownExtractorError) as e:
        click.echo(f"❌ {e}", err=True)
        return EXIT_VALIDATION
    except click.Abort:
        click.echo("🛑 Aborted", err=True)
        return EXIT_RUNTIME
    except WorkbenchError as e:
        error_logger.log_error(str(e), "CLI")
        click.echo(f"❌ {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    except Exception as e:
        error_logger.log_error("unexpected failure", "CLI", e)
        click.echo(f"🔥 unexpected {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
