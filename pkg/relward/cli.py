"""Command line interface for relward experiments."""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from . import __version__
from .core.audio import FORMANT_TABLES, parse_snr_list, synthesize_dataset, write_manifest
from .core.errors import ArgumentError, ContractError, RelwardError
from .core.experiments import (
    evaluate_run,
    export_run_filters,
    grad_check_run,
    import_filters,
    inspect_run,
    learning_trend,
    save_run,
    train_run,
    transfer_experiment,
)
from .core.model import VARIANTS, ModelConfig, init_model
from .core.settings import RunSettings
from .utils.files import atomic_write_text

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _snr_option(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    try:
        parse_snr_list(value)
    except ArgumentError as e:
        raise click.BadParameter(str(e), ctx=ctx, param=param) from e
    return value


def _absolute(path: Optional[str]) -> Optional[str]:
    return str(Path(path).resolve()) if path else None


def load_settings(config: Optional[str], overrides: Dict[str, Any]) -> RunSettings:
    """Defaults < config file < command-line flags."""
    settings = RunSettings(config)
    settings.apply_overrides(overrides)
    return settings


config_option = click.option("--config", "config", type=str, default=None, help="key=value settings file.")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Run seed.")
variant_option = click.option("--variant", type=click.Choice(list(VARIANTS)), default=None, help="Model variant.")


def training_options(func):
    """Flags shared by every command that trains."""
    for option in reversed(
        [
            config_option,
            variant_option,
            seed_option,
            click.option("--data", type=str, default=None, help="Training manifest."),
            click.option("--eval-data", type=str, default=None, help="Evaluation manifest."),
            click.option("--epochs", type=click.IntRange(min=1), default=None),
            click.option("--batch", type=click.IntRange(min=1), default=None),
            click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=None),
            click.option("--freeze-filters/--train-filters", default=None, help="Keep imported filters fixed."),
        ]
    ):
        func = option(func)
    return func


def _training_overrides(variant, seed, data, eval_data, epochs, batch, lr, freeze_filters) -> Dict[str, Any]:
    return {
        "train.variant": variant,
        "run.seed": seed,
        "data.train": _absolute(data),
        "data.eval": _absolute(eval_data),
        "train.epochs": epochs,
        "train.batch": batch,
        "train.lr": lr,
        "train.freeze_filters": freeze_filters,
    }


@click.group()
@click.version_option(__version__, prog_name="relward")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """Relevance-weighted learnable audio front-end: synthesize, train, evaluate, inspect."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@cli.command("synth-data")
@click.option("--out", required=True, type=str, help="Output directory for WAVs and manifest.tsv.")
@click.option("--count", type=click.IntRange(min=1), default=64, show_default=True)
@seed_option
@click.option("--snr", type=str, default=None, callback=_snr_option, help="Noisy copies, e.g. 20,10.")
@click.option("--noise", type=click.Choice(["white", "pink"]), default="white", show_default=True)
@click.option("--classes", type=click.IntRange(min=2, max=8), default=8, show_default=True)
@click.option("--table", type=click.Choice(sorted(FORMANT_TABLES)), default="default", show_default=True)
def synth_data(out, count, seed, snr, noise, classes, table) -> None:
    """Write a balanced synthetic dataset and its manifest."""
    seed = 0 if seed is None else seed
    snrs = parse_snr_list(snr) if snr else []
    out_dir = Path(out)
    entries = synthesize_dataset(out_dir, count, seed, classes, snrs, noise, table)
    manifest = write_manifest(out_dir / "manifest.tsv", entries)
    record = [f"classes={classes}", f"count={count}", f"noise={noise}", f"seed={seed}", f"snr={snr or ''}"]
    record += [f"table={table}", f"version={__version__}"]
    atomic_write_text(out_dir / "synth.txt", "\n".join(record) + "\n")
    click.echo(f"{len(entries)} clips -> {manifest}")


@cli.command()
@training_options
@click.option("--out", required=True, type=str, help="Run directory.")
def train(config, variant, seed, data, eval_data, epochs, batch, lr, freeze_filters, out) -> None:
    """Train a variant and write checkpoint, metrics and config record."""
    settings = load_settings(
        config, _training_overrides(variant, seed, data, eval_data, epochs, batch, lr, freeze_filters)
    )
    result = train_run(settings, out)
    last = result.metrics[-1]
    click.echo(f"{settings.get('train.variant')}: epoch {last.epoch} {last.split} accuracy {last.accuracy:.4f}")


@cli.command("eval")
@click.argument("checkpoint", type=str)
@config_option
@click.option("--data", type=str, default=None, help="Evaluation manifest (clean rows are used).")
@click.option("--snr", type=str, default=None, callback=_snr_option, help="Conditions, e.g. inf,10,0 [data.snr].")
@seed_option
@click.option("--noise", type=click.Choice(["white", "pink"]), default=None, help="Noise kind [data.noise].")
@click.option("--out", type=str, default=None, help="CSV path (default: stdout).")
def eval_command(checkpoint, config, data, snr, seed, noise, out) -> None:
    """Accuracy per SNR condition plus the average."""
    settings = load_settings(
        config, {"data.eval": _absolute(data), "data.snr": snr, "data.noise": noise, "run.seed": seed}
    )
    result = evaluate_run(checkpoint, settings, out)
    click.echo(result.to_csv(), nl=False)


@cli.command("grad-check")
@config_option
@variant_option
@seed_option
@click.option("--tol", type=float, default=None, help="Maximum relative error [grad.tol].")
@click.option("--batch", type=click.IntRange(min=1), default=None, help="Clips per check [grad.batch].")
@click.option("--max-entries", type=click.IntRange(min=1), default=None, help="Entries per tensor [grad.max_entries].")
@click.option("--out", type=str, default=None, help="CSV report path.")
def grad_check_command(config, variant, seed, tol, batch, max_entries, out) -> None:
    """Finite-difference check of every parameter group on the tiny configuration."""
    settings = load_settings(
        config,
        {
            "train.variant": variant,
            "run.seed": seed,
            "grad.tol": tol,
            "grad.batch": batch,
            "grad.max_entries": max_entries,
        },
    )
    report = grad_check_run(settings, out)
    click.echo(report.format())
    if not report.passed:
        raise ContractError(f"gradient check failed for {', '.join(report.failing)}", stage="grad_check")


@cli.command("export-filters")
@click.argument("checkpoint", type=str)
@config_option
@click.option("--out", required=True, type=str, help="Filter file to write.")
def export_filters_command(checkpoint, config, out) -> None:
    """Write the learned center frequencies of a run."""
    click.echo(str(export_run_filters(checkpoint, out, load_settings(config, {}))))


@cli.command("import-filters")
@click.argument("filters", type=str)
@config_option
@variant_option
@seed_option
@click.option("--out", required=True, type=str, help="Run directory for the new model.")
def import_filters_command(filters, config, variant, seed, out) -> None:
    """Start a fresh model from exported filters (no training)."""
    settings = load_settings(config, {"train.variant": variant, "run.seed": seed})
    model = init_model(
        ModelConfig.from_dict(settings.section("model")), settings.get("train.variant"), settings.get("run.seed")
    )
    import_filters(model, filters)
    save_run(out, settings, model)
    click.echo(f"imported {model.config.f} filters -> {out}")


@cli.command()
@click.argument("checkpoint", type=str)
@config_option
@click.option("--out", required=True, type=str, help="Directory for the CSV dumps.")
@click.option("--data", type=str, default=None, help="Manifest whose clips get relevance and spectrogram dumps.")
@click.option("--limit", type=click.IntRange(min=1), default=None, help="Only the first N manifest rows.")
def inspect(checkpoint, config, out, data, limit) -> None:
    """Dump filters.csv, mod_kernels.csv, relevance.csv and spectrogram.csv."""
    for path in inspect_run(checkpoint, out, load_settings(config, {}), data, limit):
        click.echo(str(path))


@cli.command()
@click.argument("source_run", type=str)
@training_options
@click.option("--out", required=True, type=str, help="Directory for transfer.csv.")
def transfer(source_run, config, variant, seed, data, eval_data, epochs, batch, lr, freeze_filters, out) -> None:
    """Filters learned on one dataset, used on another: 2x2 accuracy table."""
    settings = load_settings(
        config, _training_overrides(variant, seed, data, eval_data, epochs, batch, lr, freeze_filters)
    )
    table = transfer_experiment(source_run, settings, out)
    click.echo(table.to_csv(), nl=False)


def _variant_list(ctx: click.Context, param: click.Parameter, value: str) -> List[str]:
    # Variant names contain commas, so the list separator is ";".
    names = [name.strip() for name in value.split(";") if name.strip()]
    unknown = [name for name in names if name not in VARIANTS]
    if not names or unknown:
        raise click.BadParameter(f"expected ;-separated variants from {';'.join(VARIANTS)}", ctx=ctx, param=param)
    return names


def _seed_list(ctx: click.Context, param: click.Parameter, value: str) -> List[int]:
    try:
        seeds = [int(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(f"seeds must be integers: {value!r}", ctx=ctx, param=param) from e
    if not seeds:
        raise click.BadParameter("no seeds given", ctx=ctx, param=param)
    return seeds


@cli.command()
@config_option
@click.option("--data", type=str, default=None, help="Training manifest.")
@click.option("--eval-data", type=str, default=None, help="Evaluation manifest.")
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--batch", type=click.IntRange(min=1), default=None)
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=None)
@click.option(
    "--variants", type=str, default=";".join(VARIANTS), callback=_variant_list, help="';'-separated variant names."
)
@click.option("--seeds", type=str, default="0,1,2,3,4", callback=_seed_list, show_default=True)
@click.option("--snr", type=float, default=10.0, show_default=True, help="Noisy evaluation condition in dB.")
@click.option("--out", required=True, type=str, help="Directory for trend.csv and trend_summary.csv.")
def trend(config, data, eval_data, epochs, batch, lr, variants, seeds, snr, out) -> None:
    """Clean and noisy accuracy per variant over several seeds."""
    settings = load_settings(config, _training_overrides(None, None, data, eval_data, epochs, batch, lr, None))
    table = learning_trend(settings, out, variants, seeds, snr)
    click.echo(table.summary_csv(), nl=False)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures to exit codes: 1 usage, 2 data/contract."""
    try:
        cli.main(args=argv, prog_name="relward", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except RelwardError as e:
        logger.debug("command failed", exc_info=True)
        click.echo(f"Error: {e}", err=True)
        return 2
    return 0


def main() -> None:
    """Main entry point for the CLI."""
    sys.exit(run())


if __name__ == "__main__":
    main()
