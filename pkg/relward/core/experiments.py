"""Run directories and the experiments built on top of training.

A run directory holds ``config.txt`` (reproducibility record), ``checkpoint.json``
and ``metrics.csv``. Inspection dumps and transfer tables are plain CSV. Every
command that writes an artifact also writes a reproducibility record: ``config.txt``
in an output directory, ``<stem>.config.txt`` beside a single output file.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.files import atomic_write_text
from .audio import center_block, read_manifest, synthesize_clip
from .errors import ArgumentError, ContractError, DataError, FormatError
from .filterbank import export_filters, read_filters
from .gradcheck import GradCheckReport, grad_check
from .model import (
    AcousticModel,
    FrontCache,
    forward,
    get_variant,
    init_model,
    load_checkpoint,
    resolve_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .normalization import NormMode, center_slice
from .settings import RunSettings
from .training import (
    EpochMetrics,
    EvalResult,
    TrainConfig,
    TrainResult,
    condition_name,
    evaluate,
    load_dataset,
    load_examples,
    train,
    write_metrics,
)

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.json"
METRICS_FILE = "metrics.csv"


def save_run(
    out_dir: Union[str, Path],
    settings: RunSettings,
    model: AcousticModel,
    step: int = 0,
    metrics: Optional[Sequence[EpochMetrics]] = None,
) -> Path:
    """Write the reproducibility record, checkpoint and (if given) metrics."""
    out_dir = Path(out_dir)
    settings.save(out_dir / CONFIG_FILE)
    save_checkpoint(model, out_dir / CHECKPOINT_FILE, step)
    if metrics is not None:
        write_metrics(out_dir / METRICS_FILE, metrics)
    logger.info("Wrote run artifacts to %s", out_dir)
    return out_dir


def train_run(
    settings: RunSettings, out_dir: Union[str, Path], model: Optional[AcousticModel] = None
) -> TrainResult:
    """Train from settings and persist the run directory."""
    config = TrainConfig.from_settings(settings)
    result = train(config, model)
    save_run(out_dir, settings, result.model, result.step, result.metrics)
    return result


def import_filters(model: AcousticModel, path: Union[str, Path]) -> AcousticModel:
    """Replace the model's center frequencies with an exported filter file."""
    family, k, mu = read_filters(path)
    cfg = model.config
    if len(mu) != cfg.f or k != cfg.k:
        raise ContractError(
            f"{path} holds f={len(mu)}, k={k} filters but the model uses f={cfg.f}, k={cfg.k}", stage="import_filters"
        )
    if not np.all((mu > 0.0) & (mu < 0.5)):
        raise FormatError(f"{path}: center frequencies must lie in (0, 0.5)")
    if family is not model.variant.family:
        logger.warning("Importing %s filters into a %s model", family.value, model.variant.family.value)
    return set_filters(model, mu)


def set_filters(model: AcousticModel, mu: np.ndarray) -> AcousticModel:
    """Overwrite the centers only; sinc band widths stay at their mel-init spacing."""
    model.params["fb.mu"][...] = mu
    return model


def record_path(out: Union[str, Path]) -> Path:
    """Reproducibility record for a single-file artifact: ``<stem>.config.txt`` beside it."""
    out = Path(out)
    return out.with_name(f"{out.stem}.config.txt")


def describe_checkpoint(settings: RunSettings, model: AcousticModel, checkpoint: Union[str, Path]) -> RunSettings:
    """Point ``settings`` at a loaded checkpoint: its model section, variant and path."""
    settings.apply_overrides({f"model.{key}": value for key, value in model.config.to_dict().items()})
    settings.set("train.variant", model.variant.name)
    settings.set("run.checkpoint", str(resolve_checkpoint(checkpoint).resolve()))
    return settings


def evaluate_run(
    checkpoint: Union[str, Path], settings: RunSettings, out: Optional[Union[str, Path]] = None
) -> EvalResult:
    """Evaluate a checkpoint on ``data.eval`` under every ``data.snr`` condition."""
    model, _ = load_checkpoint(checkpoint)
    describe_checkpoint(settings, model, checkpoint)
    manifest = settings.get("data.eval")
    if not manifest:
        raise DataError("no evaluation manifest: pass --data or set data.eval")
    result = evaluate(
        model,
        manifest,
        settings.get("data.snr"),
        settings.get("run.seed"),
        settings.get("data.noise"),
        settings.get_threads(),
    )
    if out is not None:
        atomic_write_text(out, result.to_csv())
        settings.save(record_path(out))
    return result


def grad_check_run(settings: RunSettings, out: Optional[Union[str, Path]] = None) -> GradCheckReport:
    """Gradient check of ``train.variant`` on the tiny configuration, driven by ``grad.*``."""
    cfg = tiny_config()
    settings.apply_overrides({f"model.{key}": value for key, value in cfg.to_dict().items()})
    seed = settings.get("run.seed")
    model = init_model(cfg, settings.get("train.variant"), seed, zero_relevance_output=False)
    labels = [i % cfg.classes for i in range(settings.get("grad.batch"))]
    blocks = [
        center_block(synthesize_clip(label, seed * 1_000_003 + i).buffer, cfg.frame_len, cfg.hop, cfg.frames)
        for i, label in enumerate(labels)
    ]
    report = grad_check(
        model, blocks, labels, settings.get("grad.tol"), max_entries=settings.get("grad.max_entries"), seed=seed
    )
    if out is not None:
        atomic_write_text(out, report.to_csv())
        settings.save(record_path(out))
    return report


def export_run_filters(checkpoint: Union[str, Path], out: Union[str, Path], settings: RunSettings) -> Path:
    model, _ = load_checkpoint(checkpoint)
    path = export_filters(model.fb, out)
    describe_checkpoint(settings, model, checkpoint).save(record_path(path))
    logger.info("Exported %d filters to %s", model.config.f, path)
    return path


def filters_csv(model: AcousticModel) -> str:
    lines = ["idx,mu,hz"]
    rate = model.config.sample_rate
    lines.extend(f"{i},{mu!r},{mu * rate!r}" for i, mu in enumerate(model.params["fb.mu"].tolist()))
    return "\n".join(lines) + "\n"


def mod_kernels_csv(model: AcousticModel) -> str:
    lines = ["map,row,col,value"]
    for (m, row, col), value in np.ndenumerate(model.params["mod.kernels"]):
        lines.append(f"{m},{row},{col},{float(value)!r}")
    return "\n".join(lines) + "\n"


def _eval_fronts(model: AcousticModel, blocks: Sequence, workers: int) -> Iterator[Tuple[int, FrontCache]]:
    for start in range(0, len(blocks), 32):
        _, cache = forward(model, blocks[start : start + 32], NormMode.EVAL, workers)
        for offset, front in enumerate(cache.fronts):
            yield start + offset, front


def relevance_csv(model: AcousticModel, blocks: Sequence, workers: int = 1) -> str:
    """Weights actually applied per input; a disabled stage reports all ones."""
    lines = ["input_id,stage,idx,weight"]
    cfg = model.config
    for input_id, front in _eval_fronts(model, blocks, workers):
        for stage, rel, size in (
            ("acoustic", front.acoustic_relevance, cfg.f),
            ("modulation", front.modulation_relevance, cfg.mod_maps),
        ):
            weights = rel.weights if rel is not None else np.ones(size)
            lines.extend(f"{input_id},{stage},{i},{w!r}" for i, w in enumerate(weights.tolist()))
    return "\n".join(lines) + "\n"


def spectrogram_csv(model: AcousticModel, blocks: Sequence, workers: int = 1) -> str:
    """Log filterbank energies (``x_raw``) next to the normalized, pruned ``z`` per input.

    Frame numbers index the input block, so ``z`` rows line up with the
    matching center columns of ``x_raw``.
    """
    lines = ["input_id,stage,filter,frame,value"]
    first_kept = center_slice(model.config.frames, model.config.keep).start
    for input_id, front in _eval_fronts(model, blocks, workers):
        for stage, values, offset in (("x_raw", front.x, 0), ("z", front.z, first_kept)):
            for (i, frame), value in np.ndenumerate(values):
                lines.append(f"{input_id},{stage},{i},{frame + offset},{float(value)!r}")
    return "\n".join(lines) + "\n"


def inspect_run(
    checkpoint: Union[str, Path],
    out_dir: Union[str, Path],
    settings: RunSettings,
    manifest: Optional[Union[str, Path]] = None,
    limit: Optional[int] = None,
) -> List[Path]:
    """Dump learned filters, modulation kernels and, with a manifest, per-input relevance and spectrograms."""
    model, _ = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    written = [
        atomic_write_text(out_dir / "filters.csv", filters_csv(model)),
        atomic_write_text(out_dir / "mod_kernels.csv", mod_kernels_csv(model)),
    ]
    if manifest is not None:
        entries = read_manifest(manifest)
        if limit is not None:
            entries = entries[:limit]
        blocks = [ex.block for ex in load_examples(entries, model.config)]
        workers = settings.get_threads()
        written.append(atomic_write_text(out_dir / "relevance.csv", relevance_csv(model, blocks, workers)))
        written.append(atomic_write_text(out_dir / "spectrogram.csv", spectrogram_csv(model, blocks, workers)))
        settings.set("data.eval", str(Path(manifest).resolve()))
    written.append(describe_checkpoint(settings, model, checkpoint).save(out_dir / CONFIG_FILE))
    return written


@dataclass
class TransferRow:
    filters_from: str
    task: str
    accuracy: float


@dataclass
class TransferTable:
    rows: List[TransferRow]

    def to_csv(self) -> str:
        lines = ["filters_from,task,accuracy"]
        lines.extend(f"{row.filters_from},{row.task},{row.accuracy!r}" for row in self.rows)
        return "\n".join(lines) + "\n"

    def lookup(self, filters_from: str, task: str) -> float:
        for row in self.rows:
            if row.filters_from == filters_from and row.task == task:
                return row.accuracy
        raise KeyError((filters_from, task))


def _source_manifests(source_run: Path) -> Tuple[Path, Path]:
    settings = RunSettings(source_run / CONFIG_FILE)
    train_manifest = settings.get("data.train")
    if not train_manifest:
        raise DataError(f"{source_run / CONFIG_FILE} names no training manifest")
    eval_manifest = settings.get("data.eval") or train_manifest
    return Path(train_manifest), Path(eval_manifest)


def _train_with_filters(config: TrainConfig, mu: Optional[np.ndarray]) -> AcousticModel:
    model = init_model(config.model, config.variant, config.seed)
    if mu is not None:
        set_filters(model, mu)
    return train(config, model).model


def transfer_experiment(
    source_run: Union[str, Path], settings: RunSettings, out_dir: Union[str, Path]
) -> TransferTable:
    """Cross-dataset filter transfer in a 2x2 layout.

    Rows name the dataset the filters were learned on, columns the task they
    are evaluated on. ``source/source`` is the source run itself;
    ``target/target`` is a from-scratch control on the target data (``data.*``
    settings); the off-diagonal cells train a fresh model with the other
    dataset's filters imported, frozen when ``train.freeze_filters`` is set.
    """
    source_run = Path(source_run)
    source_model, _ = load_checkpoint(resolve_checkpoint(source_run))
    target = TrainConfig.from_settings(settings)
    if (source_model.config.f, source_model.config.k) != (target.model.f, target.model.k):
        raise ContractError(
            f"source filters are f={source_model.config.f}, k={source_model.config.k}; "
            f"target model needs f={target.model.f}, k={target.model.k}",
            stage="transfer",
        )
    source_train, source_eval = _source_manifests(source_run)
    target_eval = target.eval_manifest or target.train_manifest
    seed = target.seed
    snrs = [float("inf")]

    logger.info("Transfer: %s -> %s (freeze=%s)", source_run, target.train_manifest, target.freeze_filters)
    rows = [TransferRow("source", "source", evaluate(source_model, source_eval, snrs, seed).average)]

    scratch = train(replace(target, freeze_filters=False)).model
    rows.append(TransferRow("target", "target", evaluate(scratch, target_eval, snrs, seed).average))

    imported = _train_with_filters(target, source_model.params["fb.mu"])
    rows.append(TransferRow("source", "target", evaluate(imported, target_eval, snrs, seed).average))

    reverse = replace(target, train_manifest=source_train, eval_manifest=source_eval)
    reversed_model = _train_with_filters(reverse, scratch.params["fb.mu"])
    rows.append(TransferRow("target", "source", evaluate(reversed_model, source_eval, snrs, seed).average))

    table = TransferTable(rows)
    out_dir = Path(out_dir)
    settings.save(out_dir / CONFIG_FILE)
    atomic_write_text(out_dir / "transfer.csv", table.to_csv())
    return table


@dataclass
class TrendRow:
    variant: str
    seed: int
    clean: float
    noisy: float


@dataclass
class TrendTable:
    """Clean and noisy evaluation accuracy for every (variant, seed) training run."""

    rows: List[TrendRow]
    snr_db: float

    def to_csv(self) -> str:
        lines = [f"variant,seed,clean,{condition_name(self.snr_db)}"]
        lines.extend(f"{row.variant},{row.seed},{row.clean!r},{row.noisy!r}" for row in self.rows)
        return "\n".join(lines) + "\n"

    def variants(self) -> List[str]:
        return list(dict.fromkeys(row.variant for row in self.rows))

    def min_clean(self, variant: str) -> float:
        return min(row.clean for row in self.rows if row.variant == variant)

    def median_noisy(self, variant: str) -> float:
        return float(np.median([row.noisy for row in self.rows if row.variant == variant]))

    def summary_csv(self) -> str:
        lines = [f"variant,min_clean,median_{condition_name(self.snr_db)}"]
        lines.extend(f"{v},{self.min_clean(v)!r},{self.median_noisy(v)!r}" for v in self.variants())
        return "\n".join(lines) + "\n"


def learning_trend(
    settings: RunSettings,
    out_dir: Union[str, Path],
    variants: Sequence[str],
    seeds: Sequence[int],
    snr_db: float = 10.0,
) -> TrendTable:
    """Train every variant under every seed and score each on the evaluation set.

    The data are loaded once and shared by all runs; only the variant and the
    seed change between them. Noisy evaluation mixes ``data.noise`` at
    ``snr_db`` onto the clean evaluation rows.
    """
    if not variants or not seeds:
        raise ArgumentError("learning trend needs at least one variant and one seed")
    base = TrainConfig.from_settings(settings)
    train_examples = load_dataset(base.train_manifest, base.model)
    eval_manifest = read_manifest(base.eval_manifest or base.train_manifest)
    noise = settings.get("data.noise")

    rows = []
    for variant in variants:
        for seed in seeds:
            config = replace(base, variant=get_variant(variant), seed=int(seed))
            model = train(config, train_examples=train_examples, eval_examples=[]).model
            result = evaluate(model, eval_manifest, [math.inf, snr_db], config.seed, noise, config.threads)
            row = TrendRow(variant, config.seed, result.conditions["clean"], result.conditions[condition_name(snr_db)])
            logger.info("trend %s seed %d: clean %.4f, noisy %.4f", variant, row.seed, row.clean, row.noisy)
            rows.append(row)

    table = TrendTable(rows, snr_db)
    out_dir = Path(out_dir)
    settings.save(out_dir / CONFIG_FILE)
    atomic_write_text(out_dir / "trend.csv", table.to_csv())
    atomic_write_text(out_dir / "trend_summary.csv", table.summary_csv())
    return table
