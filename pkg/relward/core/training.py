"""Deterministic training and evaluation loops."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.files import atomic_write_text
from ..utils.seeding import stream
from .audio import (
    EVAL_NOISE_STREAM,
    ManifestEntry,
    RawFrameBlock,
    center_block,
    make_noise,
    mix_noise,
    parse_snr_list,
    read_manifest,
    read_wav,
)
from .errors import ContractError, DataError, DegenerateBatchError
from .model import AcousticModel, ModelConfig, Variant, backward, batch_loss, forward, get_variant, init_model, predict
from .normalization import NormMode
from .optim import AdamState, adam_step
from .settings import RunSettings

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Everything one training run depends on."""

    model: ModelConfig
    variant: Variant
    train_manifest: Path
    eval_manifest: Optional[Path] = None
    batch: int = 16
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    freeze_filters: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.batch < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs batches of at least 2, got --batch {self.batch}")
        if self.epochs < 1:
            raise DataError(f"epochs must be at least 1, got {self.epochs}")

    @classmethod
    def from_settings(cls, settings: RunSettings) -> "TrainConfig":
        train = settings.get("data.train")
        if not train:
            raise DataError("no training manifest given (--data)")
        eval_manifest = settings.get("data.eval")
        return cls(
            model=ModelConfig.from_dict(settings.section("model")),
            variant=get_variant(settings.get("train.variant")),
            train_manifest=Path(train),
            eval_manifest=Path(eval_manifest) if eval_manifest else None,
            batch=int(settings.get("train.batch")),
            epochs=int(settings.get("train.epochs")),
            lr=float(settings.get("train.lr")),
            seed=int(settings.get("run.seed")),
            freeze_filters=bool(settings.get("train.freeze_filters")),
            threads=settings.get_threads(),
        )


@dataclass
class Example:
    block: RawFrameBlock
    class_id: int
    snr_db: float


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: AcousticModel
    metrics: List[EpochMetrics] = field(default_factory=list)
    step: int = 0


def load_examples(entries: Sequence[ManifestEntry], config: ModelConfig) -> List[Example]:
    """Read every clip and cut the centered frame block."""
    if not entries:
        raise DataError("dataset is empty")
    examples = []
    for entry in entries:
        if not 0 <= entry.class_id < config.classes:
            raise DataError(f"{entry.path}: class {entry.class_id} outside 0..{config.classes - 1}")
        try:
            buf = read_wav(entry.path)
        except OSError as e:
            raise DataError(f"cannot read {entry.path}: {e}") from e
        block = center_block(buf, config.frame_len, config.hop, config.frames)
        examples.append(Example(block, entry.class_id, entry.snr_db))
    return examples


def load_dataset(manifest: Union[str, Path], config: ModelConfig) -> List[Example]:
    examples = load_examples(read_manifest(manifest), config)
    logger.info("Loaded %d examples from %s", len(examples), manifest)
    return examples


def make_batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    """Consecutive chunks of ``order``; a trailing single sample joins the previous chunk."""
    batches = [order[start : start + size] for start in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def accuracy(logits: np.ndarray, labels: Sequence[int]) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def score(model: AcousticModel, examples: Sequence[Example], workers: int = 1, batch: int = 32) -> Tuple[float, float]:
    """Eval-mode mean loss and accuracy."""
    logits = predict(model, [ex.block for ex in examples], batch, workers)
    labels = [ex.class_id for ex in examples]
    return batch_loss(logits, labels)[0], accuracy(logits, labels)


def train(
    config: TrainConfig,
    model: Optional[AcousticModel] = None,
    train_examples: Optional[List[Example]] = None,
    eval_examples: Optional[List[Example]] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of Adam on shuffled batches.

    ``model`` may carry imported filters; otherwise a fresh model is drawn from
    the seed. Per epoch one ``train`` row (mean batch loss, batch accuracy) and,
    when eval data exists, one ``eval`` row are recorded.
    """
    if train_examples is None:
        train_examples = load_dataset(config.train_manifest, config.model)
    if eval_examples is None and config.eval_manifest is not None:
        eval_examples = load_dataset(config.eval_manifest, config.model)
    if len(train_examples) < 2:
        raise DegenerateBatchError(f"need at least 2 training examples, got {len(train_examples)}")

    if model is None:
        model = init_model(config.model, config.variant, config.seed)
    trainable = model.trainable_names(config.freeze_filters)
    frozen = [name for name in model.params if name not in trainable]
    state = AdamState(lr=config.lr)
    result = TrainResult(model)

    logger.info(
        "Training %s on %d examples: %d epochs, batch %d, lr %g, %d workers",
        model.variant.name,
        len(train_examples),
        config.epochs,
        config.batch,
        config.lr,
        config.threads,
    )
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "shuffle", epoch).permutation(len(train_examples))
        loss_sum, correct = 0.0, 0
        for indices in make_batches(order, config.batch):
            batch = [train_examples[i] for i in indices]
            labels = [ex.class_id for ex in batch]
            logits, cache = forward(model, [ex.block for ex in batch], NormMode.TRAIN, config.threads)
            loss, grads = backward(model, cache, labels, config.threads)
            if not math.isfinite(loss) or not grads.is_finite():
                raise ContractError(f"non-finite loss or gradient in epoch {epoch}", stage="train")
            adam_step(model.params, grads.tensors, state, frozen)
            if "fb.mu" in trainable:
                model.clip_filters()
            loss_sum += loss * len(batch)
            correct += int(np.sum(np.argmax(logits, axis=1) == np.asarray(labels)))
        train_row = EpochMetrics(epoch, "train", loss_sum / len(train_examples), correct / len(train_examples))
        result.metrics.append(train_row)
        message = f"epoch {epoch}: train loss {train_row.loss:.4f} acc {train_row.accuracy:.3f}"
        if eval_examples:
            eval_loss, eval_acc = score(model, eval_examples, config.threads)
            result.metrics.append(EpochMetrics(epoch, "eval", eval_loss, eval_acc))
            message += f", eval loss {eval_loss:.4f} acc {eval_acc:.3f}"
        logger.info(message)
    result.step = state.step
    return result


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    lines = ["epoch,split,loss,accuracy"]
    lines.extend(f"{m.epoch},{m.split},{m.loss!r},{m.accuracy!r}" for m in metrics)
    return "\n".join(lines) + "\n"


def write_metrics(path: Union[str, Path], metrics: Sequence[EpochMetrics]) -> Path:
    return atomic_write_text(path, metrics_csv(metrics))


def condition_name(snr_db: float) -> str:
    return "clean" if math.isinf(snr_db) else f"{snr_db:g}dB"


@dataclass
class EvalResult:
    conditions: Dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.conditions.values())))

    def to_csv(self) -> str:
        lines = ["condition,accuracy"]
        lines.extend(f"{name},{acc!r}" for name, acc in self.conditions.items())
        lines.append(f"avg,{self.average!r}")
        return "\n".join(lines) + "\n"


def evaluate(
    model: AcousticModel,
    manifest: Union[str, Path, Sequence[ManifestEntry]],
    snrs: Union[str, Sequence[float]] = (math.inf,),
    seed: int = 0,
    noise_kind: str = "white",
    workers: int = 1,
) -> EvalResult:
    """Accuracy on the clean manifest rows, re-mixed with seeded noise at each SNR."""
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    snr_list = parse_snr_list(snrs) if isinstance(snrs, str) else [float(s) for s in snrs]
    clean = [entry for entry in entries if entry.is_clean]
    if not clean:
        raise DataError("evaluation manifest has no clean rows")
    buffers = [read_wav(entry.path) for entry in clean]
    labels = [entry.class_id for entry in clean]
    cfg = model.config

    conditions: Dict[str, float] = {}
    for snr in snr_list:
        blocks = []
        for index, buf in enumerate(buffers):
            if not math.isinf(snr):
                buf = mix_noise(buf, make_noise(len(buf), seed, noise_kind, index, EVAL_NOISE_STREAM), snr)
            blocks.append(center_block(buf, cfg.frame_len, cfg.hop, cfg.frames))
        logits = predict(model, blocks, workers=workers)
        name = condition_name(snr)
        conditions[name] = accuracy(logits, labels)
        logger.info("eval %s: accuracy %.4f on %d clips", name, conditions[name], len(blocks))
    return EvalResult(conditions)
