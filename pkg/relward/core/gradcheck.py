"""Central finite-difference check of the analytic gradients, per parameter tensor."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from ..utils.seeding import stream
from .audio import RawFrameBlock
from .model import AcousticModel, GradientSet, backward, batch_loss, forward
from .normalization import NormMode

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4
STEP_SCALE = 1e-6


@dataclass
class GroupResult:
    name: str
    max_error: float
    entries: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


@dataclass
class GradCheckReport:
    groups: List[GroupResult]
    tol: float

    @property
    def passed(self) -> bool:
        return all(group.passed for group in self.groups)

    @property
    def failing(self) -> List[str]:
        return [group.name for group in self.groups if not group.passed]

    def to_csv(self) -> str:
        lines = ["group,max_rel_error,entries,passed"]
        for group in self.groups:
            lines.append(f"{group.name},{group.max_error:.6e},{group.entries},{str(group.passed).lower()}")
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        width = max((len(group.name) for group in self.groups), default=5)
        rows = [
            f"{group.name:<{width}}  {group.max_error:.3e}  {'ok' if group.passed else 'FAIL'}" for group in self.groups
        ]
        rows.append(f"{'result':<{width}}  {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(rows)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def grad_check(
    model: AcousticModel,
    blocks: Union[RawFrameBlock, Sequence[RawFrameBlock]],
    labels: Union[int, Sequence[int]],
    tol: float = DEFAULT_TOL,
    mode: Optional[NormMode] = None,
    max_entries: Optional[int] = 24,
    seed: int = 0,
    analytic: Optional[GradientSet] = None,
) -> GradCheckReport:
    """Compare analytic gradients of the mean batch loss against central differences.

    Works on a copy of ``model`` with running statistics frozen, so the caller's
    model is never touched. Single blocks default to eval mode (batch norm needs
    two samples to train); batches default to train mode. ``max_entries`` caps
    how many entries of each tensor are perturbed (``None`` perturbs all of them).
    ``analytic`` replaces the computed gradients, for testing the harness itself.
    """
    batch = [blocks] if isinstance(blocks, RawFrameBlock) else list(blocks)
    label_list = [labels] if isinstance(labels, (int, np.integer)) else list(labels)
    mode = NormMode(mode) if mode is not None else (NormMode.EVAL if len(batch) == 1 else NormMode.TRAIN)
    trial = model.copy()

    def loss() -> float:
        logits, _ = forward(trial, batch, mode, track_running_stats=False)
        return batch_loss(logits, label_list)[0]

    if analytic is None:
        _, cache = forward(trial, batch, mode, track_running_stats=False)
        _, analytic = backward(trial, cache, label_list)

    groups = []
    for index, name in enumerate(trial.trainable_names()):
        tensor = trial.params[name]
        flat = tensor.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(stream(seed, "gradcheck", index).choice(flat.size, size=max_entries, replace=False))
        expected = analytic[name].reshape(-1)
        worst = 0.0
        for i in picks:
            original = flat[i]
            h = STEP_SCALE * max(1.0, abs(original))
            flat[i] = original + h
            up = loss()
            flat[i] = original - h
            down = loss()
            flat[i] = original
            error = relative_error(float(expected[i]), (up - down) / (2.0 * h))
            worst = error if math.isnan(error) else max(worst, error)
            if math.isnan(worst):
                break
        groups.append(GroupResult(name, worst, len(picks), tol))
        logger.debug("grad-check %s: max rel error %.3e over %d entries", name, worst, len(picks))

    report = GradCheckReport(groups, tol)
    logger.info("Gradient check %s (%d groups)", "passed" if report.passed else "FAILED", len(groups))
    return report
