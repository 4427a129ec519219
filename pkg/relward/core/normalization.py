"""Instance norm with center-frame pruning, and batch norm with frozen test statistics."""

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ArgumentError, DegenerateBatchError
from .filterbank import Spectrogram, SpectrogramStage
from .modulation import FeatureMaps

INSTANCE_NORM_C = 1e-4
BATCH_NORM_C = 1e-4


class NormMode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class InstanceNormCache:
    xhat: np.ndarray
    scale: np.ndarray  # sqrt(var + c), one per row


def instance_norm(y: Spectrogram, c: float = INSTANCE_NORM_C) -> Spectrogram:
    """Standardize each filter row over time with population variance."""
    return instance_norm_cached(y, c)[0]


def instance_norm_cached(y: Spectrogram, c: float = INSTANCE_NORM_C) -> Tuple[Spectrogram, InstanceNormCache]:
    values = y.values
    if values.shape[1] < 2:
        raise ArgumentError(f"instance norm needs at least 2 frames, got {values.shape[1]}")
    centered = values - values.mean(axis=1, keepdims=True)
    scale = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + c)
    xhat = centered / scale
    return Spectrogram(xhat, SpectrogramStage.Z_NORMALIZED), InstanceNormCache(xhat, scale)


def instance_norm_backward(dz: np.ndarray, cache: InstanceNormCache) -> np.ndarray:
    xhat = cache.xhat
    return (dz - dz.mean(axis=1, keepdims=True) - xhat * np.mean(dz * xhat, axis=1, keepdims=True)) / cache.scale


def center_slice(t: int, keep: int) -> slice:
    if keep <= 0 or keep % 2 == 0 or keep > t:
        raise ArgumentError(f"keep must be odd and at most {t}, got {keep}")
    start = (t - keep) // 2
    return slice(start, start + keep)


def prune_center(z: Spectrogram, keep: int = 21) -> Spectrogram:
    """Keep the ``keep`` frames around the center frame."""
    return Spectrogram(z.values[:, center_slice(z.t, keep)], z.stage)


def prune_center_backward(dz: np.ndarray, t: int) -> np.ndarray:
    out = np.zeros((dz.shape[0], t))
    out[:, center_slice(t, dz.shape[1])] = dz
    return out


@dataclass
class BatchNormState:
    """Per-channel running statistics and affine parameters."""

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = 0.1
    c_bn: float = BATCH_NORM_C
    mode: NormMode = NormMode.TRAIN

    def __post_init__(self):
        self.mode = NormMode(self.mode)
        if not 0.0 < self.momentum < 1.0:
            raise ArgumentError(f"momentum must be in (0, 1), got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ArgumentError("running variance must be non-negative")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, c_bn: float = BATCH_NORM_C) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels), momentum, c_bn)


@dataclass
class BatchNormCache:
    mode: NormMode
    xhat: np.ndarray
    scale: np.ndarray  # shape (1, K, 1, 1)
    gamma: np.ndarray = field(repr=False)


def _stack(q: Union[np.ndarray, Sequence[FeatureMaps]]) -> np.ndarray:
    if isinstance(q, np.ndarray):
        batch = q
    else:
        batch = np.stack([maps.maps for maps in q])
    if batch.ndim != 4:
        raise ArgumentError(f"batch norm expects (B, K, F, T), got shape {batch.shape}")
    return batch


def batch_norm(
    q: Union[np.ndarray, Sequence[FeatureMaps]], state: BatchNormState, mode: Optional[NormMode] = None
) -> np.ndarray:
    """Normalize per channel; train mode also updates the running statistics."""
    return batch_norm_cached(q, state, mode)[0]


def batch_norm_cached(
    q: Union[np.ndarray, Sequence[FeatureMaps]],
    state: BatchNormState,
    mode: Optional[NormMode] = None,
    track_running_stats: bool = True,
) -> Tuple[np.ndarray, BatchNormCache]:
    batch = _stack(q)
    mode = NormMode(mode or state.mode)
    channels = batch.shape[1]
    if state.gamma.shape != (channels,):
        raise ArgumentError(f"batch norm state has {state.gamma.shape[0]} channels, input has {channels}")
    if mode is NormMode.TRAIN:
        if batch.shape[0] < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs a batch of at least 2, got {batch.shape[0]}")
        mean = batch.mean(axis=(0, 2, 3))
        var = batch.var(axis=(0, 2, 3))
        if track_running_stats:
            state.running_mean *= 1.0 - state.momentum
            state.running_mean += state.momentum * mean
            state.running_var *= 1.0 - state.momentum
            state.running_var += state.momentum * var
    else:
        mean, var = state.running_mean, state.running_var
    scale = np.sqrt(var + state.c_bn)[None, :, None, None]
    xhat = (batch - mean[None, :, None, None]) / scale
    out = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return out, BatchNormCache(mode, xhat, scale, state.gamma.copy())


def batch_norm_backward(dout: np.ndarray, cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d input, d gamma, d beta)."""
    dgamma = np.sum(dout * cache.xhat, axis=(0, 2, 3))
    dbeta = np.sum(dout, axis=(0, 2, 3))
    dxhat = dout * cache.gamma[None, :, None, None]
    if cache.mode is NormMode.EVAL:
        return dxhat / cache.scale, dgamma, dbeta
    xhat = cache.xhat
    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx = np.mean(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
    return (dxhat - mean_d - xhat * mean_dx) / cache.scale, dgamma, dbeta
