"""Spectro-temporal modulation filtering: 2-D valid correlation, rectifier, 3x1 max-pool."""

import enum
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError

POOL = 3


class MapStage(str, enum.Enum):
    P_CONV = "p_conv"
    P_POOLED = "p_pooled"
    Q_WEIGHTED = "q_weighted"


@dataclass
class ModulationKernels:
    kernels: np.ndarray  # (K, kf, kt)
    bias: np.ndarray  # (K,)

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ArgumentError(f"modulation kernels must be (K, kf, kt), got {self.kernels.shape}")
        K, kf, kt = self.kernels.shape
        if kf % 2 == 0 or kt % 2 == 0:
            raise ArgumentError(f"modulation kernel size must be odd, got {kf}x{kt}")
        if self.bias.shape != (K,):
            raise ArgumentError(f"expected {K} biases, got {self.bias.shape}")

    @property
    def K(self) -> int:
        return self.kernels.shape[0]


@dataclass
class FeatureMaps:
    maps: np.ndarray  # (K, f', t')
    stage: MapStage = MapStage.P_CONV

    @property
    def K(self) -> int:
        return self.maps.shape[0]


@dataclass
class ModulationCache:
    windows: np.ndarray  # (F, T, kf, kt) view into z
    pre: np.ndarray  # (K, F, T) pre-activation


@dataclass
class PoolCache:
    argmax: np.ndarray  # (K, F', 1, T) index within each window
    in_shape: Tuple[int, int, int]


def init_modulation_kernels(K: int, kf: int, kt: int, rng: np.random.Generator) -> ModulationKernels:
    fan_in, fan_out = kf * kt, K * kf * kt
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ModulationKernels(rng.uniform(-limit, limit, size=(K, kf, kt)), np.zeros(K))


def modulation_forward(z, kernels: ModulationKernels) -> FeatureMaps:
    """Correlate the normalized spectrogram with every kernel, add bias, rectify."""
    return modulation_forward_cached(z, kernels)[0]


def modulation_forward_cached(z, kernels: ModulationKernels) -> Tuple[FeatureMaps, ModulationCache]:
    values = getattr(z, "values", z)
    _, kf, kt = kernels.kernels.shape
    if values.shape[0] < kf or values.shape[1] < kt:
        raise ArgumentError(f"kernel {kf}x{kt} larger than input {values.shape[0]}x{values.shape[1]}")
    windows = sliding_window_view(values, (kf, kt))
    pre = np.einsum("abuv,cuv->cab", windows, kernels.kernels) + kernels.bias[:, None, None]
    return FeatureMaps(np.maximum(pre, 0.0), MapStage.P_CONV), ModulationCache(windows, pre)


def modulation_backward(
    dp: np.ndarray, cache: ModulationCache, kernels: ModulationKernels
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d z, d kernels, d bias)."""
    dpre = dp * (cache.pre > 0)
    dkernels = np.einsum("cab,abuv->cuv", dpre, cache.windows)
    dbias = dpre.sum(axis=(1, 2))
    F, T, kf, kt = cache.windows.shape
    dwin = np.einsum("cab,cuv->abuv", dpre, kernels.kernels)
    dz = np.zeros((F + kf - 1, T + kt - 1))
    for u in range(kf):
        for v in range(kt):
            dz[u : u + F, v : v + T] += dwin[:, :, u, v]
    return dz, dkernels, dbias


def max_pool_3x1(p: FeatureMaps) -> FeatureMaps:
    """Non-overlapping max over 3 frequency rows; leftover rows are dropped."""
    return max_pool_3x1_cached(p)[0]


def max_pool_3x1_cached(p: FeatureMaps) -> Tuple[FeatureMaps, PoolCache]:
    K, F, T = p.maps.shape
    if F < POOL:
        raise ArgumentError(f"max-pool needs at least {POOL} frequency rows, got {F}")
    rows = F // POOL
    grouped = p.maps[:, : rows * POOL, :].reshape(K, rows, POOL, T)
    argmax = np.argmax(grouped, axis=2)[:, :, None, :]
    pooled = np.take_along_axis(grouped, argmax, axis=2)[:, :, 0, :]
    return FeatureMaps(pooled, MapStage.P_POOLED), PoolCache(argmax, (K, F, T))


def max_pool_3x1_backward(dpooled: np.ndarray, cache: PoolCache) -> np.ndarray:
    """Route each pooled gradient to the recorded argmax row."""
    K, F, T = cache.in_shape
    rows = F // POOL
    grouped = np.zeros((K, rows, POOL, T))
    np.put_along_axis(grouped, cache.argmax, dpooled[:, :, None, :], axis=2)
    out = np.zeros((K, F, T))
    out[:, : rows * POOL, :] = grouped.reshape(K, rows * POOL, T)
    return out
