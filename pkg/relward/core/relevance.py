"""Relevance sub-networks: pooled features -> two FC layers -> softmax weights."""

import enum
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy import special

from .errors import ArgumentError
from .filterbank import Spectrogram, SpectrogramStage
from .modulation import FeatureMaps, MapStage


class Pooling(str, enum.Enum):
    TIME_AVERAGE = "time_average"
    GLOBAL_AVERAGE = "global_average"


@dataclass
class RelevanceNet:
    """Two-layer feed-forward map producing ``d_out`` relevance logits."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    pooling: Pooling = Pooling.TIME_AVERAGE
    activation: str = "relu"

    def __post_init__(self):
        self.pooling = Pooling(self.pooling)
        hidden, d_in = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape[1] != hidden or self.b2.shape != (self.W2.shape[0],):
            raise ArgumentError(
                f"inconsistent relevance net shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        if self.activation != "relu":
            raise ArgumentError(f"unsupported activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W2.shape[0]


@dataclass
class RelevanceWeights:
    w: np.ndarray


@dataclass
class RelevanceCache:
    pooled: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    weights: np.ndarray
    shape: Tuple[int, ...]


def init_relevance_net(
    d_in: int, hidden: int, d_out: int, pooling: Pooling, rng: np.random.Generator, zero_output: bool = True
) -> RelevanceNet:
    """Glorot-uniform hidden layer; a zero output layer starts from uniform relevance."""
    limit = np.sqrt(6.0 / (d_in + hidden))
    W1 = rng.uniform(-limit, limit, size=(hidden, d_in))
    if zero_output:
        W2 = np.zeros((d_out, hidden))
    else:
        limit2 = np.sqrt(6.0 / (hidden + d_out))
        W2 = rng.uniform(-limit2, limit2, size=(d_out, hidden))
    return RelevanceNet(W1, np.zeros(hidden), W2, np.zeros(d_out), pooling)


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-shifted softmax of a finite, non-empty vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ArgumentError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ArgumentError("softmax input contains non-finite values")
    return special.softmax(v)


def softmax_backward(dw: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w * (dw - np.dot(w, dw))


def _relevance_forward(pooled: np.ndarray, net: RelevanceNet, shape) -> RelevanceCache:
    if pooled.shape != (net.d_in,):
        raise ArgumentError(f"relevance net expects {net.d_in} inputs, got {pooled.shape[0]}")
    pre = net.W1 @ pooled + net.b1
    hidden = np.maximum(pre, 0.0)
    weights = softmax(net.W2 @ hidden + net.b2)
    return RelevanceCache(pooled, pre, hidden, weights, shape)


def relevance_backward(
    dw: np.ndarray, cache: RelevanceCache, net: RelevanceNet
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Back-propagate a weight gradient to the un-pooled input and the net parameters."""
    dlogits = softmax_backward(dw, cache.weights)
    grads = {"W2": np.outer(dlogits, cache.hidden), "b2": dlogits}
    dpre = (net.W2.T @ dlogits) * (cache.pre > 0)
    grads["W1"] = np.outer(dpre, cache.pooled)
    grads["b1"] = dpre
    dpooled = net.W1.T @ dpre
    # mean pooling spreads the gradient evenly over the pooled axes
    spread = int(np.prod(cache.shape[1:]))
    dinput = np.broadcast_to((dpooled / spread).reshape((-1,) + (1,) * (len(cache.shape) - 1)), cache.shape)
    return np.array(dinput), grads


def acoustic_relevance(x: Spectrogram, net: RelevanceNet) -> RelevanceWeights:
    """Per-filter weights from the time-averaged spectrogram."""
    return RelevanceWeights(acoustic_relevance_cached(x, net).weights)


def acoustic_relevance_cached(x: Spectrogram, net: RelevanceNet) -> RelevanceCache:
    if net.pooling is not Pooling.TIME_AVERAGE:
        raise ArgumentError("acoustic relevance needs a time_average net")
    if net.d_in != x.f or net.d_out != x.f:
        raise ArgumentError(f"net maps {net.d_in}->{net.d_out} but spectrogram has {x.f} filters")
    return _relevance_forward(x.values.mean(axis=1), net, x.values.shape)


def modulation_relevance(p: FeatureMaps, net: RelevanceNet) -> RelevanceWeights:
    """Per-map weights from the globally averaged modulation maps."""
    return RelevanceWeights(modulation_relevance_cached(p, net).weights)


def modulation_relevance_cached(p: FeatureMaps, net: RelevanceNet) -> RelevanceCache:
    if net.pooling is not Pooling.GLOBAL_AVERAGE:
        raise ArgumentError("modulation relevance needs a global_average net")
    if net.d_in != p.K or net.d_out != p.K:
        raise ArgumentError(f"net maps {net.d_in}->{net.d_out} but there are {p.K} modulation maps")
    return _relevance_forward(p.maps.mean(axis=(1, 2)), net, p.maps.shape)


def apply_acoustic_weights(x: Spectrogram, w_a: RelevanceWeights) -> Spectrogram:
    """Scale each filter row by its weight (no mixing across filters)."""
    if w_a.w.shape != (x.f,):
        raise ArgumentError(f"expected {x.f} acoustic weights, got {w_a.w.shape}")
    return Spectrogram(w_a.w[:, None] * x.values, SpectrogramStage.Y_WEIGHTED)


def apply_modulation_weights(p: FeatureMaps, w_m: RelevanceWeights) -> FeatureMaps:
    """Scale each modulation map by its weight."""
    if w_m.w.shape != (p.K,):
        raise ArgumentError(f"expected {p.K} modulation weights, got {w_m.w.shape}")
    return FeatureMaps(w_m.w[:, None, None] * p.maps, MapStage.Q_WEIGHTED)
