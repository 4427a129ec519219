"""Classifier head: one same-padded conv block, two hidden FC layers, C logits."""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError

HEAD_KEYS = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def head_flat_size(maps: int, rows: int, cols: int) -> int:
    if rows < 2 or cols < 2:
        raise ArgumentError(f"head 2x2 pooling needs at least a 2x2 map, got {rows}x{cols}")
    return maps * (rows // 2) * (cols // 2)


def init_head(
    channels: int, rows: int, cols: int, maps: int, kernel: int, fc1: int, fc2: int, classes: int, rng
) -> Dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    if kernel % 2 == 0:
        raise ArgumentError(f"head kernel must be odd, got {kernel}")
    flat = head_flat_size(maps, rows, cols)
    area = kernel * kernel
    return {
        "conv_w": glorot(rng, (maps, channels, kernel, kernel), channels * area, maps * area),
        "conv_b": np.zeros(maps),
        "fc1_w": glorot(rng, (fc1, flat), flat, fc1),
        "fc1_b": np.zeros(fc1),
        "fc2_w": glorot(rng, (fc2, fc1), fc1, fc2),
        "fc2_b": np.zeros(fc2),
        "out_w": glorot(rng, (classes, fc2), fc2, classes),
        "out_b": np.zeros(classes),
    }


@dataclass
class HeadCache:
    windows: np.ndarray
    conv_pre: np.ndarray
    pool_argmax: np.ndarray
    conv_shape: Tuple[int, int, int]
    flat: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    h2_pre: np.ndarray
    h2: np.ndarray


def head_forward(r: np.ndarray, head: Dict[str, np.ndarray]) -> Tuple[np.ndarray, HeadCache]:
    """Logits for one normalized (K, F, T) input."""
    kernel = head["conv_w"].shape[-1]
    pad = kernel // 2
    padded = np.pad(r, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))  # (C, F, T, kh, kw)
    conv_pre = np.einsum("cabuv,ocuv->oab", windows, head["conv_w"]) + head["conv_b"][:, None, None]
    conv = np.maximum(conv_pre, 0.0)

    maps, rows, cols = conv.shape
    blocks = (
        conv[:, : rows // 2 * 2, : cols // 2 * 2].reshape(maps, rows // 2, 2, cols // 2, 2).transpose(0, 1, 3, 2, 4)
    )
    blocks = blocks.reshape(maps, rows // 2, cols // 2, 4)
    pool_argmax = np.argmax(blocks, axis=-1)
    flat = np.take_along_axis(blocks, pool_argmax[..., None], axis=-1)[..., 0].ravel()

    h1_pre = head["fc1_w"] @ flat + head["fc1_b"]
    h1 = np.maximum(h1_pre, 0.0)
    h2_pre = head["fc2_w"] @ h1 + head["fc2_b"]
    h2 = np.maximum(h2_pre, 0.0)
    logits = head["out_w"] @ h2 + head["out_b"]
    return logits, HeadCache(windows, conv_pre, pool_argmax, conv.shape, flat, h1_pre, h1, h2_pre, h2)


def head_backward(
    dlogits: np.ndarray, cache: HeadCache, head: Dict[str, np.ndarray]
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Returns (d input, parameter gradients)."""
    grads = {"out_w": np.outer(dlogits, cache.h2), "out_b": dlogits.copy()}
    dh2 = (head["out_w"].T @ dlogits) * (cache.h2_pre > 0)
    grads["fc2_w"] = np.outer(dh2, cache.h1)
    grads["fc2_b"] = dh2
    dh1 = (head["fc2_w"].T @ dh2) * (cache.h1_pre > 0)
    grads["fc1_w"] = np.outer(dh1, cache.flat)
    grads["fc1_b"] = dh1
    dflat = head["fc1_w"].T @ dh1

    maps, rows, cols = cache.conv_shape
    dblocks = np.zeros((maps, rows // 2, cols // 2, 4))
    np.put_along_axis(dblocks, cache.pool_argmax[..., None], dflat.reshape(maps, rows // 2, cols // 2, 1), axis=-1)
    dconv = np.zeros(cache.conv_shape)
    rows2, cols2 = rows // 2 * 2, cols // 2 * 2
    dconv[:, :rows2, :cols2] = (
        dblocks.reshape(maps, rows // 2, cols // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(maps, rows2, cols2)
    )
    dpre = dconv * (cache.conv_pre > 0)
    grads["conv_w"] = np.einsum("oab,cabuv->ocuv", dpre, cache.windows)
    grads["conv_b"] = dpre.sum(axis=(1, 2))

    kernel = head["conv_w"].shape[-1]
    pad = kernel // 2
    dwin = np.einsum("oab,ocuv->cabuv", dpre, head["conv_w"])
    channels = dwin.shape[0]
    dpadded = np.zeros((channels, rows + 2 * pad, cols + 2 * pad))
    for u in range(kernel):
        for v in range(kernel):
            dpadded[:, u : u + rows, v : v + cols] += dwin[:, :, :, u, v]
    return dpadded[:, pad : pad + rows, pad : pad + cols], grads
