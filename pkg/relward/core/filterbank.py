"""Parametric acoustic filterbank on raw frames.

Kernels are synthesized from per-filter center frequencies ``mu`` (cycles per
sample) and correlated with every frame; the squared outputs are averaged within
the frame and log-compressed into an f x t spectrogram.
"""

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from ..utils.files import atomic_write_text
from .audio import RawFrameBlock
from .errors import ArgumentError, ContractError, FormatError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-8
MU_MARGIN = 1e-4


class KernelFamily(str, enum.Enum):
    COSINE_GAUSSIAN = "cosine_gaussian"
    SINC = "sinc"
    FIXED_MEL = "fixed_mel"

    @property
    def learnable(self) -> bool:
        return self is not KernelFamily.FIXED_MEL


class SpectrogramStage(str, enum.Enum):
    X_RAW = "x_raw"
    Y_WEIGHTED = "y_weighted"
    Z_NORMALIZED = "z_normalized"


@dataclass
class FilterbankParams:
    """Center frequencies of the acoustic filters plus the kernel family.

    ``bandwidth`` is only used by the sinc family: the fixed band width of each
    filter in cycles per sample.
    """

    mu: np.ndarray
    family: KernelFamily = KernelFamily.COSINE_GAUSSIAN
    k: int = 129
    bandwidth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.family = KernelFamily(self.family)
        if self.mu.ndim != 1 or len(self.mu) == 0:
            raise ArgumentError(f"mu must be a non-empty vector, got shape {self.mu.shape}")
        if self.k <= 0 or self.k % 2 == 0:
            raise ArgumentError(f"kernel length must be odd and positive, got {self.k}")
        if not np.all((self.mu > 0.0) & (self.mu < 0.5)):
            raise ArgumentError("every mu must lie in (0, 0.5)")
        if self.family is KernelFamily.SINC:
            if self.bandwidth is None or self.bandwidth.shape != self.mu.shape:
                raise ArgumentError("sinc family needs one bandwidth per filter")

    @property
    def f(self) -> int:
        return len(self.mu)


@dataclass
class KernelBank:
    kernels: np.ndarray

    @property
    def f(self) -> int:
        return self.kernels.shape[0]

    @property
    def k(self) -> int:
        return self.kernels.shape[1]


@dataclass
class Spectrogram:
    """f x t log-energy map at one stage of the acoustic path."""

    values: np.ndarray
    stage: SpectrogramStage = SpectrogramStage.X_RAW

    @property
    def f(self) -> int:
        return self.values.shape[0]

    @property
    def t(self) -> int:
        return self.values.shape[1]


@dataclass
class AcousticCache:
    windows: np.ndarray  # (t, L, k) contiguous copy of the frame windows
    responses: np.ndarray  # (t, L, f) correlation outputs
    energy: np.ndarray  # (t, f) mean squared response


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers_hz(f: int, fmin: float, fmax: float) -> np.ndarray:
    """f frequencies equally spaced on the mel scale, endpoints included."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), f))


def hz_to_mu(hz, fs: float = 16000.0):
    """Normalize Hz to cycles per sample; Nyquist maps to 0.5."""
    return np.asarray(hz, dtype=np.float64) / fs


def init_mel(
    f: int,
    fmin: float = 60.0,
    fmax: float = 7800.0,
    fs: float = 16000.0,
    family: Union[KernelFamily, str] = KernelFamily.COSINE_GAUSSIAN,
    k: int = 129,
) -> FilterbankParams:
    """Mel-spaced initial center frequencies, normalized by the sample rate."""
    if f <= 0:
        raise ArgumentError(f"filter count must be positive, got {f}")
    if not 0 < fmin < fmax <= fs / 2:
        raise ArgumentError(f"need 0 < fmin < fmax <= fs/2, got fmin={fmin}, fmax={fmax}, fs={fs}")
    hz = mel_centers_hz(f, fmin, fmax) if f > 1 else np.array([float(fmin)])
    mu = hz_to_mu(hz, fs)
    # Nyquist is excluded from (0, 0.5); pull a top filter placed exactly there just below it.
    mu = np.minimum(mu, 0.5 - MU_MARGIN)
    family = KernelFamily(family)
    bandwidth = sinc_bandwidth(mu) if family is KernelFamily.SINC else None
    return FilterbankParams(mu=mu, family=family, k=k, bandwidth=bandwidth)


def sinc_bandwidth(mu: np.ndarray) -> np.ndarray:
    """Band width per filter: spacing to the adjacent center, capped so the lower edge stays above mu/2."""
    if len(mu) == 1:
        spacing = np.array([mu[0]])
    else:
        spacing = np.empty_like(mu)
        spacing[:-1] = np.diff(mu)
        spacing[-1] = mu[-1] - mu[-2]
    return np.minimum(spacing, mu)


def _taps(k: int) -> np.ndarray:
    half = (k - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def _sinc_window(k: int) -> np.ndarray:
    return signal.get_window("hamming", k, fftbins=False)


def synthesize_kernels(params: FilterbankParams) -> KernelBank:
    """Time-domain taps for every filter, indexed symmetrically about n = 0."""
    n = _taps(params.k)[None, :]
    mu = params.mu[:, None]
    if params.family is KernelFamily.SINC:
        f1 = mu - params.bandwidth[:, None] / 2
        f2 = mu + params.bandwidth[:, None] / 2
        band = 2 * f2 * np.sinc(2 * f2 * n) - 2 * f1 * np.sinc(2 * f1 * n)
        return KernelBank(band * _sinc_window(params.k)[None, :])
    # fixed_mel shares the cosine-modulated Gaussian shape; it just never moves.
    return KernelBank(np.cos(2 * np.pi * mu * n) * np.exp(-(n**2) * mu**2 / 2))


def kernel_mu_jacobian(params: FilterbankParams) -> np.ndarray:
    """d g_i(n) / d mu_i for the learnable families, shape f x k."""
    if not params.family.learnable:
        raise ContractError(f"family {params.family.value} has no learnable mu", stage="acoustic_filterbank")
    n = _taps(params.k)[None, :]
    mu = params.mu[:, None]
    if params.family is KernelFamily.SINC:
        f1 = mu - params.bandwidth[:, None] / 2
        f2 = mu + params.bandwidth[:, None] / 2
        return (2 * np.cos(2 * np.pi * f2 * n) - 2 * np.cos(2 * np.pi * f1 * n)) * _sinc_window(params.k)[None, :]
    phase = 2 * np.pi * mu * n
    return (-2 * np.pi * n * np.sin(phase) - n**2 * mu * np.cos(phase)) * np.exp(-(n**2) * mu**2 / 2)


def acoustic_forward(block: Union[RawFrameBlock, np.ndarray], bank: KernelBank) -> Spectrogram:
    """Log mean-square response of each filter within each frame (stage x_raw)."""
    return acoustic_forward_cached(block, bank)[0]


def acoustic_forward_cached(
    block: Union[RawFrameBlock, np.ndarray], bank: KernelBank
) -> Tuple[Spectrogram, AcousticCache]:
    frames = block.frames if isinstance(block, RawFrameBlock) else np.asarray(block, dtype=np.float64)
    s = frames.shape[1]
    if s < bank.k:
        raise ArgumentError(f"frame length {s} is shorter than kernel length {bank.k}")
    t = frames.shape[0]
    windows = np.ascontiguousarray(sliding_window_view(frames, bank.k, axis=1))  # (t, L, k)
    length = windows.shape[1]
    # valid-mode correlation as one 2-D product so it reaches BLAS, (t, L, f)
    responses = (windows.reshape(-1, bank.k) @ bank.kernels.T).reshape(t, length, bank.f)
    energy = np.mean(responses * responses, axis=1)
    values = np.log(energy + LOG_FLOOR).T
    return Spectrogram(values, SpectrogramStage.X_RAW), AcousticCache(windows, responses, energy)


def acoustic_backward(
    dx: np.ndarray, cache: AcousticCache, bank: KernelBank, need_input_grad: bool = False
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Gradients of the x_raw stage w.r.t. the kernel taps (and optionally the frames)."""
    t, length, k = cache.windows.shape
    de = dx.T / (cache.energy + LOG_FLOOR)  # (t, f)
    dresp = cache.responses * (2.0 / length) * de[:, None, :]
    dkernels = np.tensordot(dresp, cache.windows, axes=([0, 1], [0, 1]))  # (f, k)
    if not need_input_grad:
        return dkernels, None
    dwin = np.matmul(dresp, bank.kernels)  # (t, L, k)
    dframes = np.zeros((t, length + k - 1))
    for n in range(k):
        dframes[:, n : n + length] += dwin[:, :, n]
    return dkernels, dframes


def mu_gradient(dkernels: np.ndarray, params: FilterbankParams) -> np.ndarray:
    """Chain kernel-tap gradients through the mu Jacobian; zero for frozen families."""
    if not params.family.learnable:
        return np.zeros_like(params.mu)
    return np.sum(dkernels * kernel_mu_jacobian(params), axis=1)


def clip_mu(mu: np.ndarray, margin: float = MU_MARGIN) -> int:
    """Clip ``mu`` in place to [margin, 0.5 - margin]; returns how many entries moved."""
    out_of_range = (mu < margin) | (mu > 0.5 - margin)
    count = int(np.count_nonzero(out_of_range))
    if count:
        np.clip(mu, margin, 0.5 - margin, out=mu)
        logger.warning("Clipped %d center frequencies back into (0, 0.5)", count)
    return count


def export_filters(params: FilterbankParams, path: Union[str, Path]) -> Path:
    """Write ``family f k`` then one mu per line in full precision."""
    lines = [f"{params.family.value} {params.f} {params.k}"]
    lines.extend("%.17g" % value for value in params.mu)
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_filters(path: Union[str, Path]) -> Tuple[KernelFamily, int, np.ndarray]:
    """Parse a filter export file into (family, k, mu)."""
    path = Path(path)
    try:
        lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise FormatError(f"cannot read filter file {path}: {e}") from e
    if not lines:
        raise FormatError(f"{path}: empty filter file")
    header = lines[0].split()
    if len(header) != 3:
        raise FormatError(f"{path}: header must be 'family f k', got {lines[0]!r}")
    try:
        family = KernelFamily(header[0])
        f, k = int(header[1]), int(header[2])
        mu = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    if len(mu) != f:
        raise FormatError(f"{path}: header declares {f} filters, found {len(mu)}")
    return family, k, mu
