"""Audio ingestion, synthesis, noise mixing and framing."""

import io
import logging
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from ..utils.files import atomic_write_bytes, atomic_write_text
from ..utils.seeding import stream
from .errors import ArgumentError, DataError, DegenerateInputError, FormatError, UnsupportedFormatError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SECONDS = 1.2
CLEAN_SNR = math.inf
BACKGROUND_SNR_DB = 40.0
NOISE_STREAM = "noise"
EVAL_NOISE_STREAM = "eval_noise"

# Two resonances per synthetic class, spread over the telephone band.
CLASS_FORMANTS: Tuple[Tuple[float, float], ...] = (
    (320.0, 900.0),
    (350.0, 2300.0),
    (550.0, 1250.0),
    (600.0, 2900.0),
    (800.0, 1500.0),
    (850.0, 3300.0),
    (1050.0, 1900.0),
    (1200.0, 2600.0),
)

# Second table with disjoint resonances, used as the "other domain" in transfer runs.
ALT_CLASS_FORMANTS: Tuple[Tuple[float, float], ...] = (
    (400.0, 1100.0),
    (450.0, 2600.0),
    (650.0, 1700.0),
    (700.0, 3100.0),
    (950.0, 2000.0),
    (1000.0, 3400.0),
    (1150.0, 1450.0),
    (1300.0, 2800.0),
)

FORMANT_TABLES = {"default": CLASS_FORMANTS, "alt": ALT_CLASS_FORMANTS}

# Pink (1/f) shaping filter, a 3-pole/3-zero approximation.
_PINK_B = np.array([0.049922035, -0.095993537, 0.050612699, -0.004408786])
_PINK_A = np.array([1.0, -2.494956002, 2.017265875, -0.522189400])


@dataclass
class SampleBuffer:
    """Mono audio at 16 kHz, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ArgumentError(f"samples must be one-dimensional, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ArgumentError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ArgumentError("samples contain non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    def power(self) -> float:
        """Mean-square power over the whole buffer."""
        return float(np.mean(self.samples * self.samples)) if len(self.samples) else 0.0


@dataclass
class RawFrameBlock:
    """t x s raw-sample frames around a labelled center frame."""

    frames: np.ndarray
    frame_len: int
    hop: int
    center_index: int = field(init=False)

    def __post_init__(self):
        t = self.frames.shape[0]
        if self.frames.shape != (t, self.frame_len):
            raise ArgumentError(f"frames shape {self.frames.shape} does not match frame_len {self.frame_len}")
        if t % 2 == 0:
            raise ArgumentError(f"frame count must be odd, got {t}")
        self.center_index = (t - 1) // 2

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def s(self) -> int:
        return self.frame_len


@dataclass
class LabeledClip:
    """A buffer with its synthetic class label and SNR (None when clean)."""

    buffer: SampleBuffer
    class_id: int
    snr_db: Optional[float] = None


@dataclass
class ManifestEntry:
    """One manifest row: audio path, class label and SNR in dB (inf = clean)."""

    path: Path
    class_id: int
    snr_db: float = CLEAN_SNR

    @property
    def is_clean(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0


def read_wav(path: Union[str, Path]) -> SampleBuffer:
    """Read a RIFF/WAVE PCM 16-bit mono 16 kHz file.

    Raises:
        FormatError: the RIFF structure is malformed.
        UnsupportedFormatError: audio format, channel count, sample rate or
            bit depth differ from PCM/1/16000/16 (``field`` names which).
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return _parse_wav(data, str(path))


def _parse_wav(data: bytes, source: str) -> SampleBuffer:
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{source}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = data[offset : offset + 4]
        (size,) = struct.unpack_from("<I", data, offset + 4)
        body = data[offset + 8 : offset + 8 + size]
        if len(body) < size:
            raise FormatError(f"{source}: chunk {chunk_id!r} truncated ({len(body)} of {size} bytes)")
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{source}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            pcm = body
        offset += 8 + size + (size & 1)  # chunks are word aligned

    if fmt is None:
        raise FormatError(f"{source}: missing fmt chunk")
    if pcm is None:
        raise FormatError(f"{source}: missing data chunk")

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormatError("audio_format", audio_format, 1)
    if channels != 1:
        raise UnsupportedFormatError("channels", channels, 1)
    if rate != SAMPLE_RATE:
        raise UnsupportedFormatError("sample_rate", rate, SAMPLE_RATE)
    if bits != 16:
        raise UnsupportedFormatError("bits_per_sample", bits, 16)
    if len(pcm) % 2:
        raise FormatError(f"{source}: data chunk has odd length {len(pcm)}")

    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    return SampleBuffer(samples)


def wav_bytes(buf: SampleBuffer) -> bytes:
    """Encode a buffer as PCM 16-bit mono WAV bytes."""
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    out = io.BytesIO()
    with wave.open(out, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(pcm.tobytes())
    return out.getvalue()


def write_wav(path: Union[str, Path], buf: SampleBuffer) -> Path:
    """Write a buffer as PCM 16-bit mono WAV (atomic)."""
    return atomic_write_bytes(path, wav_bytes(buf))


def frame_signal(buf: SampleBuffer, s: int, hop: int, t: int, center_sample: int) -> RawFrameBlock:
    """Slice ``t`` frames of ``s`` samples, ``hop`` apart, centered on ``center_sample``.

    The center frame starts at ``center_sample - s // 2``. Samples outside the
    buffer read as zero.
    """
    for name, value in (("s", s), ("hop", hop), ("t", t)):
        if value <= 0:
            raise ArgumentError(f"{name} must be positive, got {value}")
    start = center_sample - s // 2 - hop * ((t - 1) // 2)
    span = s + hop * (t - 1)
    x = buf.samples
    left = max(0, -start)
    right = max(0, start + span - len(x))
    padded = np.pad(x, (left, right)) if (left or right) else x
    first = start + left
    segment = padded[first : first + span]
    frames = sliding_window_view(segment, s)[::hop][:t].copy()
    return RawFrameBlock(frames=frames, frame_len=s, hop=hop)


def center_block(buf: SampleBuffer, s: int = 400, hop: int = 160, t: int = 101) -> RawFrameBlock:
    """Frame block whose center frame sits at the middle of the buffer."""
    return frame_signal(buf, s, hop, t, len(buf) // 2)


def synthesize_clip(
    class_id: int, seed: int, num_classes: int = len(CLASS_FORMANTS), table: str = "default"
) -> LabeledClip:
    """Deterministic 1.2 s clip for ``class_id``.

    Two resonant tones at the class formants (jittered by at most 10 Hz) carry the
    label; a weak harmonic series at a random fundamental, a random envelope and
    random phases vary from seed to seed. A white background sits
    ``BACKGROUND_SNR_DB`` below the signal.
    """
    formants = FORMANT_TABLES.get(table)
    if formants is None:
        raise ArgumentError(f"unknown formant table {table!r}")
    if not 0 < num_classes <= len(formants):
        raise ArgumentError(f"num_classes must be in [1, {len(formants)}], got {num_classes}")
    if not 0 <= class_id < num_classes:
        raise ArgumentError(f"unknown class {class_id}; expected 0..{num_classes - 1}")

    rng = stream(seed, "data", class_id)
    n = int(round(CLIP_SECONDS * SAMPLE_RATE))
    time = np.arange(n) / SAMPLE_RATE

    f1, f2 = (f + rng.uniform(-10.0, 10.0) for f in formants[class_id])
    a2 = rng.uniform(0.6, 0.9)
    x = np.cos(2 * np.pi * f1 * time + rng.uniform(0, 2 * np.pi))
    x += a2 * np.cos(2 * np.pi * f2 * time + rng.uniform(0, 2 * np.pi))

    f0 = rng.uniform(100.0, 200.0)
    harmonics = np.arange(1, int(3400.0 // f0) + 1)
    phases = rng.uniform(0, 2 * np.pi, size=len(harmonics))
    x += 0.08 * np.cos(2 * np.pi * f0 * np.outer(harmonics, time) + phases[:, None]).sum(axis=0) / np.sqrt(
        len(harmonics)
    )

    envelope = signal.windows.tukey(n, alpha=rng.uniform(0.2, 0.5))
    envelope *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * time + rng.uniform(0, 2 * np.pi))
    x *= envelope

    # Recording floor: no band of a clean clip is digital silence.
    floor = rng.standard_normal(n)
    x += floor * snr_gain(float(np.mean(x * x)), float(np.mean(floor * floor)), BACKGROUND_SNR_DB)

    x *= 0.9 * rng.uniform(0.5, 1.0) / np.max(np.abs(x))
    return LabeledClip(buffer=SampleBuffer(x), class_id=class_id, snr_db=None)


def make_noise(
    length: int, seed: int, kind: str = "white", index: int = 0, stream_name: str = NOISE_STREAM
) -> SampleBuffer:
    """Seeded unit-variance Gaussian noise, white or pink-filtered.

    Training copies and evaluation mixes draw from different ``stream_name``s, so
    no evaluation clip reuses a noise realisation seen in training.
    """
    if length <= 0:
        raise ArgumentError(f"noise length must be positive, got {length}")
    rng = stream(seed, stream_name, index)
    white = rng.standard_normal(length)
    if kind == "white":
        return SampleBuffer(white)
    if kind == "pink":
        pink = signal.lfilter(_PINK_B, _PINK_A, white)
        return SampleBuffer(pink / np.std(pink))
    raise ArgumentError(f"unknown noise kind {kind!r}; expected 'white' or 'pink'")


def mix_noise(clean: SampleBuffer, noise: SampleBuffer, snr_db: float) -> SampleBuffer:
    """Add ``noise`` scaled so the full-clip SNR equals ``snr_db``.

    ``snr_db = +inf`` returns the clean samples unchanged. Shorter noise is tiled.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return SampleBuffer(clean.samples.copy())
    if math.isnan(snr_db) or math.isinf(snr_db):
        raise ArgumentError(f"snr_db must be finite or +inf, got {snr_db}")
    p_clean = clean.power()
    if p_clean == 0.0:
        raise DegenerateInputError("clean signal is silent (zero power); SNR undefined")
    n = len(clean)
    noise_samples = np.resize(noise.samples, n) if len(noise) < n else noise.samples[:n]
    p_noise = float(np.mean(noise_samples * noise_samples))
    if p_noise == 0.0:
        raise DegenerateInputError("noise signal is silent (zero power); SNR undefined")
    gain = snr_gain(p_clean, p_noise, snr_db)
    return SampleBuffer(clean.samples + gain * noise_samples)


def snr_gain(clean_power: float, noise_power: float, snr_db: float) -> float:
    """Noise gain giving ``snr_db`` for the given signal powers."""
    return math.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def format_snr(snr_db: float) -> str:
    return "inf" if math.isinf(snr_db) else repr(float(snr_db))


def parse_snr_list(text: str) -> List[float]:
    """Parse ``"20,10,0"`` / ``"inf,10"`` into floats."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(part)
        except ValueError as e:
            raise ArgumentError(f"bad SNR value {part!r}") from e
        if math.isnan(value) or value == -math.inf:
            raise ArgumentError(f"bad SNR value {part!r}")
        values.append(value)
    if not values:
        raise ArgumentError("empty SNR list")
    return values


def write_manifest(path: Union[str, Path], entries: Iterable[ManifestEntry]) -> Path:
    """Write ``path<TAB>class_id<TAB>snr_db`` lines; paths relative to the manifest."""
    path = Path(path)
    lines = []
    for entry in entries:
        try:
            rel = entry.path.relative_to(path.parent)
        except ValueError:
            rel = entry.path
        lines.append(f"{rel.as_posix()}\t{entry.class_id}\t{format_snr(entry.snr_db)}")
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Read a manifest; relative audio paths resolve against the manifest directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            class_id = int(parts[1])
            snr_db = float(parts[2])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad class or SNR field") from e
        audio = Path(parts[0])
        entries.append(ManifestEntry(audio if audio.is_absolute() else path.parent / audio, class_id, snr_db))
    return entries


def synthesize_dataset(
    out_dir: Union[str, Path],
    count: int,
    seed: int,
    num_classes: int = len(CLASS_FORMANTS),
    snrs: Sequence[float] = (),
    noise_kind: str = "white",
    table: str = "default",
    prefix: str = "clip",
) -> List[ManifestEntry]:
    """Write ``count`` balanced clean clips (plus noisy copies per SNR) as WAV files."""
    if count <= 0:
        raise ArgumentError(f"clip count must be positive, got {count}")
    out_dir = Path(out_dir)
    entries = []
    for index in range(count):
        class_id = index % num_classes
        clip = synthesize_clip(class_id, seed * 1_000_003 + index, num_classes, table)
        clean_path = write_wav(out_dir / f"{prefix}{index:05d}_c{class_id}.wav", clip.buffer)
        entries.append(ManifestEntry(clean_path, class_id))
        for snr in snrs:
            if math.isinf(snr):
                continue
            noise = make_noise(len(clip.buffer), seed, noise_kind, index)
            noisy = mix_noise(clip.buffer, noise, snr)
            peak = float(np.max(np.abs(noisy.samples)))
            if peak > 1.0:
                noisy = SampleBuffer(noisy.samples / peak)
            noisy_path = write_wav(out_dir / f"{prefix}{index:05d}_c{class_id}_snr{snr:g}.wav", noisy)
            entries.append(ManifestEntry(noisy_path, class_id, float(snr)))
    logger.info("Synthesized %d clips (%d manifest rows) in %s", count, len(entries), out_dir)
    return entries
