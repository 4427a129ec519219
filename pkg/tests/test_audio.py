"""Tests for WAV ingestion, framing, synthesis and noise mixing."""

import io
import math
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relward.core.audio import (
    CLASS_FORMANTS,
    EVAL_NOISE_STREAM,
    NOISE_STREAM,
    ManifestEntry,
    SampleBuffer,
    center_block,
    frame_signal,
    make_noise,
    mix_noise,
    parse_snr_list,
    read_manifest,
    read_wav,
    snr_gain,
    synthesize_clip,
    synthesize_dataset,
    write_manifest,
    write_wav,
)
from relward.core.errors import ArgumentError, DataError, DegenerateInputError, FormatError, UnsupportedFormatError


def pcm_wav(values, rate=16000, channels=1, width=2) -> bytes:
    out = io.BytesIO()
    with wave.open(out, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(values, dtype="<i2").tobytes() if width == 2 else bytes(values))
    return out.getvalue()


def float_wav() -> bytes:
    """IEEE-float (format 3) mono file, which the reader must refuse."""
    data = np.zeros(4, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestReadWav:
    """Test the RIFF/WAVE reader."""

    def test_pcm_scaling(self, tmp_path):
        """Test that 16384 maps to 0.5 and 0 to 0.0."""
        path = tmp_path / "a.wav"
        path.write_bytes(pcm_wav([16384, 0, -32768]))

        buf = read_wav(path)
        assert buf.samples.tolist() == [0.5, 0.0, -1.0]

    def test_duration(self, tmp_path):
        """Test that a 3 second file yields 48000 samples."""
        path = tmp_path / "long.wav"
        path.write_bytes(pcm_wav(np.zeros(48000, dtype=np.int16)))
        assert len(read_wav(path)) == 48000

    @pytest.mark.parametrize(
        "kwargs,field",
        [
            ({"channels": 2}, "channels"),
            ({"rate": 8000}, "sample_rate"),
        ],
    )
    def test_unsupported_fields_are_named(self, tmp_path, kwargs, field):
        """Test that each unsupported header field is reported by name."""
        path = tmp_path / "bad.wav"
        path.write_bytes(pcm_wav(np.zeros(8, dtype=np.int16), **kwargs))

        with pytest.raises(UnsupportedFormatError) as info:
            read_wav(path)
        assert info.value.field == field

    def test_eight_bit_rejected(self, tmp_path):
        """Test that 8-bit PCM is refused with the bit depth named."""
        path = tmp_path / "u8.wav"
        path.write_bytes(pcm_wav([128, 128, 128], width=1))
        with pytest.raises(UnsupportedFormatError) as info:
            read_wav(path)
        assert info.value.field == "bits_per_sample"

    def test_float_format_rejected(self, tmp_path):
        """Test that non-PCM audio is refused."""
        path = tmp_path / "float.wav"
        path.write_bytes(float_wav())
        with pytest.raises(UnsupportedFormatError) as info:
            read_wav(path)
        assert info.value.field == "audio_format"

    def test_not_riff(self, tmp_path):
        """Test that garbage is a format error."""
        path = tmp_path / "junk.wav"
        path.write_bytes(b"hello world, not audio")
        with pytest.raises(FormatError):
            read_wav(path)

    def test_write_then_read(self, tmp_path):
        """Test that values on the 16-bit grid survive a write/read cycle exactly."""
        samples = np.array([0.5, -0.25, 0.0, 1 / 32768])
        path = write_wav(tmp_path / "rt.wav", SampleBuffer(samples))
        np.testing.assert_array_equal(read_wav(path).samples, samples)


class TestFrameSignal:
    """Test framing around a center sample."""

    def test_ramp(self):
        """Test index arithmetic on a ramp with the block starting at sample 0."""
        buf = SampleBuffer(np.arange(12, dtype=float))
        block = frame_signal(buf, s=4, hop=2, t=3, center_sample=4)
        assert block.frames.tolist() == [[0, 1, 2, 3], [2, 3, 4, 5], [4, 5, 6, 7]]
        assert block.center_index == 1

    def test_constant_signal(self):
        """Test that a constant signal gives all-ones frames."""
        block = frame_signal(SampleBuffer(np.ones(20000)), 400, 160, 101, 10000)
        assert block.frames.shape == (101, 400)
        assert np.all(block.frames == 1.0)

    def test_full_span(self):
        """Test that the default block spans 400 + 160 * 100 samples."""
        buf = SampleBuffer(np.arange(16400, dtype=float))
        block = frame_signal(buf, 400, 160, 101, 8200)
        assert block.frames[0, 0] == 0.0
        assert block.frames[-1, -1] == 16399.0

    def test_edges_zero_padded(self):
        """Test that samples outside the buffer read as zero."""
        buf = SampleBuffer(np.ones(10))
        block = frame_signal(buf, s=4, hop=2, t=3, center_sample=0)
        assert block.frames[0].tolist() == [0.0, 0.0, 0.0, 0.0]
        assert block.frames[-1].tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_even_frame_count_rejected(self):
        """Test that the block needs a single center frame."""
        with pytest.raises(ArgumentError):
            frame_signal(SampleBuffer(np.ones(100)), 4, 2, 4, 50)

    @given(st.integers(min_value=1, max_value=20), st.integers(min_value=1, max_value=5), st.integers(0, 4))
    @settings(max_examples=50, deadline=None)
    def test_center_frame_position(self, s, hop, half):
        """Test that the center frame always starts at center_sample - s // 2."""
        t = 2 * half + 1
        x = SampleBuffer(np.arange(500, dtype=float))
        block = frame_signal(x, s, hop, t, 250)
        assert block.frames[block.center_index, 0] == 250 - s // 2


class TestSynthesis:
    """Test the synthetic class clips."""

    def test_deterministic(self):
        """Test that (class, seed) fixes the buffer bit for bit."""
        a = synthesize_clip(3, seed=11).buffer.samples
        b = synthesize_clip(3, seed=11).buffer.samples
        assert a.tobytes() == b.tobytes()

    def test_peak_bounded(self):
        """Test the peak normalization over classes and seeds."""
        for class_id in range(8):
            for seed in range(3):
                assert np.max(np.abs(synthesize_clip(class_id, seed).buffer.samples)) <= 0.9 + 1e-12

    def test_class_zero_formants(self):
        """Test that the two strongest spectral peaks sit at the class-0 resonances."""
        samples = synthesize_clip(0, seed=5).buffer.samples
        spectrum = np.abs(np.fft.rfft(samples))
        freqs = np.fft.rfftfreq(len(samples), d=1 / 16000)
        first = freqs[np.argmax(spectrum)]
        masked = spectrum.copy()
        masked[np.abs(freqs - first) < 60] = 0.0
        second = freqs[np.argmax(masked)]
        found = sorted([first, second])
        for got, want in zip(found, CLASS_FORMANTS[0]):
            assert abs(got - want) <= 20.0

    def test_background_floor(self):
        """Test that bands above every resonance carry the weak white background."""
        samples = synthesize_clip(2, seed=7).buffer.samples
        power = np.abs(np.fft.rfft(samples)) ** 2
        freqs = np.fft.rfftfreq(len(samples), d=1 / 16000)
        share = np.sum(power[freqs >= 5000.0]) / np.sum(power)
        assert 1e-5 < share < 2e-4
        assert samples[0] != 0.0

    def test_unknown_class(self):
        """Test that classes outside the table are rejected."""
        with pytest.raises(ArgumentError):
            synthesize_clip(8, seed=0)


class TestNoise:
    """Test noise generation and SNR mixing."""

    def test_gain_equal_power(self):
        """Test that 0 dB with equal powers needs unit gain."""
        assert snr_gain(0.3, 0.3, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_gain_hand_case(self):
        """Test the 0.04 / 0.01 at 10 dB hand evaluation."""
        assert snr_gain(0.04, 0.01, 10.0) == pytest.approx(0.6325, abs=1e-4)

    def test_mix_hits_requested_snr(self):
        """Test that the mixed noise has the requested power ratio."""
        clean = synthesize_clip(1, seed=0).buffer
        noise = make_noise(len(clean), seed=0)
        noisy = mix_noise(clean, noise, 10.0)
        added = noisy.samples - clean.samples
        ratio = 10 * math.log10(clean.power() / float(np.mean(added * added)))
        assert ratio == pytest.approx(10.0, abs=1e-9)

    def test_clean_sentinel(self):
        """Test that +inf returns the clean samples."""
        clean = synthesize_clip(2, seed=0).buffer
        out = mix_noise(clean, make_noise(10, seed=0), math.inf)
        assert out.samples.tobytes() == clean.samples.tobytes()

    def test_silent_input(self):
        """Test that a silent clean signal is degenerate."""
        with pytest.raises(DegenerateInputError):
            mix_noise(SampleBuffer(np.zeros(100)), make_noise(100, seed=0), 5.0)

    def test_pink_noise_unit_variance(self):
        """Test that pink noise is normalized and seeded."""
        a = make_noise(16000, seed=4, kind="pink", index=2)
        b = make_noise(16000, seed=4, kind="pink", index=2)
        assert np.std(a.samples) == pytest.approx(1.0)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_eval_stream_differs_from_training_stream(self):
        """Test that the evaluation stream never repeats a training realisation."""
        train = make_noise(800, seed=0, index=3)
        held_out = make_noise(800, seed=0, index=3, stream_name=EVAL_NOISE_STREAM)
        assert train.samples.tobytes() == make_noise(800, seed=0, index=3, stream_name=NOISE_STREAM).samples.tobytes()
        assert not np.allclose(train.samples, held_out.samples)

    def test_parse_snr_list(self):
        """Test SNR list parsing, including the clean sentinel."""
        assert parse_snr_list("20, 10,0") == [20.0, 10.0, 0.0]
        assert parse_snr_list("inf") == [math.inf]
        with pytest.raises(ArgumentError):
            parse_snr_list("ten")


class TestManifest:
    """Test manifest files and dataset synthesis."""

    def test_round_trip(self, tmp_path):
        """Test that entries survive write and read with paths resolved."""
        entries = [ManifestEntry(tmp_path / "a.wav", 1), ManifestEntry(tmp_path / "b.wav", 2, 10.0)]
        path = write_manifest(tmp_path / "m.tsv", entries)

        loaded = read_manifest(path)
        assert [(e.path, e.class_id, e.snr_db) for e in loaded] == [
            (tmp_path / "a.wav", 1, math.inf),
            (tmp_path / "b.wav", 2, 10.0),
        ]
        assert "a.wav\t1\tinf" in path.read_text()

    def test_missing_manifest(self, tmp_path):
        """Test that a missing manifest is a data error."""
        with pytest.raises(DataError):
            read_manifest(tmp_path / "nope.tsv")

    def test_dataset_with_noisy_copies(self, tmp_path):
        """Test that each SNR adds one noisy copy per clip."""
        entries = synthesize_dataset(tmp_path, 4, seed=1, num_classes=2, snrs=[math.inf, 10.0])
        assert len(entries) == 8
        assert sum(e.is_clean for e in entries) == 4
        assert [e.class_id for e in entries if e.is_clean] == [0, 1, 0, 1]
        for entry in entries:
            assert entry.path.is_file()

    def test_center_block_shape(self):
        """Test that the default block fits a 1.2 s clip."""
        block = center_block(synthesize_clip(0, seed=0).buffer)
        assert block.frames.shape == (101, 400)
