"""Tests for waveform ingestion and the conv feature encoder."""

from __future__ import annotations

import wave

import numpy as np
import pytest

from phqfuse import tensor as T
from phqfuse.audio import (
    CONV_LAYERS,
    D_A,
    MIN_SAMPLES,
    AudioFeatures,
    ConvFeatureEncoder,
    Waveform,
    extract_features,
    frame_count,
    layer_output_length,
    load_features,
    load_wav,
    save_features,
    save_wav,
)
from phqfuse.errors import ConfigError, FormatError, ValidationError
from phqfuse.seeding import substream
from phqfuse.tensor import Tensor


def sine_wave(n: int, freq: float = 440.0, amp: float = 0.5) -> np.ndarray:
    t = np.arange(n, dtype=np.float64) / 16000.0
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


class TestWaveform:
    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            Waveform(np.array([], dtype=np.float32))

    def test_wrong_sample_rate_rejected(self):
        with pytest.raises(FormatError):
            Waveform(np.zeros(100, dtype=np.float32), sample_rate=8000)

    def test_over_unit_amplitude_rejected(self):
        with pytest.raises(ValidationError):
            Waveform(np.array([0.0, 1.5], dtype=np.float32))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            Waveform(np.array([0.0, np.nan], dtype=np.float32))

    def test_carries_participant_id(self):
        w = Waveform(sine_wave(100), participant_id="303")
        assert w.participant_id == "303" and len(w) == 100


class TestFrameCounts:
    def test_one_second_gives_998_frames(self):
        """16,000 samples walk 3999 -> 1998 -> 998 through the layers."""
        n = 16000
        lens = []
        for kernel, stride in CONV_LAYERS:
            n = layer_output_length(n, kernel, stride)
            lens.append(n)
        assert lens == [3999, 1998, 998]
        assert frame_count(16000) == 998

    def test_forward_length_matches_recurrence_property(self):
        """Sampled lengths in [44, 50000] agree with the closed form."""
        enc = ConvFeatureEncoder(substream(42, "init"), d_a=4)
        rng = substream(42, "fixtures")
        lengths = [MIN_SAMPLES, MIN_SAMPLES + 1, 59, 60, 16000] + list(
            rng.integers(MIN_SAMPLES, 50001, size=12)
        )
        for n in lengths:
            out = enc.forward(np.zeros(int(n), dtype=np.float32))
            assert out.shape == (frame_count(int(n)), 4), n

    def test_too_short_waveform_names_minimum(self):
        enc = ConvFeatureEncoder(substream(42, "init"), d_a=4)
        for n in [1, 16, 32, MIN_SAMPLES - 1]:
            with pytest.raises(ValidationError, match=str(MIN_SAMPLES)):
                enc.forward(np.zeros(n, dtype=np.float32))
        assert enc.forward(np.zeros(MIN_SAMPLES, dtype=np.float32)).shape[0] == 1


class TestEncoder:
    def test_constant_input_gives_identical_frames(self):
        enc = ConvFeatureEncoder(substream(42, "init"))
        out = enc.forward(np.zeros(500, dtype=np.float32)).data
        assert out.shape == (frame_count(500), D_A)
        assert np.all(out == out[0])

    def test_shift_by_total_stride_shifts_frames_by_one(self):
        """Dropping 16 leading samples realigns every window exactly."""
        enc = ConvFeatureEncoder(substream(42, "init"))
        rng = substream(42, "fixtures")
        x = rng.uniform(-0.9, 0.9, size=400).astype(np.float32)
        full = enc.forward(x).data
        shifted = enc.forward(x[16:]).data
        assert np.abs(shifted - full[1 : 1 + len(shifted)]).max() < 1e-5

    def test_first_layer_is_linear_in_amplitude(self):
        """No biases, so pre-activation conv outputs scale with the input."""
        enc = ConvFeatureEncoder(substream(42, "init"))
        x = sine_wave(200, amp=0.2)
        base = enc.conv_stack(x)[0].data
        scaled = enc.conv_stack(3.0 * x)[0].data
        assert np.abs(scaled - 3.0 * base).max() < 1e-5

    def test_deterministic_features(self):
        enc1 = ConvFeatureEncoder(substream(42, "init"))
        enc2 = ConvFeatureEncoder(substream(42, "init"))
        x = sine_wave(300)
        a = enc1.forward(x).data
        b = enc2.forward(x).data
        assert np.array_equal(a, b)

    def test_extract_features_wraps_output(self):
        enc = ConvFeatureEncoder(substream(42, "init"))
        w = Waveform(sine_wave(1000), participant_id="311")
        feats = extract_features(w, enc)
        assert isinstance(feats, AudioFeatures)
        assert feats.participant_id == "311"
        assert (feats.s, feats.d_a) == (frame_count(1000), D_A)

    def test_gradients_reach_weights_and_input(self):
        """Finite differences through gather, matmul, silu, and layer norm."""
        enc = ConvFeatureEncoder(substream(7, "init"), d_a=2)
        rng = substream(7, "fixtures")
        x = Tensor(rng.uniform(-0.9, 0.9, size=MIN_SAMPLES).astype(np.float32),
                   requires_grad=True)
        probe = rng.uniform(0.5, 1.5, size=(1, 2)).astype(np.float32)
        params = [x, *enc.weights, enc.ln_gain, enc.ln_bias]
        res = T.gradient_check(
            lambda: T.probe_loss(enc.forward(x), probe), params, name="conv_encoder"
        )
        assert res.ok, res


class TestWavIO:
    def test_round_trip_on_quantized_samples(self, tmp_path):
        rng = substream(42, "fixtures")
        quantized = np.round(rng.uniform(-0.5, 0.5, size=256) * 32768) / 32768.0
        w = Waveform(quantized.astype(np.float32), participant_id="300")
        path = tmp_path / "300_AUDIO.wav"
        save_wav(path, w)
        back = load_wav(path, participant_id="300")
        assert np.array_equal(back.samples, w.samples)
        assert back.participant_id == "300"

    def test_wrong_rate_rejected(self, tmp_path):
        path = tmp_path / "bad.wav"
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(8000)
            f.writeframes(b"\x00\x00" * 64)
        with pytest.raises(FormatError, match="16000"):
            load_wav(path)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(16000)
            f.writeframes(b"\x00\x00\x00\x00" * 64)
        with pytest.raises(FormatError, match="mono"):
            load_wav(path)

    def test_wide_samples_rejected(self, tmp_path):
        path = tmp_path / "deep.wav"
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(4)
            f.setframerate(16000)
            f.writeframes(b"\x00\x00\x00\x00" * 64)
        with pytest.raises(FormatError, match="16-bit"):
            load_wav(path)


class TestFeatureIO:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = substream(42, "fixtures")
        feats = AudioFeatures(rng.normal(size=(17, 32)).astype(np.float32), "302")
        path = tmp_path / "302_features.phqf"
        save_features(path, feats)
        back = load_features(path)
        assert np.array_equal(back.features, feats.features)
        assert back.participant_id == "302"

    def test_truncated_file_rejected(self, tmp_path):
        feats = AudioFeatures(np.ones((4, 8), dtype=np.float32))
        path = tmp_path / "f.phqf"
        save_features(path, feats)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            load_features(path)

    def test_feature_dim_mismatch_vs_projector(self, tmp_path):
        feats = AudioFeatures(np.ones((4, 8), dtype=np.float32))
        path = tmp_path / "f.phqf"
        save_features(path, feats)
        with pytest.raises(ConfigError, match="8"):
            load_features(path, expected_d_a=32)

    def test_header_shape_must_match_payload(self, tmp_path):
        from phqfuse import container

        path = tmp_path / "f.phqf"
        container.save_tensors(
            path,
            {"features": np.ones((4, 8), dtype=np.float32)},
            config={"kind": "audio_features", "participant_id": "", "s": 5, "d_a": 8},
        )
        with pytest.raises(FormatError, match="declares"):
            load_features(path)
