"""Waveform handling and the strided convolutional feature encoder.

Three conv layers with (kernel, stride) = (8,4), (4,2), (4,2) turn a
16 kHz mono waveform into one 32-dim feature vector per 16 samples of
total stride, with SiLU between layers and a LayerNorm over the feature
dimension at the end. Convolution is expressed as a window gather plus a
matmul, so gradients flow through the standard tensor ops. Externally
computed feature matrices can be loaded from the named-tensor container
instead.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, FormatError, ValidationError
from .tensor import Tensor

_F32 = np.float32

SAMPLE_RATE = 16000
CONV_LAYERS = ((8, 4), (4, 2), (4, 2))
D_A = 32
# Smallest input producing one output frame: the last layer needs 4 frames
# from layer 2, which needs 10 from layer 1, which needs 44 raw samples.
MIN_SAMPLES = 44
_LN_EPS = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    participant_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=_F32).reshape(-1)
        if self.samples.size == 0:
            raise ValidationError("waveform is empty")
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(
                f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        if not np.isfinite(self.samples).all():
            raise ValidationError("waveform contains non-finite samples")
        peak = float(np.abs(self.samples).max())
        if peak > 1.0:
            raise ValidationError(f"waveform amplitude {peak:.4f} exceeds 1.0")

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass
class AudioFeatures:
    features: np.ndarray  # (s, d_a)
    participant_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=_F32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(
                f"features must be a nonempty (s, d_a) matrix, got shape {self.features.shape}"
            )
        if not np.isfinite(self.features).all():
            raise ValidationError("features contain non-finite entries")

    @property
    def s(self) -> int:
        return int(self.features.shape[0])

    @property
    def d_a(self) -> int:
        return int(self.features.shape[1])


def layer_output_length(n_in: int, kernel: int, stride: int) -> int:
    return (n_in - kernel) // stride + 1


def frame_count(n_samples: int) -> int:
    """Output frames for an input length, by the per-layer recurrence."""
    n = n_samples
    for kernel, stride in CONV_LAYERS:
        n = layer_output_length(n, kernel, stride)
    return n


class ConvFeatureEncoder:
    """The micro feature encoder; weights are fixed at construction."""

    def __init__(self, rng: np.random.Generator, d_a: int = D_A):
        channels = (1, d_a, d_a, d_a)
        self.d_a = d_a
        self.weights: list[Tensor] = []
        for (kernel, _), c_in, c_out in zip(CONV_LAYERS, channels[:-1], channels[1:]):
            w = rng.normal(0.0, 0.02, size=(kernel * c_in, c_out)).astype(_F32)
            self.weights.append(Tensor(w, requires_grad=True))
        self.ln_gain = Tensor(np.ones(d_a, dtype=_F32), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d_a, dtype=_F32), requires_grad=True)

    def named_tensors(self) -> dict[str, Tensor]:
        named = {f"audio_encoder.conv{i}.weight": w for i, w in enumerate(self.weights)}
        named["audio_encoder.ln.gain"] = self.ln_gain
        named["audio_encoder.ln.bias"] = self.ln_bias
        return named

    def _conv(self, x: Tensor, layer: int) -> Tensor:
        """One strided conv over (L, C_in) input via gather + matmul."""
        kernel, stride = CONV_LAYERS[layer]
        n_out = layer_output_length(x.shape[0], kernel, stride)
        windows = np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]
        gathered = T.gather_rows(x, windows)  # (n_out, kernel, C_in)
        flat = T.reshape(gathered, (n_out, kernel * x.shape[1]))
        return T.matmul(flat, self.weights[layer])

    def conv_stack(self, samples) -> list[Tensor]:
        """Pre-activation output of each conv layer, for diagnostics."""
        x = samples if isinstance(samples, Tensor) else Tensor(np.asarray(samples, dtype=_F32))
        if x.ndim == 1:
            x = T.reshape(x, (x.shape[0], 1))
        outs = []
        for layer in range(len(CONV_LAYERS)):
            pre = self._conv(x, layer)
            outs.append(pre)
            x = T.silu(pre) if layer < len(CONV_LAYERS) - 1 else pre
        return outs

    def forward(self, samples) -> Tensor:
        """(n,) samples -> (frames, d_a) features, LayerNormed per frame."""
        n = samples.shape[0] if isinstance(samples, Tensor) else len(samples)
        if n < MIN_SAMPLES:
            raise ValidationError(
                f"waveform of {n} samples is too short; the encoder needs at least "
                f"{MIN_SAMPLES} samples to produce one frame"
            )
        x = self.conv_stack(samples)[-1]
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.mean(T.mul(centered, centered), axis=-1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, _LN_EPS)))
        return T.add(T.mul(normed, self.ln_gain), self.ln_bias)


def extract_features(w: Waveform, encoder: ConvFeatureEncoder) -> AudioFeatures:
    out = encoder.forward(w.samples)
    return AudioFeatures(out.data, participant_id=w.participant_id)


def load_wav(path, participant_id: str = "") -> Waveform:
    """Read PCM 16-bit signed little-endian mono 16 kHz audio."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise FormatError(
                f"{path}: expected 16-bit PCM, got sample width {f.getsampwidth()}"
            )
        if f.getframerate() != SAMPLE_RATE:
            raise FormatError(
                f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()}"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(_F32) / 32768.0
    return Waveform(samples, SAMPLE_RATE, participant_id)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def save_features(path, feats: AudioFeatures) -> None:
    container.save_tensors(
        path,
        {"features": feats.features},
        config={
            "kind": "audio_features",
            "participant_id": feats.participant_id,
            "s": feats.s,
            "d_a": feats.d_a,
        },
    )


def load_features(path, expected_d_a: int | None = None) -> AudioFeatures:
    tensors, config = container.load_tensors(path)
    if "features" not in tensors:
        raise FormatError(f"{path}: no 'features' tensor in container")
    feats = tensors["features"]
    if feats.ndim != 2:
        raise FormatError(f"{path}: features must be rank 2, got shape {feats.shape}")
    declared = (config.get("s"), config.get("d_a"))
    if declared != feats.shape and None not in declared:
        raise FormatError(
            f"{path}: header declares shape {declared}, payload is {feats.shape}"
        )
    if expected_d_a is not None and feats.shape[1] != expected_d_a:
        raise ConfigError(
            f"{path}: feature dim {feats.shape[1]} does not match the projector's {expected_d_a}"
        )
    return AudioFeatures(feats, participant_id=str(config.get("participant_id", "")))
