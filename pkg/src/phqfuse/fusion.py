"""Audio-to-text projection, input assembly, and the scoring head.

Audio feature frames are mapped per frame into the language model's
hidden space by a two-layer feedforward, spliced after an optional text
prefix, and the questionnaire score is read off the last position's
hidden state through a single linear layer. Scores are clamped to the
instrument's 0..24 range only when reported, never inside training math.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import codec
from . import tensor as T
from .audio import AudioFeatures
from .errors import ConfigError, ContractError
from .model import MicroLM
from .tensor import Tensor

_F32 = np.float32

MODES = ("text_only", "audio_only", "text_and_audio")

PHQ_MIN = 0.0
PHQ_MAX = 24.0


class AudioProjector:
    """Two-layer feedforward d_a -> d_t -> d_t with SiLU between."""

    def __init__(self, d_a: int, d_t: int, rng: np.random.Generator):
        self.d_a = d_a
        self.d_t = d_t
        self.fc1 = Tensor(rng.normal(0.0, 0.02, size=(d_a, d_t)).astype(_F32), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_t, dtype=_F32), requires_grad=True)
        self.fc2 = Tensor(rng.normal(0.0, 0.02, size=(d_t, d_t)).astype(_F32), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_t, dtype=_F32), requires_grad=True)

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "projector.fc1.weight": self.fc1,
            "projector.fc1.bias": self.b1,
            "projector.fc2.weight": self.fc2,
            "projector.fc2.bias": self.b2,
        }

    def project(self, r) -> Tensor:
        """(s, d_a) features -> (s, d_t) embeddings, applied per frame."""
        if isinstance(r, AudioFeatures):
            x = Tensor(r.features)
        elif isinstance(r, Tensor):
            x = r
        else:
            x = Tensor(np.asarray(r, dtype=_F32))
        if x.ndim != 2 or x.shape[1] != self.d_a:
            raise ConfigError(
                f"projector expects (s, {self.d_a}) features, got shape {x.shape}"
            )
        h = T.silu(T.add(T.matmul(x, self.fc1), self.b1))
        return T.add(T.matmul(h, self.fc2), self.b2)


class RegressionHead:
    """Linear d_t -> 1 read-out over the final hidden state."""

    def __init__(self, d_t: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(d_t, 1)).astype(_F32), requires_grad=True)
        self.bias = Tensor(np.zeros(1, dtype=_F32), requires_grad=True)

    def named_tensors(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def score(self, hidden: Tensor) -> Tensor:
        """(..., d_t) hidden states -> (...,) raw scores."""
        out = T.add(T.matmul(hidden, self.weight), self.bias)
        return T.reshape(out, out.shape[:-1])


@dataclass
class FusionInput:
    mode: str
    text_ids: Sequence[int] | None = None
    audio: AudioFeatures | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        needs_text = self.mode in ("text_only", "text_and_audio")
        needs_audio = self.mode in ("audio_only", "text_and_audio")
        if needs_text and not self.text_ids:
            raise ContractError(f"mode {self.mode} requires nonempty text ids")
        if needs_audio and self.audio is None:
            raise ContractError(f"mode {self.mode} requires audio features")
        if not needs_text:
            self.text_ids = None
        if not needs_audio:
            self.audio = None


def assemble(model: MicroLM, text_ids, emb_audio: Tensor | None, mode: str) -> Tensor:
    """Build the (S, d_t) input embedding sequence for one example.

    text_and_audio: [BOS, text embeds, AUDIO marker, audio embeds]
    audio_only:     [BOS, audio embeds]
    text_only:      [BOS, text embeds]  (identical to the token path)
    """
    if mode not in MODES:
        raise ContractError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    parts: list[Tensor] = [model.embed([codec.BOS_ID])]
    if mode in ("text_only", "text_and_audio"):
        ids = np.asarray(text_ids, dtype=np.int64)
        if ids.size == 0:
            raise ContractError("empty text for a text-bearing mode")
        parts.append(model.embed(ids))
    if mode in ("audio_only", "text_and_audio"):
        if emb_audio is None:
            raise ContractError("missing projected audio for an audio-bearing mode")
        if mode == "text_and_audio":
            parts.append(model.embed([codec.AUDIO_ID]))
        parts.append(emb_audio)
    out = T.concat(parts, axis=0)
    if out.shape[0] > model.cfg.max_seq_len:
        raise ContractError(
            f"assembled length {out.shape[0]} exceeds max_seq_len {model.cfg.max_seq_len}"
        )
    return out


def assemble_input(model: MicroLM, projector: AudioProjector, fin: FusionInput) -> Tensor:
    emb_audio = projector.project(fin.audio) if fin.audio is not None else None
    return assemble(model, fin.text_ids, emb_audio, fin.mode)


def predict_phq(
    model: MicroLM,
    projector: AudioProjector,
    head: RegressionHead,
    fin: FusionInput,
    adapters: dict | None = None,
) -> Tensor:
    """Raw (unclamped) score from the last position's hidden state."""
    embeds = assemble_input(model, projector, fin)
    out = model.forward(embeds, adapters=adapters)
    last = T.gather_rows(out.hidden, np.array([out.hidden.shape[0] - 1]))
    return T.reshape(head.score(last), ())


def predict_phq_batch(
    model: MicroLM,
    head: RegressionHead,
    assembled: Sequence[Tensor],
    adapters: dict | None = None,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Scores for a list of assembled (S_i, d_t) sequences, padded together."""
    if not assembled:
        raise ContractError("empty batch")
    lengths = np.array([e.shape[0] for e in assembled])
    batch = T.stack_padded(list(assembled))
    pad_mask = np.arange(batch.shape[1])[None, :] < lengths[:, None]
    out = model.forward(
        batch, adapters=adapters, pad_mask=pad_mask,
        training=training, dropout_rng=dropout_rng,
    )
    last = T.select_positions(out.hidden, lengths - 1)
    return head.score(last)


def clamp_score(score):
    """Clip to the questionnaire's range; for reports and CSVs only."""
    return float(np.clip(score, PHQ_MIN, PHQ_MAX)) if np.isscalar(score) or np.ndim(score) == 0 \
        else np.clip(np.asarray(score, dtype=np.float64), PHQ_MIN, PHQ_MAX)
