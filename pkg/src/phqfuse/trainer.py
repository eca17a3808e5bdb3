"""Three-phase training orchestration and checkpointing.

Phases run inject (Q&A cross-entropy) then text then audio (score MSE),
each starting from the previous phase's state. The representation
backbone (embedding, transformer blocks, final norm) and the conv
encoder stay frozen in every phase. Adapters train in every phase; the
LM readout trains only during injection (a frozen random readout caps
token cross-entropy near ln(vocab) because the normalized hidden state
cannot produce a large logit gap, so Q&A memorization would be
impossible without it); the regression head joins the score phases and
the projector joins when audio is present. A NaN anywhere aborts the
phase before any weight is touched, so the returned state is always the
last good one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import codec
from . import container
from . import tensor as T
from .audio import D_A, AudioFeatures, ConvFeatureEncoder
from .errors import ConfigError, ContractError, FormatError, NonFiniteError
from .fusion import MODES, AudioProjector, RegressionHead, assemble, predict_phq_batch
from .knowledge import InjectionExample
from .lora import LoraAdapter, LoraConfig, attach_adapters, named_adapter_tensors
from .model import MicroLM, ModelConfig, lm_loss
from .seeding import substream
from .tensor import Tensor

logger = logging.getLogger(__name__)

_F32 = np.float32

PHASES = ("inject", "text", "audio", "text_and_audio")
_PHASE_MODE = {"text": "text_only", "audio": "audio_only", "text_and_audio": "text_and_audio"}

TEXT_PROMPT_TEMPLATE = "Transcripts:[Transcript], PHQ Score:"


def render_text_prompt(transcript_text: str) -> str:
    """The fixed scoring prompt with the merged segment text filled in."""
    return TEXT_PROMPT_TEMPLATE.replace("[Transcript]", transcript_text, 1)


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_steps: int = 200
    seed: int = 42
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ConfigError("batch_size and max_steps must be at least 1")

    @property
    def loss_kind(self) -> str:
        return "lm_cross_entropy" if self.phase == "inject" else "mse"


@dataclass
class ScoredExample:
    """One score-phase training item: text ids and/or audio features."""

    label: float
    text_ids: list[int] | None = None
    features: AudioFeatures | None = None


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> float:
        """Apply one update; returns the global gradient norm.

        All gradients are validated finite before any state mutates, so a
        blown-up step leaves parameters and moments untouched.
        """
        grads = {}
        sq_sum = 0.0
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
            grads[name] = g
            sq_sum += float((g.astype(np.float64) ** 2).sum())
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - _F32(self.lr) * update
        return float(np.sqrt(sq_sum))


@dataclass
class PipelineState:
    """Everything the three phases share: weights plus their configs."""

    model: MicroLM
    adapters: dict[str, LoraAdapter]
    projector: AudioProjector
    head: RegressionHead
    encoder: ConvFeatureEncoder
    model_config: ModelConfig
    lora_config: LoraConfig
    seed: int = 42

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        named.update(self.model.named_tensors())
        named.update(named_adapter_tensors(self.adapters))
        named.update(self.projector.named_tensors())
        named.update(self.head.named_tensors())
        named.update(self.encoder.named_tensors())
        return named

    def trainables(self, phase: str) -> dict[str, Tensor]:
        """The phase's trainable set; backbone and encoder never appear."""
        named = dict(named_adapter_tensors(self.adapters))
        if phase == "inject":
            named["lm_head.weight"] = self.model.lm_head
        if phase in ("text", "audio", "text_and_audio"):
            named.update(self.head.named_tensors())
        if phase in ("audio", "text_and_audio"):
            named.update(self.projector.named_tensors())
        return named

    def backbone_tensors(self) -> dict[str, Tensor]:
        """Model weights that stay frozen in every phase."""
        return {
            name: t for name, t in self.model.named_tensors().items()
            if name != "lm_head.weight"
        }


def init_pipeline(
    model_config: ModelConfig | None = None,
    lora_config: LoraConfig | None = None,
    seed: int = 42,
    d_a: int = D_A,
) -> PipelineState:
    """Fresh pipeline weights, all drawn from one seeded init stream."""
    model_config = model_config or ModelConfig()
    lora_config = lora_config or LoraConfig()
    rng = substream(seed, "init")
    model = MicroLM(model_config, rng)
    adapters = attach_adapters(model, lora_config, rng)
    projector = AudioProjector(d_a, model_config.d_t, rng)
    head = RegressionHead(model_config.d_t, rng)
    encoder = ConvFeatureEncoder(rng, d_a=d_a)
    return PipelineState(model, adapters, projector, head, encoder,
                         model_config, lora_config, seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: PipelineState, path, phase: str | None = None) -> None:
    config = {
        "model": state.model_config.to_dict(),
        "lora": state.lora_config.to_dict(),
        "d_a": state.projector.d_a,
        "seed": state.seed,
    }
    if phase is not None:
        config["phase"] = phase
    container.save_tensors(path, {k: v.data for k, v in state.named_tensors().items()}, config)


def load_checkpoint(path) -> PipelineState:
    tensors, config = container.load_tensors(path)
    try:
        model_config = ModelConfig.from_dict(config["model"])
        lora_config = LoraConfig.from_dict(config["lora"])
        d_a = int(config["d_a"])
        seed = int(config.get("seed", 42))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad checkpoint config: {e}") from e
    state = init_pipeline(model_config, lora_config, seed=seed, d_a=d_a)
    named = state.named_tensors()
    missing = sorted(set(named) - set(tensors))
    extra = sorted(set(tensors) - set(named))
    if missing or extra:
        raise FormatError(
            f"{path}: tensor names do not match the configs "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, t in named.items():
        if tensors[name].shape != t.data.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"expected {t.data.shape}"
            )
        t.data = tensors[name].astype(_F32)
    return state


# ---------------------------------------------------------------------------
# batching


def _inject_batch(examples: Sequence[InjectionExample]):
    max_len = max(len(e.input_ids) for e in examples)
    b = len(examples)
    ids = np.full((b, max_len), codec.PAD_ID, dtype=np.int64)
    targets = np.full((b, max_len), codec.PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((b, max_len), dtype=bool)
    pad_mask = np.zeros((b, max_len), dtype=bool)
    for i, e in enumerate(examples):
        n = len(e.input_ids)
        ids[i, :n] = e.input_ids
        targets[i, :n] = e.target_ids
        loss_mask[i, :n] = e.loss_mask
        pad_mask[i, :n] = True
    return ids, targets, loss_mask, pad_mask


def _check_dataset(phase: str, dataset: Sequence) -> None:
    if not dataset:
        raise ContractError(f"empty dataset for phase {phase}")
    want = InjectionExample if phase == "inject" else ScoredExample
    for item in dataset:
        if not isinstance(item, want):
            raise ContractError(
                f"phase {phase} expects {want.__name__} items, got {type(item).__name__}"
            )
    if phase != "inject":
        mode = _PHASE_MODE[phase]
        for item in dataset:
            if mode in ("text_only", "text_and_audio") and not item.text_ids:
                raise ContractError(f"phase {phase} requires text ids on every item")
            if mode in ("audio_only", "text_and_audio") and item.features is None:
                raise ContractError(f"phase {phase} requires audio features on every item")


@dataclass
class TrainResult:
    records: list[tuple[int, str, float]]  # (step, phase, loss)
    steps_done: int
    aborted: bool = False
    abort_reason: str | None = None
    first_step_grad_norm: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [loss for _, _, loss in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1][2] if self.records else float("nan")


def write_loss_log(records: Sequence[tuple[int, str, float]], path) -> None:
    lines = ["step,phase,loss"]
    lines += [f"{step},{phase},{loss!r}" for step, phase, loss in records]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")


def train_phase(state: PipelineState, config: TrainConfig, dataset: Sequence) -> TrainResult:
    """Run one phase of Adam steps over the dataset.

    Batch order comes from a seeded shuffle, repeated per epoch. Any
    non-finite loss or gradient aborts before the step's update, leaving
    state at the last good weights.
    """
    phase = config.phase
    _check_dataset(phase, dataset)
    trainables = state.trainables(phase)
    frozen = [
        t for name, t in state.named_tensors().items()
        if name not in trainables
    ]
    # skip gradient work on frozen tensors for the duration of the phase
    for t in frozen:
        t.requires_grad = False
    try:
        return _run_phase(state, config, dataset, trainables)
    finally:
        for t in frozen:
            t.requires_grad = True


def _run_phase(state, config: TrainConfig, dataset, trainables) -> TrainResult:
    phase = config.phase
    optimizer = Adam(trainables, lr=config.learning_rate)
    shuffle_rng = substream(config.seed, f"shuffle.{phase}")
    dropout_rng = substream(config.seed, f"dropout.{phase}")
    order: list[int] = []
    records: list[tuple[int, str, float]] = []
    first_grad_norm = 0.0

    for step in range(1, config.max_steps + 1):
        while len(order) < config.batch_size:
            order.extend(shuffle_rng.permutation(len(dataset)).tolist())
        take, order = order[: config.batch_size], order[config.batch_size :]
        batch = [dataset[i] for i in take]
        try:
            loss = _batch_loss(state, config, batch, dropout_rng)
            T.backward(loss)
            grad_norm = optimizer.step()
        except NonFiniteError as e:
            logger.error("phase %s aborted at step %d: %s", phase, step, e)
            return TrainResult(records, step - 1, aborted=True, abort_reason=str(e),
                               first_step_grad_norm=first_grad_norm)
        if step == 1:
            first_grad_norm = grad_norm
        records.append((step, phase, float(loss.data)))
    return TrainResult(records, config.max_steps, first_step_grad_norm=first_grad_norm)


def _batch_loss(state: PipelineState, config: TrainConfig, batch, dropout_rng,
                training: bool = True) -> Tensor:
    if config.phase == "inject":
        ids, targets, loss_mask, pad_mask = _inject_batch(batch)
        out = state.model.forward(
            ids, adapters=state.adapters, pad_mask=pad_mask,
            training=training, dropout_rng=dropout_rng,
        )
        return lm_loss(out.logits, targets, loss_mask)

    mode = _PHASE_MODE[config.phase]
    scores = predict_phq_batch(
        state.model, state.head, _assemble_batch(state, batch, mode),
        adapters=state.adapters, training=training, dropout_rng=dropout_rng,
    )
    labels = T.constant(np.asarray([item.label for item in batch], dtype=_F32))
    diff = T.sub(scores, labels)
    return T.mean(T.mul(diff, diff))


def _assemble_batch(state: PipelineState, batch, mode: str) -> list[Tensor]:
    assembled = []
    for item in batch:
        emb_audio = None
        if mode in ("audio_only", "text_and_audio"):
            emb_audio = state.projector.project(item.features)
        text_ids = item.text_ids if mode in ("text_only", "text_and_audio") else None
        assembled.append(assemble(state.model, text_ids, emb_audio, mode))
    return assembled


def eval_phase_loss(state: PipelineState, config: TrainConfig, dataset: Sequence) -> float:
    """Loss over the whole dataset with dropout off (deterministic).

    Batch means are reweighted so the result equals the loss over the
    dataset as a whole: by active token count for the LM loss, by
    example count for the squared error.
    """
    _check_dataset(config.phase, dataset)
    total = 0.0
    denom = 0.0
    for start in range(0, len(dataset), config.batch_size):
        batch = list(dataset[start : start + config.batch_size])
        loss = _batch_loss(state, config, batch, dropout_rng=None, training=False)
        if config.phase == "inject":
            n = float(sum(sum(e.loss_mask) for e in batch))
        else:
            n = float(len(batch))
        total += float(loss.data) * n
        denom += n
    return total / denom


_PHASE_BY_MODE = {mode: phase for phase, mode in _PHASE_MODE.items()}


def predict_scores(
    state: PipelineState,
    examples: Sequence[ScoredExample],
    mode: str,
    batch_size: int = 8,
) -> list[float]:
    """Raw (unclamped) scores in input order, dropout off."""
    if mode not in _PHASE_BY_MODE:
        raise ConfigError(f"unknown scoring mode {mode!r}; expected one of {MODES}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    _check_dataset(_PHASE_BY_MODE[mode], examples)
    scores: list[float] = []
    for start in range(0, len(examples), batch_size):
        batch = list(examples[start : start + batch_size])
        out = predict_phq_batch(
            state.model, state.head, _assemble_batch(state, batch, mode),
            adapters=state.adapters,
        )
        scores.extend(float(v) for v in np.asarray(out.data).reshape(-1))
    return scores


def make_scored_examples(
    rows,
    mode: str,
    features_by_key=None,
) -> list[ScoredExample]:
    """Build score-phase items from segment rows.

    rows: SegmentRow-like objects with participant_id, segment_index,
    text, phq8. For audio-bearing modes, features_by_key maps
    (participant_id, segment_index) to AudioFeatures.
    """
    items = []
    for row in rows:
        text_ids = None
        if mode in ("text_only", "text_and_audio"):
            text_ids = codec.encode(render_text_prompt(row.text))
        features = None
        if mode in ("audio_only", "text_and_audio"):
            if features_by_key is None:
                raise ContractError("audio-bearing mode needs a feature lookup")
            key = (row.participant_id, row.segment_index)
            if key not in features_by_key:
                raise ContractError(f"no audio features for segment {key}")
            features = features_by_key[key]
        items.append(ScoredExample(float(row.phq8), text_ids, features))
    return items
