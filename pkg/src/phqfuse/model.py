"""Micro decoder-only transformer of the LLaMA family.

Pre-norm blocks with RMSNorm, rotary position embeddings on queries and
keys, SwiGLU feedforward, and a byte-level LM head. The forward pass
accepts either token ids or a precomputed embedding matrix, so projected
audio frames can bypass the token embedding table. Low-rank adapters,
when supplied, are applied to the attention projections they target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

_F32 = np.float32


@dataclass(frozen=True)
class ModelConfig:
    d_t: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 176
    vocab_size: int = codec.VOCAB_SIZE
    max_seq_len: int = 512
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self):
        if self.d_t % self.n_heads != 0:
            raise ConfigError(
                f"hidden dim {self.d_t} not divisible by n_heads {self.n_heads}"
            )
        if self.d_head % 2 != 0:
            raise ConfigError(f"head dim {self.d_head} must be even for rotation pairs")

    @property
    def d_head(self) -> int:
        return self.d_t // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_t": self.d_t,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rope_theta": self.rope_theta,
            "rms_eps": self.rms_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain, normalizing the last axis."""
    ms = T.mean(T.mul(x, x), axis=-1, keepdims=True)
    inv = T.sqrt(T.add(ms, float(eps)))
    return T.mul(T.div(x, inv), gain)


def rope_tables(positions, d_head: int, theta: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), d_head/2)."""
    if d_head % 2 != 0:
        raise ConfigError(f"head dim {d_head} must be even for rotation pairs")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    idx = np.arange(d_head // 2, dtype=np.float64)
    angles = pos * theta ** (-2.0 * idx / d_head)
    return np.cos(angles).astype(_F32), np.sin(angles).astype(_F32)


def rope(x: Tensor, positions, theta: float = 10000.0) -> Tensor:
    """Rotate (even, odd) feature pairs by position-dependent angles.

    x has shape (..., seq, d_head); positions has length seq. The backward
    pass applies the inverse rotation, so vector norms are preserved in
    both directions.
    """
    d_head = x.shape[-1]
    cos, sin = rope_tables(positions, d_head, theta)
    if len(cos) != x.shape[-2]:
        raise ContractError(
            f"positions length {len(cos)} does not match sequence length {x.shape[-2]}"
        )
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def bwd(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        T._accum(x, gx)

    return T.make_op(out, (x,), bwd, "rope")


def lm_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over unmasked target positions.

    logits: (..., seq, vocab); targets: integer array (..., seq);
    loss_mask: boolean array (..., seq) marking positions that count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ContractError(
            f"targets/mask shape {targets.shape}/{mask.shape} does not match logits {logits.shape}"
        )
    n_active = int(mask.sum())
    if n_active == 0:
        raise ContractError("loss mask selects no positions")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    ex = np.exp(x - m)
    denom = ex.sum(axis=-1, keepdims=True)
    log_probs = (x - m) - np.log(denom)
    target_logp = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss_value = -(target_logp * mask).sum(dtype=np.float64) / n_active

    def bwd(g: np.ndarray) -> None:
        if not logits.requires_grad:
            return
        probs = ex / denom
        grad = probs.copy()
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        grad *= (mask[..., None] / n_active).astype(_F32)
        T._accum(logits, grad * g)

    return T.make_op(np.float32(loss_value), (logits,), bwd, "lm_loss")


class LayerWeights:
    """One transformer block's parameters.

    Projection matrices are stored (d_in, d_out) so activations multiply
    on the left. q_proj and v_proj are the adapter attachment points.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, f = cfg.d_t, cfg.d_ff

        def w(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)).astype(_F32), requires_grad=True)

        self.attn_norm = Tensor(np.ones(d, dtype=_F32), requires_grad=True)
        self.q_proj = w(d, d)
        self.k_proj = w(d, d)
        self.v_proj = w(d, d)
        self.o_proj = w(d, d)
        self.ffn_norm = Tensor(np.ones(d, dtype=_F32), requires_grad=True)
        self.gate = w(d, f)
        self.up = w(d, f)
        self.down = w(f, d)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.attn_norm.gain": self.attn_norm,
            f"{prefix}.q_proj.weight": self.q_proj,
            f"{prefix}.k_proj.weight": self.k_proj,
            f"{prefix}.v_proj.weight": self.v_proj,
            f"{prefix}.o_proj.weight": self.o_proj,
            f"{prefix}.ffn_norm.gain": self.ffn_norm,
            f"{prefix}.ffn.gate.weight": self.gate,
            f"{prefix}.ffn.up.weight": self.up,
            f"{prefix}.ffn.down.weight": self.down,
        }


@dataclass
class ForwardOut:
    hidden: Tensor  # (B, S, d_t) or (S, d_t); post final norm
    logits: Tensor  # (B, S, vocab) or (S, vocab)
    attention: list | None = None  # per layer, (B, H, S, S) numpy arrays


class MicroLM:
    """The decoder-only language model plus its embedding and LM head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embedding = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_t)).astype(_F32),
            requires_grad=True,
        )
        self.layers = [LayerWeights(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = Tensor(np.ones(cfg.d_t, dtype=_F32), requires_grad=True)
        self.lm_head = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.d_t, cfg.vocab_size)).astype(_F32),
            requires_grad=True,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"embedding.weight": self.embedding}
        for i, layer in enumerate(self.layers):
            named.update(layer.named_tensors(f"layers.{i}"))
        named["final_norm.gain"] = self.final_norm
        named["lm_head.weight"] = self.lm_head
        return named

    def embed(self, ids) -> Tensor:
        """Embedding-table rows for a (S,) or (B, S) id array."""
        return T.embedding_lookup(self.embedding, np.asarray(ids, dtype=np.int64))

    def _projection(self, name: str, layer_index: int, layer: LayerWeights,
                    x: Tensor, adapters, training: bool, dropout_rng) -> Tensor:
        weight = {"q_proj": layer.q_proj, "k_proj": layer.k_proj,
                  "v_proj": layer.v_proj, "o_proj": layer.o_proj}[name]
        base = T.matmul(x, weight)
        if adapters is None:
            return base
        adapter = adapters.get(f"layers.{layer_index}.{name}")
        if adapter is None:
            return base
        return adapter.apply(base, x, training=training, dropout_rng=dropout_rng)

    def _attention_mask(self, batch: int, seq: int, pad_mask) -> np.ndarray:
        """Additive mask (B, 1, S, S): causal, plus key-side padding."""
        causal = np.triu(np.full((seq, seq), -1e9, dtype=_F32), k=1)
        full = np.broadcast_to(causal, (batch, 1, seq, seq)).copy()
        if pad_mask is not None:
            pad = np.asarray(pad_mask, dtype=bool)
            if pad.shape != (batch, seq):
                raise ContractError(
                    f"pad mask shape {pad.shape} does not match batch {(batch, seq)}"
                )
            full = full + np.where(pad, 0.0, -1e9).astype(_F32)[:, None, None, :]
        return full

    def forward(
        self,
        inputs,
        adapters: dict | None = None,
        pad_mask=None,
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
        return_attention: bool = False,
    ) -> ForwardOut:
        """Run the stack over token ids or embeddings.

        inputs: (S,) / (B, S) integer ids, or a (S, d_t) / (B, S, d_t)
        embedding Tensor. pad_mask, when given, is True at real positions.
        Hidden state at position i depends only on inputs at positions <= i.
        """
        cfg = self.cfg
        if isinstance(inputs, Tensor):
            x = inputs
        else:
            arr = np.asarray(inputs)
            if np.issubdtype(arr.dtype, np.integer):
                x = self.embed(arr)
            else:
                x = Tensor(arr)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != cfg.d_t:
            raise ContractError(f"expected (B, S, {cfg.d_t}) embeddings, got {x.shape}")
        batch, seq, _ = x.shape
        if seq > cfg.max_seq_len:
            raise ContractError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if squeeze and pad_mask is not None:
            pad_mask = np.asarray(pad_mask, dtype=bool).reshape(1, seq)

        positions = np.arange(seq)
        mask = T.constant(self._attention_mask(batch, seq, pad_mask))
        scale = 1.0 / float(np.sqrt(cfg.d_head))
        heads, d_head = cfg.n_heads, cfg.d_head
        attn_maps: list[np.ndarray] | None = [] if return_attention else None

        for li, layer in enumerate(self.layers):
            h = rmsnorm(x, layer.attn_norm, cfg.rms_eps)
            q = self._projection("q_proj", li, layer, h, adapters, training, dropout_rng)
            k = self._projection("k_proj", li, layer, h, adapters, training, dropout_rng)
            v = self._projection("v_proj", li, layer, h, adapters, training, dropout_rng)

            def split(t):
                t = T.reshape(t, (batch, seq, heads, d_head))
                t = T.transpose(t, (0, 2, 1, 3))
                return T.reshape(t, (batch * heads, seq, d_head))

            q, k, v = split(q), split(k), split(v)
            q = rope(q, positions, cfg.rope_theta)
            k = rope(k, positions, cfg.rope_theta)
            scores = T.mul(T.matmul(q, T.transpose(k)), scale)
            scores = T.reshape(scores, (batch, heads, seq, seq))
            scores = T.add(scores, mask)
            probs = T.softmax_rows(scores)
            if attn_maps is not None:
                attn_maps.append(probs.data.copy())
            ctx = T.matmul(T.reshape(probs, (batch * heads, seq, seq)), v)
            ctx = T.reshape(ctx, (batch, heads, seq, d_head))
            ctx = T.transpose(ctx, (0, 2, 1, 3))
            ctx = T.reshape(ctx, (batch, seq, cfg.d_t))
            x = T.add(x, self._projection("o_proj", li, layer, ctx, adapters, training, dropout_rng))

            h2 = rmsnorm(x, layer.ffn_norm, cfg.rms_eps)
            gated = T.mul(T.silu(T.matmul(h2, layer.gate)), T.matmul(h2, layer.up))
            x = T.add(x, T.matmul(gated, layer.down))

        hidden = rmsnorm(x, self.final_norm, cfg.rms_eps)
        logits = T.matmul(hidden, self.lm_head)
        if squeeze:
            hidden = T.reshape(hidden, hidden.shape[1:])
            logits = T.reshape(logits, logits.shape[1:])
        return ForwardOut(hidden=hidden, logits=logits, attention=attn_maps)

    def generate(
        self,
        prompt_ids: list[int],
        max_new_tokens: int = 64,
        temperature: float = 0.8,
        rng: np.random.Generator | None = None,
        adapters: dict | None = None,
    ) -> list[int]:
        """Sample a continuation; greedy when temperature == 0.

        The prefix is re-run each step (no KV cache); sequences here are
        short. Stops at EOS or when the context window fills.
        """
        ids = list(prompt_ids)
        if len(ids) >= self.cfg.max_seq_len:
            raise ContractError(
                f"prompt length {len(ids)} leaves no room in context of {self.cfg.max_seq_len}"
            )
        out: list[int] = []
        for _ in range(max_new_tokens):
            result = self.forward(np.asarray(ids, dtype=np.int64), adapters=adapters)
            logits = result.logits.data[-1].astype(np.float64)
            if temperature <= 0.0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z -= z.max()
                p = np.exp(z)
                p /= p.sum()
                if rng is None:
                    rng = np.random.default_rng(0)
                nxt = int(rng.choice(len(p), p=p))
            if nxt == codec.EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
            if len(ids) >= self.cfg.max_seq_len:
                break
        return out
