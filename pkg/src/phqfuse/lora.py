"""Low-rank adapters for the attention projections.

Base weights stay frozen; each adapted projection adds a rank-r update
scaling * B(A x). B starts at zero, so a fresh adapter leaves the model's
outputs bit-identical to the base and training moves only the small
matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

_F32 = np.float32
_ALLOWED_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    target_modules: tuple[str, ...] = ("q_proj", "v_proj")

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.r}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.lora_dropout}")
        bad = [t for t in self.target_modules if t not in _ALLOWED_TARGETS]
        if bad:
            raise ConfigError(f"unknown target modules {bad}; allowed: {list(_ALLOWED_TARGETS)}")
        if not self.target_modules:
            raise ConfigError("target_modules is empty")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "target_modules": list(self.target_modules),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        d = dict(d)
        d["target_modules"] = tuple(d["target_modules"])
        return cls(**d)


class LoraAdapter:
    """One projection's low-rank update: A is (r, d_in), B is (d_out, r)."""

    def __init__(self, cfg: LoraConfig, d_in: int, d_out: int, rng: np.random.Generator):
        self.cfg = cfg
        self.A = Tensor(rng.normal(0.0, 0.02, size=(cfg.r, d_in)).astype(_F32), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, cfg.r), dtype=_F32), requires_grad=True)
        self.merged = False

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        """The explicit update scaling * B @ A, shape (d_out, d_in)."""
        return self.cfg.scaling * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))

    def apply(
        self,
        base_out: Tensor,
        x: Tensor,
        training: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """base_out + scaling * dropout(x) A^T B^T for (..., d_in) input."""
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"adapter expects input dim {self.d_in}, got {x.shape}"
            )
        if self.merged:
            raise ContractError("adapter already merged into its base weight")
        h = x
        p = self.cfg.lora_dropout
        if training and p > 0.0:
            if dropout_rng is None:
                raise ContractError("training-mode adapter needs a dropout rng")
            keep = (dropout_rng.random(x.shape) >= p).astype(_F32) / _F32(1.0 - p)
            h = T.mul(h, T.constant(keep))
        low = T.matmul(h, T.transpose(self.A))
        up = T.matmul(low, T.transpose(self.B))
        return T.add(base_out, T.mul(up, float(self.cfg.scaling)))


def attach_adapters(model, cfg: LoraConfig, rng: np.random.Generator) -> dict[str, LoraAdapter]:
    """Build adapters for every targeted projection, keyed layers.{i}.{target}."""
    d = model.cfg.d_t
    adapters: dict[str, LoraAdapter] = {}
    for i in range(model.cfg.n_layers):
        for target in cfg.target_modules:
            adapters[f"layers.{i}.{target}"] = LoraAdapter(cfg, d, d, rng)
    return adapters


def named_adapter_tensors(adapters: dict[str, LoraAdapter]) -> dict[str, Tensor]:
    """Checkpoint names: layers.{i}.{target}.lora_A / .lora_B."""
    named: dict[str, Tensor] = {}
    for key in sorted(adapters):
        named[f"{key}.lora_A"] = adapters[key].A
        named[f"{key}.lora_B"] = adapters[key].B
    return named


def trainable_parameters(adapters: dict[str, LoraAdapter]) -> dict[str, Tensor]:
    """The adapter matrices; base weights are deliberately absent."""
    return named_adapter_tensors(adapters)


def merge(weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter into its base weight in place: W' = W + delta.

    The base stores weights (d_in, d_out) for left-multiplying activations,
    so the update lands transposed. A second merge of the same adapter is
    an error rather than a silent double update.
    """
    if adapter.merged:
        raise ContractError("adapter already merged into its base weight")
    if weight.shape != (adapter.d_in, adapter.d_out):
        raise DimensionError(
            f"weight shape {weight.shape} does not match adapter ({adapter.d_in}, {adapter.d_out})"
        )
    weight.data = (weight.data.astype(np.float64) + adapter.delta().T).astype(_F32)
    adapter.merged = True
    return weight


def merge_model(model, adapters: dict[str, LoraAdapter]) -> None:
    """Merge every adapter into its projection on the owning layer."""
    for key, adapter in adapters.items():
        parts = key.split(".")
        layer = model.layers[int(parts[1])]
        merge(getattr(layer, parts[2]), adapter)
