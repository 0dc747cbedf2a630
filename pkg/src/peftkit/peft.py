"""LoRA and DoRA adapters: attachment, forward semantics, merging, accounting.

An adapted layer wraps its frozen base (dense or NF4-quantized) and adds the
trainable low-rank path.  At initialization B is zero (and DoRA's magnitude
equals the base column norms), so a freshly adapted model is functionally
identical to its base.  Merging folds the adapter back into a plain dense
layer; a merged layer no longer has an adapter and cannot be merged again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .nn import (ADAPTER_TARGET_SETS, ArchSpec, ClassifierHead, HeadSpec, Initializer,
                 Linear, Model, head_param_count, model_param_count)
from .quantize import QuantizedLinear
from .tensor import Tensor

# Rank/alpha presets evaluated in the experiment matrix (alpha = 2*rank).
RANK_ALPHA_PRESETS = ((8, 16.0), (16, 32.0), (64, 128.0))


@dataclass(frozen=True)
class PeftConfig:
    method: str                 # "lora" | "dora"
    targets: str                # "q_proj_only" | "all_linear"
    rank: int
    alpha: float
    dropout: float = 0.05
    bias_mode: str = "none"

    def __post_init__(self):
        if self.method not in ("lora", "dora"):
            raise ConfigError(f"unknown peft method {self.method!r}")
        if self.targets not in ADAPTER_TARGET_SETS:
            raise ConfigError(
                f"unknown target set {self.targets!r}; choose from {sorted(ADAPTER_TARGET_SETS)}")
        if self.rank <= 0:
            raise ConfigError("rank must be a positive integer")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.bias_mode != "none":
            raise ConfigError("only bias_mode='none' is supported")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraAdapter:
    """Trainable factors: A (r x d_in, fan-in uniform), B (d_out x r, zeros)."""

    def __init__(self, d_in: int, d_out: int, cfg: PeftConfig, init: Initializer):
        self.rank = cfg.rank
        self.alpha = cfg.alpha
        self.dropout = cfg.dropout
        self.A = Tensor(init.fan_in_uniform((cfg.rank, d_in), d_in), requires_grad=True)
        self.B = Tensor(init.zeros((d_out, cfg.rank)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> dict[str, Tensor]:
        return {"lora_A": self.A, "lora_B": self.B}


class DoraAdapter(LoraAdapter):
    """LoRA factors plus a trainable per-output magnitude vector."""

    def __init__(self, d_in: int, d_out: int, cfg: PeftConfig, init: Initializer,
                 base_weight: np.ndarray):
        super().__init__(d_in, d_out, cfg, init)
        # same expression the forward pass uses, so the init decomposition is exact
        w = base_weight.astype(init.dtype, copy=False)
        norms = np.sqrt(np.sum(w * w, axis=1))
        self.magnitude = Tensor(norms.astype(init.dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"lora_A": self.A, "lora_B": self.B, "magnitude": self.magnitude}


BaseLayer = Linear | QuantizedLinear


class LoraLinear:
    """y = base(x) + (alpha/r) * dropout(x) @ A^T @ B^T; grads reach A,B only."""

    def __init__(self, base: BaseLayer, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def param_count(self) -> int:
        return self.base.param_count + sum(p.size for p in self.adapter.parameters().values())

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        ad = self.adapter
        y = self.base.forward(x, training, rng)
        xd = T.dropout(x, ad.dropout, rng, training)
        delta = T.matmul(T.matmul(xd, T.transpose(ad.A, (1, 0))),
                         T.transpose(ad.B, (1, 0)))
        return T.add(y, T.mul(delta, ad.scaling))

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.base.parameters())
        params.update(self.adapter.parameters())
        return params


class DoraLinear:
    """Weight-decomposed adapter: directions from W0 + (alpha/r) B A, columns
    renormalized and rescaled by the trainable magnitude."""

    def __init__(self, base: BaseLayer, adapter: DoraAdapter):
        self.base = base
        self.adapter = adapter
        # dense copy cached at attach time (dequantized if the base is NF4)
        self._w0 = np.array(base.dense_weight(), copy=True)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def param_count(self) -> int:
        return self.base.param_count + sum(p.size for p in self.adapter.parameters().values())

    def _effective_weight_t(self, dtype) -> Tensor:
        """Transposed effective weight (d_in, d_out) as a differentiable graph."""
        ad = self.adapter
        w0 = Tensor(self._w0.astype(dtype, copy=False))
        v = T.add(w0, T.mul(T.matmul(ad.B, ad.A), ad.scaling))
        norms = T.sqrt(T.tsum(T.mul(v, v), axis=1))
        if np.any(norms.data == 0.0):
            raise NumericError("DoRA direction has a zero-norm column")
        ratio = T.div(ad.magnitude, norms)
        return T.mul(T.transpose(v, (1, 0)), ratio)

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        wt = self._effective_weight_t(x.dtype)
        w0t = Tensor(self._w0.T.astype(x.dtype, copy=False))
        y = self.base.forward(x, training, rng)
        xd = T.dropout(x, self.adapter.dropout, rng, training)
        # correction path sees dropout, as in LoRA; eval mode is x @ W'^T + b
        delta = T.matmul(xd, T.sub(wt, w0t))
        return T.add(y, delta)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.base.parameters())
        params.update(self.adapter.parameters())
        return params


AdaptedLayer = LoraLinear | DoraLinear


def attach_adapters(model: Model, cfg: PeftConfig, rng: np.random.Generator,
                    dtype=np.float32) -> Model:
    """Attach an adapter to every layer in the chosen target set.

    Base weights (plain or quantized) become non-trainable; the adapters are
    the only trainable parameters introduced.
    """
    blocks = model.adapter_blocks()
    if not blocks:
        raise ConfigError(f"model kind {model.kind!r} has no adapter targets")
    targets = ADAPTER_TARGET_SETS[cfg.targets]
    init = Initializer(rng, dtype)
    for p in model.parameters().values():
        p.requires_grad = False
    for block in blocks:
        for name in targets:
            base = block.linears[name]
            if isinstance(base, (LoraLinear, DoraLinear)):
                raise ContractError(f"{name} already has an adapter attached")
            if cfg.method == "lora":
                adapter = LoraAdapter(base.in_features, base.out_features, cfg, init)
                block.linears[name] = LoraLinear(base, adapter)
            else:
                adapter = DoraAdapter(base.in_features, base.out_features, cfg, init,
                                      base.dense_weight())
                block.linears[name] = DoraLinear(base, adapter)
    return model


def lora_forward(x: Tensor, base_layer: BaseLayer, adapter: LoraAdapter,
                 training: bool = False, rng=None) -> Tensor:
    return LoraLinear(base_layer, adapter).forward(x, training, rng)


def dora_forward(x: Tensor, base_layer: BaseLayer, adapter: DoraAdapter,
                 training: bool = False, rng=None) -> Tensor:
    return DoraLinear(base_layer, adapter).forward(x, training, rng)


def merged_weight(layer: AdaptedLayer) -> np.ndarray:
    """Dense merged weight of an adapted layer, computed in float64."""
    ad = layer.adapter
    w0 = np.asarray(layer.base.dense_weight() if isinstance(layer, LoraLinear)
                    else layer._w0, dtype=np.float64)
    v = w0 + ad.scaling * (ad.B.data.astype(np.float64) @ ad.A.data.astype(np.float64))
    if isinstance(layer, DoraLinear):
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0.0):
            raise NumericError("DoRA direction has a zero-norm column")
        v = v * (ad.magnitude.data.astype(np.float64) / norms)[:, None]
    return v


def merge(layer: AdaptedLayer) -> Linear:
    """Fold the adapter into a plain dense layer (same bias, no adapter left)."""
    if not isinstance(layer, (LoraLinear, DoraLinear)):
        raise ContractError("merge requires a layer with an attached adapter")
    dtype = layer.adapter.A.dtype
    w = merged_weight(layer).astype(dtype)
    bias = layer.base.bias
    return Linear(Tensor(w), bias)


def merge_all(model: Model) -> Model:
    for block in model.adapter_blocks():
        for name, layer in list(block.linears.items()):
            if isinstance(layer, (LoraLinear, DoraLinear)):
                block.linears[name] = merge(layer)
    return model


def count_trainable(model: Model, head: ClassifierHead | None = None
                    ) -> tuple[int, float]:
    """(trainable parameter count, fraction of total including frozen weights)."""
    trainable = 0
    total = 0
    for obj in [model] + ([head] if head is not None else []):
        for p in obj.parameters().values():
            total += p.size
            if p.requires_grad:
                trainable += p.size
    # quantized bases expose only their bias as a Tensor; add the logical
    # weight count so the trainable fraction is taken over the full model
    total += _quantized_weight_count(model)
    return trainable, trainable / total if total else 0.0


def _quantized_weight_count(model: Model) -> int:
    count = 0
    for block in model.adapter_blocks():
        for layer in block.linears.values():
            base = layer.base if isinstance(layer, (LoraLinear, DoraLinear)) else layer
            if isinstance(base, QuantizedLinear):
                count += base.shape[0] * base.shape[1]
    return count


@dataclass(frozen=True)
class PeftAccounting:
    adapter_params: int
    magnitude_params: int
    head_params: int
    backbone_params: int
    per_target: dict[str, int]

    @property
    def trainable_params(self) -> int:
        return self.adapter_params + self.magnitude_params + self.head_params

    @property
    def adapter_fraction(self) -> float:
        return (self.adapter_params + self.magnitude_params) / self.total_params

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params

    @property
    def total_params(self) -> int:
        return self.backbone_params + self.head_params


def peft_accounting(arch: ArchSpec, cfg: PeftConfig | None,
                    head: HeadSpec | None = None) -> PeftAccounting:
    """Closed-form adapter/head accounting; works for the never-instantiated
    dinov3-like preset.  Adapter cost per layer is r*(d_in+d_out), plus d_out
    magnitudes for DoRA."""
    if arch.kind != "vit":
        raise ConfigError("adapter accounting is defined for transformer backbones")
    d, m, L = arch.width, arch.mlp_hidden, arch.depth
    dims = {"q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
            "mlp_up": (d, m), "mlp_down": (m, d)}
    per_target: dict[str, int] = {}
    adapter = 0
    magnitude = 0
    if cfg is not None:
        for name in ADAPTER_TARGET_SETS[cfg.targets]:
            d_in, d_out = dims[name]
            n = L * cfg.rank * (d_in + d_out)
            mags = L * d_out if cfg.method == "dora" else 0
            per_target[name] = n + mags
            adapter += n
            magnitude += mags
    head_n = head_param_count(head) if head is not None else 0
    return PeftAccounting(adapter, magnitude, head_n, model_param_count(arch), per_target)
