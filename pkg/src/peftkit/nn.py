"""Model zoo: tiny Vision Transformer, residual CNN baseline, classifier head.

Everything is built from peftkit.tensor primitives.  Transformer blocks keep
their linear layers in an addressable dict so adapter attachment can target
either ``{q_proj}`` or all six linears.  The ``dinov3_like`` arch preset
exists purely for closed-form parameter accounting and is never instantiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

ADAPTER_TARGET_SETS = {
    "q_proj_only": ("q_proj",),
    "all_linear": ("q_proj", "k_proj", "v_proj", "o_proj", "mlp_up", "mlp_down"),
}


@dataclass(frozen=True)
class ArchSpec:
    kind: str                  # "vit" | "resnet_cnn"
    width: int                 # embedding dim (ViT) or stem channels (CNN)
    depth: int                 # transformer blocks, or residual blocks per stage
    heads: int = 1
    mlp_hidden: int = 0
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 9

    def __post_init__(self):
        if self.kind not in ("vit", "resnet_cnn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.kind == "vit":
            if self.width % self.heads != 0:
                raise ConfigError(
                    f"width {self.width} not divisible by heads {self.heads}")
            if self.image_size % self.patch_size != 0:
                raise ConfigError(
                    f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
            if self.mlp_hidden <= 0:
                raise ConfigError("vit requires mlp_hidden > 0")

    @property
    def tokens(self) -> int:
        # patch tokens + 1 CLS
        return (self.image_size // self.patch_size) ** 2 + 1

    @property
    def feature_dim(self) -> int:
        if self.kind == "vit":
            return self.width
        return self.width * 8  # four stages, channels double per stage


def arch_preset(name: str) -> ArchSpec:
    presets = {
        # ViT-Small: patch 16, embedding dim 384
        "vit_small": ArchSpec("vit", 384, 12, heads=6, mlp_hidden=1536,
                              patch_size=16, image_size=224, num_classes=9),
        # Accounting-only stand-in for a 6.7B frozen backbone; mlp width chosen
        # so the closed-form total lands at ~6.7B (never built as weights).
        "dinov3_like": ArchSpec("vit", 4096, 40, heads=32, mlp_hidden=12288,
                                patch_size=16, image_size=224, num_classes=9),
        "vit_toy": ArchSpec("vit", 32, 2, heads=4, mlp_hidden=64,
                            patch_size=8, image_size=32, num_classes=9),
        "cnn_toy": ArchSpec("resnet_cnn", 8, 2, image_size=32, num_classes=9),
        "resnet18_like": ArchSpec("resnet_cnn", 64, 2, image_size=224, num_classes=9),
    }
    if name not in presets:
        raise ConfigError(f"unknown arch preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    hidden1: int
    hidden2: int
    num_classes: int
    dropout1: float = 0.30
    dropout2: float = 0.15


def head_preset() -> HeadSpec:
    """Full-scale MLP head (4096 -> 1024 -> 512 -> 9, 0.30/0.15 dropout) for
    frozen 4096-d backbone features."""
    return HeadSpec(4096, 1024, 512, 9, 0.30, 0.15)


def toy_head(in_dim: int, num_classes: int = 9) -> HeadSpec:
    return HeadSpec(in_dim, max(2 * in_dim, 16), max(in_dim, 8), num_classes)


# ---------------------------------------------------------------------------
# initialization

class Initializer:
    """Draws parameters in a fixed order from one deterministic stream."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)

    def fan_in_uniform(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        scale = 1.0 / np.sqrt(fan_in)
        return ((self.rng.random(shape) * 2.0 - 1.0) * scale).astype(self.dtype)

    def small_uniform(self, shape: tuple[int, ...], scale: float = 0.02) -> np.ndarray:
        return ((self.rng.random(shape) * 2.0 - 1.0) * scale).astype(self.dtype)

    def zeros(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


# ---------------------------------------------------------------------------
# layers

class Linear:
    """Dense layer: y = x @ W^T + b, weight stored (out, in)."""

    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def build(cls, d_in: int, d_out: int, init: Initializer, bias: bool = True) -> "Linear":
        w = Tensor(init.fan_in_uniform((d_out, d_in), d_in), requires_grad=True)
        b = Tensor(init.zeros((d_out,)), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def param_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def dense_weight(self) -> np.ndarray:
        return self.weight.data

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def build(cls, d: int, init: Initializer) -> "LayerNorm":
        return cls(Tensor(init.ones((d,)), requires_grad=True),
                   Tensor(init.zeros((d,)), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class TransformerBlock:
    """Pre-LN block; `linears` holds the two addressable adapter target sets."""

    def __init__(self, d: int, heads: int, mlp_hidden: int, init: Initializer):
        self.d = d
        self.heads = heads
        self.ln1 = LayerNorm.build(d, init)
        self.ln2 = LayerNorm.build(d, init)
        self.linears: dict[str, object] = {
            "q_proj": Linear.build(d, d, init),
            "k_proj": Linear.build(d, d, init),
            "v_proj": Linear.build(d, d, init),
            "o_proj": Linear.build(d, d, init),
            "mlp_up": Linear.build(d, mlp_hidden, init),
            "mlp_down": Linear.build(mlp_hidden, d, init),
        }

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        hd = d // h
        xn = self.ln1.forward(x)
        q = self.linears["q_proj"].forward(xn, training, rng)
        k = self.linears["k_proj"].forward(xn, training, rng)
        v = self.linears["v_proj"].forward(xn, training, rng)

        def split_heads(z: Tensor) -> Tensor:
            return T.transpose(T.reshape(z, (b, t, h, hd)), (0, 2, 1, 3))

        qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax_rows(scores)
        ctx = T.matmul(attn, vh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, self.linears["o_proj"].forward(ctx, training, rng))

        xn2 = self.ln2.forward(x)
        up = T.gelu(self.linears["mlp_up"].forward(xn2, training, rng))
        x = T.add(x, self.linears["mlp_down"].forward(up, training, rng))
        return x

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for key, p in self.ln1.parameters().items():
            params[f"ln1.{key}"] = p
        for key, p in self.ln2.parameters().items():
            params[f"ln2.{key}"] = p
        for name, layer in self.linears.items():
            for key, p in layer.parameters().items():
                params[f"{name}.{key}"] = p
        return params


class VisionTransformer:
    kind = "vit"

    def __init__(self, spec: ArchSpec, init: Initializer):
        d = spec.width
        p = spec.patch_size
        self.spec = spec
        self.patch_proj = Linear.build(3 * p * p, d, init)
        self.cls_token = Tensor(init.small_uniform((1, 1, d)), requires_grad=True)
        self.pos_emb = Tensor(init.small_uniform((1, spec.tokens, d)), requires_grad=True)
        self.blocks = [TransformerBlock(d, spec.heads, spec.mlp_hidden, init)
                       for _ in range(spec.depth)]
        self.final_norm = LayerNorm.build(d, init)

    def forward_features(self, images: Tensor, training: bool = False, rng=None) -> Tensor:
        s = self.spec
        b, c, hh, ww = images.shape
        if (c, hh, ww) != (3, s.image_size, s.image_size):
            raise ShapeError(
                f"expected images (B,3,{s.image_size},{s.image_size}), got {images.shape}")
        p = s.patch_size
        n = s.image_size // p
        x = T.reshape(images, (b, 3, n, p, n, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, n * n, 3 * p * p))
        x = self.patch_proj.forward(x, training, rng)
        cls = T.broadcast_to(self.cls_token, (b, 1, s.width))
        x = T.concat([cls, x], axis=1)
        x = T.add(x, T.broadcast_to(self.pos_emb, (b, s.tokens, s.width)))
        for block in self.blocks:
            x = block.forward(x, training, rng)
        x = self.final_norm.forward(x)
        return T.reshape(T.narrow(x, 1, 0, 1), (b, s.width))

    def parameters(self) -> dict[str, Tensor]:
        params = {"cls_token": self.cls_token, "pos_emb": self.pos_emb}
        for key, p in self.patch_proj.parameters().items():
            params[f"patch_proj.{key}"] = p
        for i, block in enumerate(self.blocks):
            for key, p in block.parameters().items():
                params[f"blocks.{i}.{key}"] = p
        for key, p in self.final_norm.parameters().items():
            params[f"final_norm.{key}"] = p
        return params

    def adapter_blocks(self) -> list[TransformerBlock]:
        return self.blocks


class ResidualBlock:
    def __init__(self, c_in: int, c_out: int, stride: int, init: Initializer):
        self.stride = stride
        self.w1 = Tensor(init.fan_in_uniform((c_out, c_in, 3, 3), c_in * 9), requires_grad=True)
        self.b1 = Tensor(init.zeros((c_out,)), requires_grad=True)
        self.w2 = Tensor(init.fan_in_uniform((c_out, c_out, 3, 3), c_out * 9), requires_grad=True)
        self.b2 = Tensor(init.zeros((c_out,)), requires_grad=True)
        if stride != 1 or c_in != c_out:
            self.wskip = Tensor(init.fan_in_uniform((c_out, c_in, 1, 1), c_in), requires_grad=True)
            self.bskip = Tensor(init.zeros((c_out,)), requires_grad=True)
        else:
            self.wskip = None
            self.bskip = None

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv2d(x, self.w1, self.b1, stride=self.stride, padding=1))
        h = T.conv2d(h, self.w2, self.b2, stride=1, padding=1)
        skip = x if self.wskip is None else T.conv2d(x, self.wskip, self.bskip,
                                                     stride=self.stride, padding=0)
        return T.relu(T.add(h, skip))

    def parameters(self) -> dict[str, Tensor]:
        params = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.wskip is not None:
            params["wskip"] = self.wskip
            params["bskip"] = self.bskip
        return params


class ResidualCnn:
    """Four-stage residual CNN; global average pooled features."""

    kind = "resnet_cnn"

    def __init__(self, spec: ArchSpec, init: Initializer):
        self.spec = spec
        w = spec.width
        self.stem_w = Tensor(init.fan_in_uniform((w, 3, 3, 3), 27), requires_grad=True)
        self.stem_b = Tensor(init.zeros((w,)), requires_grad=True)
        self.stages: list[list[ResidualBlock]] = []
        c_in = w
        for stage in range(4):
            c_out = w * (2 ** stage)
            blocks = []
            for i in range(spec.depth):
                stride = 2 if (i == 0 and stage > 0) else 1
                blocks.append(ResidualBlock(c_in, c_out, stride, init))
                c_in = c_out
            self.stages.append(blocks)

    def forward_features(self, images: Tensor, training: bool = False, rng=None) -> Tensor:
        s = self.spec
        if images.shape[1:] != (3, s.image_size, s.image_size):
            raise ShapeError(
                f"expected images (B,3,{s.image_size},{s.image_size}), got {images.shape}")
        x = T.relu(T.conv2d(images, self.stem_w, self.stem_b, stride=1, padding=1))
        for blocks in self.stages:
            for block in blocks:
                x = block.forward(x)
        return T.tmean(x, axis=(2, 3))

    def parameters(self) -> dict[str, Tensor]:
        params = {"stem_w": self.stem_w, "stem_b": self.stem_b}
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                for key, p in block.parameters().items():
                    params[f"stages.{si}.{bi}.{key}"] = p
        return params

    def adapter_blocks(self) -> list:
        return []


class ClassifierHead:
    """Three-layer MLP with ReLU activations and two dropout stages."""

    def __init__(self, spec: HeadSpec, init: Initializer):
        self.spec = spec
        self.fc1 = Linear.build(spec.in_dim, spec.hidden1, init)
        self.fc2 = Linear.build(spec.hidden1, spec.hidden2, init)
        self.fc3 = Linear.build(spec.hidden2, spec.num_classes, init)

    def forward(self, feats: Tensor, training: bool = False, rng=None) -> Tensor:
        h = T.relu(self.fc1.forward(feats, training, rng))
        h = T.dropout(h, self.spec.dropout1, rng, training)
        h = T.relu(self.fc2.forward(h, training, rng))
        h = T.dropout(h, self.spec.dropout2, rng, training)
        return self.fc3.forward(h, training, rng)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)):
            for key, p in layer.parameters().items():
                params[f"{name}.{key}"] = p
        return params


Model = VisionTransformer | ResidualCnn


# ---------------------------------------------------------------------------
# construction / accounting

def build_model(spec: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Fully initialized model; deterministic given the rng stream."""
    init = Initializer(rng, dtype)
    if spec.kind == "vit":
        return VisionTransformer(spec, init)
    return ResidualCnn(spec, init)


def build_head(spec: HeadSpec, rng: np.random.Generator, dtype=np.float32) -> ClassifierHead:
    return ClassifierHead(spec, Initializer(rng, dtype))


def forward_features(model: Model, images: Tensor, training: bool = False,
                     rng=None) -> Tensor:
    return model.forward_features(images, training, rng)


def forward_logits(model: Model, head: ClassifierHead, images: Tensor,
                   training: bool = False, rng=None) -> Tensor:
    feats = model.forward_features(images, training, rng)
    return head.forward(feats, training, rng)


def freeze_backbone(model: Model) -> Model:
    """Exclude every backbone parameter from training."""
    for p in model.parameters().values():
        p.requires_grad = False
    return model


def model_param_count(spec: ArchSpec) -> int:
    """Closed-form parameter count; equals the built model's count exactly."""
    if spec.kind == "vit":
        d, m, p = spec.width, spec.mlp_hidden, spec.patch_size
        block = 2 * d + 2 * d                                # two layernorms
        block += 4 * (d * d + d)                             # q,k,v,o
        block += (d * m + m) + (m * d + d)                   # mlp up/down
        total = (3 * p * p * d + d)                          # patch projection
        total += d + spec.tokens * d                         # cls + positions
        total += spec.depth * block
        total += 2 * d                                       # final norm
        return total
    w = spec.width
    total = 3 * w * 9 + w                                    # stem
    c_in = w
    for stage in range(4):
        c_out = w * (2 ** stage)
        for i in range(spec.depth):
            stride = 2 if (i == 0 and stage > 0) else 1
            total += c_in * c_out * 9 + c_out
            total += c_out * c_out * 9 + c_out
            if stride != 1 or c_in != c_out:
                total += c_in * c_out + c_out
            c_in = c_out
    return total


def head_param_count(spec: HeadSpec) -> int:
    return (spec.in_dim * spec.hidden1 + spec.hidden1
            + spec.hidden1 * spec.hidden2 + spec.hidden2
            + spec.hidden2 * spec.num_classes + spec.num_classes)


def live_param_count(obj) -> int:
    return sum(p.size for p in obj.parameters().values())
