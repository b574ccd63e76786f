"""Hybrid conv/transformer classifier used by every grading stage.

Three stages, each a strided convolutional token embedding followed by
transformer blocks whose Q/K/V projections start with a depthwise
convolution on the 2-D token grid (strided for K/V to shrink their token
count). Final tokens are mean-pooled and mapped to 2 logits by a linear
head. No class token, no positional encoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

# class index order per stage, pinned; probability pairs follow this order
STAGE_CLASSES = {
    1: ("impure", "pure"),
    2: ("flat", "round"),
    3: ("embryo_down", "embryo_up"),
}

# kernel size of the depthwise conv inside every Q/K/V projection
PROJ_KERNEL = 3
PROJ_PAD = 1


@dataclass(frozen=True)
class StageSpec:
    """Geometry of one backbone stage."""

    embed_kernel: int
    embed_stride: int
    embed_pad: int
    embed_dim: int
    num_blocks: int
    num_heads: int
    kv_stride: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.embed_stride < 1 or self.kv_stride < 1:
            raise ValueError("strides must be >= 1")


@dataclass(frozen=True)
class BackboneConfig:
    input_resolution: int
    stages: tuple[StageSpec, StageSpec, StageSpec]
    num_classes: int = 2

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ValueError(f"expected exactly 3 stages, got {len(self.stages)}")
        object.__setattr__(self, "stages", tuple(self.stages))
        extent = self.input_resolution
        for i, s in enumerate(self.stages):
            extent = conv_out_extent(extent, s.embed_kernel, s.embed_stride, s.embed_pad)
            if extent < 1:
                raise ValueError(f"token grid vanishes at stage {i + 1}")

    def grid_sizes(self) -> list[int]:
        """Token-grid edge length after each stage's embedding."""
        sizes = []
        extent = self.input_resolution
        for s in self.stages:
            extent = conv_out_extent(extent, s.embed_kernel, s.embed_stride, s.embed_pad)
            sizes.append(extent)
        return sizes


def conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def default_config() -> BackboneConfig:
    """CvT-13-shaped geometry for 384x384 inputs."""
    return BackboneConfig(
        input_resolution=384,
        stages=(
            StageSpec(7, 4, 2, 64, num_blocks=1, num_heads=1, kv_stride=2),
            StageSpec(3, 2, 1, 192, num_blocks=2, num_heads=3, kv_stride=2),
            StageSpec(3, 2, 1, 384, num_blocks=10, num_heads=6, kv_stride=2),
        ),
    )


def tiny_config() -> BackboneConfig:
    """Small geometry for 64x64 inputs; trains in minutes on CPU."""
    return BackboneConfig(
        input_resolution=64,
        stages=(
            StageSpec(7, 4, 2, 8, num_blocks=1, num_heads=1, kv_stride=2),
            StageSpec(3, 2, 1, 16, num_blocks=1, num_heads=2, kv_stride=2),
            StageSpec(3, 2, 1, 32, num_blocks=1, num_heads=2, kv_stride=2),
        ),
    )


NAMED_CONFIGS = {"cvt13": default_config, "tiny": tiny_config}


def config_to_dict(config: BackboneConfig) -> dict:
    return {
        "input_resolution": config.input_resolution,
        "num_classes": config.num_classes,
        "stages": [asdict(s) for s in config.stages],
    }


def config_from_dict(d: dict) -> BackboneConfig:
    return BackboneConfig(
        input_resolution=int(d["input_resolution"]),
        stages=tuple(StageSpec(**s) for s in d["stages"]),
        num_classes=int(d.get("num_classes", 2)),
    )


def save_config(config: BackboneConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> BackboneConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


class StageModel:
    """One stage's classifier: config, named parameters, trainable mask.

    ``stage`` tags which cascade position the weights belong to (1, 2 or 3)
    and fixes the class-name order of the two logits.
    """

    def __init__(self, config: BackboneConfig, stage: int, params: dict[str, Tensor]):
        if stage not in STAGE_CLASSES:
            raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
        self.config = config
        self.stage = stage
        self.class_names = STAGE_CLASSES[stage]
        self.params = params
        self.trainable = {name: True for name in params}
        self._sync_requires_grad()

    def _sync_requires_grad(self) -> None:
        for name, p in self.params.items():
            p.requires_grad = self.trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self.trainable[name] = flag
        self.params[name].requires_grad = flag

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.trainable[n]}

    def num_trainable_values(self) -> int:
        return sum(p.size for p in self.trainable_params().values())


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual transformer init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def parameter_specs(config: BackboneConfig) -> list[tuple[str, tuple, str]]:
    """Every parameter the config implies: (name, shape, init kind) where the
    kind is 'weight' (truncated normal), 'zero', or 'one'."""
    specs: list[tuple[str, tuple, str]] = []
    in_ch = 3
    for si, s in enumerate(config.stages, start=1):
        d = s.embed_dim
        specs.append((f"stage{si}.embed.conv.weight", (d, in_ch, s.embed_kernel, s.embed_kernel), "weight"))
        specs.append((f"stage{si}.embed.conv.bias", (d,), "zero"))
        specs.append((f"stage{si}.embed.norm.gamma", (d,), "one"))
        specs.append((f"stage{si}.embed.norm.beta", (d,), "zero"))
        for bi in range(s.num_blocks):
            p = f"stage{si}.block{bi}"
            specs.append((f"{p}.norm1.gamma", (d,), "one"))
            specs.append((f"{p}.norm1.beta", (d,), "zero"))
            for leg in ("q", "k", "v"):
                specs.append((f"{p}.attn.dw_{leg}.weight", (d, 1, PROJ_KERNEL, PROJ_KERNEL), "weight"))
                specs.append((f"{p}.attn.proj_{leg}.weight", (d, d), "weight"))
                specs.append((f"{p}.attn.proj_{leg}.bias", (d,), "zero"))
            specs.append((f"{p}.attn.proj_out.weight", (d, d), "weight"))
            specs.append((f"{p}.attn.proj_out.bias", (d,), "zero"))
            specs.append((f"{p}.norm2.gamma", (d,), "one"))
            specs.append((f"{p}.norm2.beta", (d,), "zero"))
            hidden = d * s.mlp_ratio
            specs.append((f"{p}.mlp.fc1.weight", (hidden, d), "weight"))
            specs.append((f"{p}.mlp.fc1.bias", (hidden,), "zero"))
            specs.append((f"{p}.mlp.fc2.weight", (d, hidden), "weight"))
            specs.append((f"{p}.mlp.fc2.bias", (d,), "zero"))
        in_ch = d
    d_final = config.stages[-1].embed_dim
    specs.append(("final_norm.gamma", (d_final,), "one"))
    specs.append(("final_norm.beta", (d_final,), "zero"))
    # a zero head makes a fresh model predict the uniform distribution, so
    # fine-tuning starts from the backbone's representation, not init noise
    specs.append(("head.weight", (config.num_classes, d_final), "zero"))
    specs.append(("head.bias", (config.num_classes,), "zero"))
    return specs


def parameter_shapes(config: BackboneConfig) -> dict[str, tuple]:
    return {name: shape for name, shape, _ in parameter_specs(config)}


def init_stage_model(config: BackboneConfig, stage: int, seed: int) -> StageModel:
    """Fresh random weights: truncated-normal(std 0.02) matrices, zero biases,
    unit layer-norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage]))
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_specs(config):
        if kind == "weight":
            params[name] = Tensor(_trunc_normal(rng, shape))
        elif kind == "zero":
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
        else:
            params[name] = Tensor(np.ones(shape, dtype=np.float32))
    return StageModel(config, stage, params)


def load_named_tensors(model: StageModel, tensors: dict[str, np.ndarray]) -> StageModel:
    """Overwrite parameters by name, e.g. to import externally trained
    weights. Shapes must match; unknown names are rejected."""
    for name, arr in tensors.items():
        if name not in model.params:
            raise KeyError(f"unknown parameter {name!r}")
        p = model.params[name]
        arr = np.asarray(arr, dtype=p.data.dtype)
        if arr.shape != p.data.shape:
            raise ValueError(
                f"shape {arr.shape} does not match parameter {name!r} shape {p.data.shape}"
            )
        p.data[...] = arr
    return model


def freeze_backbone(model: StageModel) -> StageModel:
    """Leave only the head weight and bias trainable."""
    for name in model.params:
        model.set_trainable(name, name in ("head.weight", "head.bias"))
    return model


def unfreeze_all(model: StageModel) -> StageModel:
    for name in model.params:
        model.set_trainable(name, True)
    return model


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _grid_to_tokens(x: Tensor) -> Tensor:
    """N,C,H,W -> N,H*W,C"""
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def _tokens_to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """N,T,C -> N,C,H,W"""
    n, t, c = tokens.shape
    h, w = grid
    if t != h * w:
        raise ValueError(f"token count {t} does not match grid {h}x{w}")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (n, c, h, w))


def conv_token_embed(
    feature_map: Tensor, spec: StageSpec, params: dict[str, Tensor], prefix: str
) -> tuple[Tensor, tuple[int, int]]:
    """Strided overlapping convolution, flatten to tokens, layer-norm channels."""
    y = T.conv2d(
        feature_map,
        params[f"{prefix}.conv.weight"],
        params[f"{prefix}.conv.bias"],
        stride=(spec.embed_stride, spec.embed_stride),
        padding=(spec.embed_pad, spec.embed_pad),
    )
    _, _, h, w = y.shape
    tokens = _grid_to_tokens(y)
    tokens = T.layer_norm(tokens, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    return tokens, (h, w)


def conv_projection(
    tokens: Tensor,
    grid: tuple[int, int],
    spec: StageSpec,
    params: dict[str, Tensor],
    prefix: str,
) -> tuple[Tensor, Tensor, Tensor]:
    """Depthwise conv on the token grid, then a pointwise linear, per Q/K/V.

    Q keeps the full grid; K and V are strided by kv_stride, cutting their
    token count by kv_stride^2.
    """
    x = _tokens_to_grid(tokens, grid)
    d = x.shape[1]
    out = []
    for leg in ("q", "k", "v"):
        stride = 1 if leg == "q" else spec.kv_stride
        conv = T.conv2d(
            x,
            params[f"{prefix}.dw_{leg}.weight"],
            stride=(stride, stride),
            padding=(PROJ_PAD, PROJ_PAD),
            groups=d,
        )
        proj = T.linear(
            _grid_to_tokens(conv),
            params[f"{prefix}.proj_{leg}.weight"],
            params[f"{prefix}.proj_{leg}.bias"],
        )
        out.append(proj)
    return out[0], out[1], out[2]


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    """N,T,D -> N,heads,T,D/heads"""
    n, t, d = x.shape
    return T.transpose(T.reshape(x, (n, t, num_heads, d // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, heads, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, t, heads * dh))


def attention_weights(q: Tensor, k: Tensor, num_heads: int) -> Tensor:
    """Scaled-dot-product probabilities: N,heads,T_q,T_k rows summing to 1."""
    dh = q.shape[-1] // num_heads
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    scores = T.mul_scalar(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return T.softmax(scores)


def attention(
    q: Tensor, k: Tensor, v: Tensor, num_heads: int, params: dict[str, Tensor], prefix: str
) -> Tensor:
    weights = attention_weights(q, k, num_heads)
    ctx = _merge_heads(T.matmul(weights, _split_heads(v, num_heads)))
    return T.linear(ctx, params[f"{prefix}.proj_out.weight"], params[f"{prefix}.proj_out.bias"])


def attention_block(
    tokens: Tensor,
    grid: tuple[int, int],
    spec: StageSpec,
    params: dict[str, Tensor],
    prefix: str,
) -> Tensor:
    """Pre-norm attention and pre-norm MLP, each with a residual add."""
    normed = T.layer_norm(tokens, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"])
    q, k, v = conv_projection(normed, grid, spec, params, f"{prefix}.attn")
    tokens = T.add(tokens, attention(q, k, v, spec.num_heads, params, f"{prefix}.attn"))

    normed = T.layer_norm(tokens, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"])
    hidden = T.gelu(T.linear(normed, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    mlp_out = T.linear(hidden, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return T.add(tokens, mlp_out)


def forward_batch(model: StageModel, images: Tensor) -> Tensor:
    """Full backbone pass: N,3,R,R images -> N,2 logits."""
    r = model.config.input_resolution
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (r, r):
        raise ValueError(
            f"expected images shaped (N, 3, {r}, {r}), got {images.shape}"
        )
    x = images
    tokens = None
    for si, spec in enumerate(model.config.stages, start=1):
        tokens, grid = conv_token_embed(x, spec, model.params, f"stage{si}.embed")
        for bi in range(spec.num_blocks):
            tokens = attention_block(tokens, grid, spec, model.params, f"stage{si}.block{bi}")
        if si < 3:
            x = _tokens_to_grid(tokens, grid)
    tokens = T.layer_norm(
        tokens, model.params["final_norm.gamma"], model.params["final_norm.beta"]
    )
    pooled = T.mean(tokens, axis=1)
    return T.linear(pooled, model.params["head.weight"], model.params["head.bias"])


def forward(model: StageModel, image: Tensor) -> Tensor:
    """Single-image pass: 1,3,R,R -> logits of extent 2."""
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"expected a single 1,3,R,R image, got {image.shape}")
    logits = forward_batch(model, image)
    return T.reshape(logits, (model.config.num_classes,))
