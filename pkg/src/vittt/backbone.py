"""Patch embedding, the hybrid Vittt + SwiGLU encoder, and classification heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from vittt import autodiff as ad
from vittt import tensor as K
from vittt.block import (
    BlockConfig,
    BlockDiagnostics,
    VitttBlockParams,
    block_forward,
    block_param_count,
    init_block,
)
from vittt.tree import count, iter_tensors
from vittt.ttt import TTTConfig

POOL_STRATEGIES = ("mean_pool", "max_pool", "head_class_tok", "mid_class_tok", "double_class_tok")
_CLS_TOKENS = {"mean_pool": 0, "max_pool": 0, "head_class_tok": 1, "mid_class_tok": 1, "double_class_tok": 2}


@dataclass(frozen=True)
class ModelConfig:
    block: BlockConfig
    image_size: tuple[int, int] = (16, 16)
    patch_size: int = 4
    channels: int = 3
    depth: int = 2
    pool_strategy: str = "mean_pool"
    num_classes: int = 4
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {h}x{w} is not divisible by patch size {self.patch_size}")
        if self.pool_strategy not in POOL_STRATEGIES:
            raise ValueError(f"pool_strategy must be one of {POOL_STRATEGIES}")
        if self.depth < 1 or self.num_classes < 1:
            raise ValueError("depth and num_classes must be positive")

    @property
    def embed_dim(self) -> int:
        return self.block.dim

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def num_cls_tokens(self) -> int:
        return _CLS_TOKENS[self.pool_strategy]

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_cls_tokens

    @property
    def cls_positions(self) -> tuple[int, ...]:
        t = self.num_patches
        return {
            "head_class_tok": (0,),
            "mid_class_tok": (t // 2,),
            "double_class_tok": (0, t + 1),
        }.get(self.pool_strategy, ())

    @property
    def patch_positions(self) -> np.ndarray:
        cls = set(self.cls_positions)
        return np.array([i for i in range(self.seq_len) if i not in cls])

    @property
    def mlp_hidden(self) -> int:
        return mlp_hidden_size(self.embed_dim)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def mlp_hidden_size(dim: int) -> int:
    """``8/3 * dim`` rounded to the nearest multiple of 8."""
    return max(8, 8 * round(dim * 8 / 3 / 8))


_PRESETS = {
    # name: (embed_dim, depth, heads, head_dim, image, patch, classes)
    "micro": (32, 2, 2, 16, (16, 16), 4, 4),
    "tiny": (192, 12, 3, 64, (224, 224), 16, 1000),
    "small": (384, 12, 6, 64, (224, 224), 16, 1000),
    "base": (768, 12, 12, 64, (224, 224), 16, 1000),
}


def preset(name: str, *, ttt: dict | None = None, block: dict | None = None, **model) -> ModelConfig:
    """Named model scale with optional overrides for the TTT, block and model fields."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    dim, depth, heads, head_dim, image, patch, classes = _PRESETS[name]
    ttt_kw = {"num_heads": heads, "head_dim": head_dim, **(ttt or {})}
    block_cfg = BlockConfig(ttt=TTTConfig(**ttt_kw), **(block or {}))
    kw = {"image_size": image, "patch_size": patch, "depth": depth, "num_classes": classes, **model}
    return ModelConfig(block=block_cfg, **kw)


@dataclass
class MLPParams:
    w_gate: np.ndarray  # [D, h]
    w_up: np.ndarray  # [D, h]
    w_down: np.ndarray  # [h, D]


@dataclass
class LayerParams:
    norm1_gamma: np.ndarray
    norm1_beta: np.ndarray
    vittt: VitttBlockParams
    norm2_gamma: np.ndarray
    norm2_beta: np.ndarray
    mlp: MLPParams


@dataclass
class ModelParams:
    patch_proj: np.ndarray  # [P*P*C, D]
    pos_embed: np.ndarray  # [T + c, D]
    cls_tokens: np.ndarray | None  # [c, D]
    layers: list[LayerParams]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    head: np.ndarray  # [D, num_classes]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return list(iter_tensors(self))

    def count(self) -> int:
        return count(self)


def _trunc_normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    return K.asarray(np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std))


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    rng = np.random.default_rng(seed)
    D, P, C = cfg.embed_dim, cfg.patch_size, cfg.channels
    h = cfg.mlp_hidden
    layers = []
    for _ in range(cfg.depth):
        layers.append(
            LayerParams(
                norm1_gamma=K.asarray(np.ones(D)),
                norm1_beta=K.asarray(np.zeros(D)),
                vittt=init_block(cfg.block, rng, std=std),
                norm2_gamma=K.asarray(np.ones(D)),
                norm2_beta=K.asarray(np.zeros(D)),
                mlp=MLPParams(
                    w_gate=K.asarray(rng.normal(0.0, std, (D, h))),
                    w_up=K.asarray(rng.normal(0.0, std, (D, h))),
                    w_down=K.asarray(rng.normal(0.0, std, (h, D))),
                ),
            )
        )
    c = cfg.num_cls_tokens
    return ModelParams(
        patch_proj=K.asarray(rng.normal(0.0, std, (P * P * C, D))),
        pos_embed=_trunc_normal(rng, std, (cfg.seq_len, D)),
        cls_tokens=_trunc_normal(rng, std, (c, D)) if c else None,
        layers=layers,
        final_gamma=K.asarray(np.ones(D)),
        final_beta=K.asarray(np.zeros(D)),
        head=K.asarray(rng.normal(0.0, std, (D, cfg.num_classes))),
    )


def count_params(cfg: ModelConfig) -> int:
    """Exact total parameter count of a model built from ``cfg`` (without allocating it)."""
    blk = cfg.block
    D = cfg.embed_dim
    per_block = _block_total(blk)
    per_layer = per_block + 4 * D + 3 * D * cfg.mlp_hidden
    P, C = cfg.patch_size, cfg.channels
    return (
        cfg.depth * per_layer
        + P * P * C * D
        + cfg.seq_len * D
        + cfg.num_cls_tokens * D
        + 2 * D
        + D * cfg.num_classes
    )


def _block_total(blk: BlockConfig) -> int:
    t = blk.ttt
    return block_param_count(
        t.dim, t.num_heads, t.head_dim, blk.conv1d_size, blk.conv2d_size, blk.w0_mode, blk.bidirectional
    )["total"]


# -- forward -----------------------------------------------------------------


def patchify(image, P: int):
    """``[..., H, W, C]`` -> ``[..., T, P*P*C]`` in raster order, each patch flattened (row, col, channel)."""
    shape = ad.value(image).shape
    *lead, H, W, C = shape
    if H % P or W % P:
        raise K.DimensionError(f"image {H}x{W} not divisible by patch size {P}")
    n = len(lead)
    x = ad.reshape(image, (*lead, H // P, P, W // P, P, C))
    x = ad.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return ad.reshape(x, (*lead, (H // P) * (W // P), P * P * C))


def unpatchify(patches, image_size: tuple[int, int], P: int, C: int) -> np.ndarray:
    patches = np.asarray(patches)
    H, W = image_size
    *lead, _, _ = patches.shape
    n = len(lead)
    x = patches.reshape(*lead, H // P, W // P, P, P, C)
    x = np.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(*lead, H, W, C)


def embed(images, params: ModelParams, cfg: ModelConfig):
    """Patch projection, class-token insertion and positional embedding."""
    tokens = ad.matmul(patchify(images, cfg.patch_size), params.patch_proj)
    if cfg.num_cls_tokens:
        lead = ad.value(tokens).shape[:-2]
        D = cfg.embed_dim
        cls = ad.broadcast_to(params.cls_tokens, (*lead, cfg.num_cls_tokens, D))
        t = cfg.num_patches
        pieces = {
            "head_class_tok": [ad.getitem(cls, (Ellipsis, slice(0, 1), slice(None))), tokens],
            "mid_class_tok": [
                _seq(tokens, 0, t // 2),
                ad.getitem(cls, (Ellipsis, slice(0, 1), slice(None))),
                _seq(tokens, t // 2, t),
            ],
            "double_class_tok": [
                ad.getitem(cls, (Ellipsis, slice(0, 1), slice(None))),
                tokens,
                ad.getitem(cls, (Ellipsis, slice(1, 2), slice(None))),
            ],
        }[cfg.pool_strategy]
        tokens = ad.concat(pieces, axis=-2)
    return ad.add(tokens, params.pos_embed)


def _seq(x, start, stop):
    return ad.getitem(x, (Ellipsis, slice(start, stop), slice(None)))


def swiglu(x, mlp: MLPParams):
    gated = ad.mul(ad.silu(ad.matmul(x, mlp.w_gate)), ad.matmul(x, mlp.w_up))
    return ad.matmul(gated, mlp.w_down)


class EncoderResult(NamedTuple):
    y: object
    traces: list[dict]  # per layer: direction -> [..., n_minibatches, nh]


def encoder_forward(y0, params: ModelParams, cfg: ModelConfig,
                    sinks: list[BlockDiagnostics] | None = None) -> EncoderResult:
    """Stacked pre-norm residual pairs of (Vittt block, SwiGLU MLP)."""
    y = y0
    traces = []
    for i, layer in enumerate(params.layers):
        h = ad.layer_norm(y, layer.norm1_gamma, layer.norm1_beta, cfg.norm_eps)
        res = block_forward(h, cfg.grid, layer.vittt, cfg.block, cfg.cls_positions,
                            sink=None if sinks is None else sinks[i])
        y = ad.add(res.y, y)
        traces.append(res.traces)
        h = ad.layer_norm(y, layer.norm2_gamma, layer.norm2_beta, cfg.norm_eps)
        y = ad.add(swiglu(h, layer.mlp), y)
    return EncoderResult(y, traces)


def pooled_features(y_L, params: ModelParams, cfg: ModelConfig):
    """Feature vector per sample fed to the linear head."""
    strategy = cfg.pool_strategy
    eps = cfg.norm_eps
    if strategy == "mean_pool":
        normed = ad.layer_norm(y_L, params.final_gamma, params.final_beta, eps)
        patches = ad.getitem(normed, (Ellipsis, cfg.patch_positions, slice(None)))
        return ad.mean(patches, axis=-2)
    if strategy == "max_pool":
        patches = ad.getitem(y_L, (Ellipsis, cfg.patch_positions, slice(None)))
        pv = ad.value(patches)
        best = np.linalg.norm(pv, axis=-1).argmax(axis=-1)  # [...]
        lead = pv.shape[:-2]
        index = tuple(np.indices(lead)) + (best,)
        picked = ad.getitem(patches, index + (slice(None),)) if lead else ad.getitem(patches, (int(best), slice(None)))
        return ad.layer_norm(picked, params.final_gamma, params.final_beta, eps)
    normed = ad.layer_norm(y_L, params.final_gamma, params.final_beta, eps)
    pos = cfg.cls_positions
    first = ad.getitem(normed, (Ellipsis, pos[0], slice(None)))
    if len(pos) == 1:
        return first
    second = ad.getitem(normed, (Ellipsis, pos[1], slice(None)))
    return ad.scale(ad.add(first, second), 0.5)


def classify(y_L, params: ModelParams, cfg: ModelConfig):
    return ad.matmul(_as_matrix(pooled_features(y_L, params, cfg)), params.head)


def _as_matrix(v):
    if ad.value(v).ndim == 1:
        return ad.reshape(v, (1, ad.value(v).shape[0]))
    return v


class ForwardResult(NamedTuple):
    logits: object  # [B, num_classes]
    y: object
    traces: list[dict]


def forward(images, params: ModelParams, cfg: ModelConfig,
            sinks: list[BlockDiagnostics] | None = None) -> ForwardResult:
    y0 = embed(images, params, cfg)
    enc = encoder_forward(y0, params, cfg, sinks)
    return ForwardResult(classify(enc.y, params, cfg), enc.y, enc.traces)


@dataclass
class Model:
    cfg: ModelConfig
    params: ModelParams = field(repr=False)

    @classmethod
    def fresh(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def forward(self, images, sinks=None) -> ForwardResult:
        return forward(images, self.params, self.cfg, sinks)

    def logits(self, images) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        return np.asarray(self.forward(images).logits)

    def new_sinks(self) -> list[BlockDiagnostics]:
        return [BlockDiagnostics() for _ in range(self.cfg.depth)]

    @property
    def center_token(self) -> int:
        gh, gw = self.cfg.grid
        raster = (gh // 2) * gw + gw // 2
        return int(self.cfg.patch_positions[raster])

