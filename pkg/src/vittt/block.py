"""Bidirectional Vittt block.

Order of operations for an input ``y`` on an ``H' x W'`` patch grid::

    x     = LN(dwconv2d(y) + y)
    gate  = GELU(x @ gate_proj)
    z_f   = TTT_forth(x)
    z_b   = TTT_back(flip(x))
    out   = (gate * z_f + gate * flip(z_b)) @ out_proj + x

Class tokens, when present, bypass the 2-D convolution (they have no grid
position) but take part in everything else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from vittt import autodiff as ad
from vittt import tensor as K
from vittt.ttt import TTTConfig, TTTDiagnostics, TTTHeadState, TTTProjections, ttt_forward

W0_MODES = ("fixed", "shared_learnable", "dual_learnable")
GATES = ("gelu", "sigmoid")


@dataclass(frozen=True)
class BlockConfig:
    ttt: TTTConfig
    gate: str = "gelu"
    bidirectional: bool = True
    w0_mode: str = "dual_learnable"
    conv1d_size: int = 4
    conv2d_size: int = 3
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}")
        if self.w0_mode not in W0_MODES:
            raise ValueError(f"w0_mode must be one of {W0_MODES}")
        if self.conv2d_size % 2 == 0:
            raise ValueError("conv2d_size must be odd")

    @property
    def dim(self) -> int:
        return self.ttt.dim


@dataclass
class TTTBranch:
    proj: TTTProjections
    state: TTTHeadState


@dataclass
class VitttBlockParams:
    dwconv2d_kernel: np.ndarray  # [K, K, D]
    norm_gamma: np.ndarray  # [D]
    norm_beta: np.ndarray  # [D]
    gate_proj: np.ndarray  # [D, D]
    forth: TTTBranch
    back: TTTBranch | None
    out_proj: np.ndarray  # [D, D]


@dataclass
class BlockDiagnostics:
    forth: TTTDiagnostics = field(default_factory=TTTDiagnostics)
    back: TTTDiagnostics = field(default_factory=TTTDiagnostics)


class BlockResult(NamedTuple):
    y: object
    traces: dict  # direction -> [..., n_minibatches, nh]


def init_block(cfg: BlockConfig, rng: np.random.Generator, std: float = 0.02) -> VitttBlockParams:
    D = cfg.dim

    def branch(W=None) -> TTTBranch:
        proj = TTTProjections.init(cfg.ttt, rng, conv_size=cfg.conv1d_size, std=std)
        if cfg.w0_mode == "fixed":
            state = TTTHeadState.zeros(cfg.ttt)
        else:
            state = TTTHeadState.random(cfg.ttt, rng, std=std)
        if W is not None:
            state.W = W
        return TTTBranch(proj, state)

    forth = branch()
    back = None
    if cfg.bidirectional:
        back = branch(forth.state.W if cfg.w0_mode == "shared_learnable" else None)
    k = cfg.conv2d_size
    return VitttBlockParams(
        dwconv2d_kernel=K.asarray(rng.normal(0.0, std, (k, k, D))),
        norm_gamma=K.asarray(np.ones(D)),
        norm_beta=K.asarray(np.zeros(D)),
        gate_proj=K.asarray(rng.normal(0.0, std, (D, D))),
        forth=forth,
        back=back,
        out_proj=K.asarray(rng.normal(0.0, std, (D, D))),
    )


def _conv_preprocess(y, grid, kernel, cls_positions: tuple[int, ...]):
    """``dwconv2d`` over patch tokens only; class tokens get a zero update."""
    shape = ad.value(y).shape
    t_len, D = shape[-2], shape[-1]
    if not cls_positions:
        conv = ad.dwconv2d(ad.reshape(y, (*shape[:-2], *grid, D)), kernel)
        return ad.reshape(conv, shape)
    patch_idx = [i for i in range(t_len) if i not in set(cls_positions)]
    patches = ad.getitem(y, (Ellipsis, np.array(patch_idx), slice(None)))
    pshape = ad.value(patches).shape
    conv = ad.reshape(ad.dwconv2d(ad.reshape(patches, (*pshape[:-2], *grid, D)), kernel), pshape)
    zeros = np.zeros((*shape[:-2], len(cls_positions), D), dtype=ad.value(y).dtype)
    inv = np.argsort(np.array(patch_idx + list(cls_positions)))
    return ad.getitem(ad.concat([conv, zeros], axis=-2), (Ellipsis, inv, slice(None)))


def block_forward(y_prev, grid: tuple[int, int], params: VitttBlockParams, cfg: BlockConfig,
                  cls_positions: tuple[int, ...] = (), sink: BlockDiagnostics | None = None) -> BlockResult:
    t_len = ad.value(y_prev).shape[-2]
    if grid[0] * grid[1] != t_len - len(cls_positions):
        raise K.DimensionError(
            f"grid {grid[0]}x{grid[1]} does not match {t_len - len(cls_positions)} patch tokens"
        )
    x_pre = ad.add(_conv_preprocess(y_prev, grid, params.dwconv2d_kernel, cls_positions), y_prev)
    x = ad.layer_norm(x_pre, params.norm_gamma, params.norm_beta, cfg.norm_eps)
    act = ad.gelu if cfg.gate == "gelu" else ad.sigmoid
    gate = act(ad.matmul(x, params.gate_proj))

    forth = ttt_forward(x, cfg.ttt, params.forth.proj, params.forth.state,
                        sink=None if sink is None else sink.forth)
    merged = ad.mul(gate, forth.z)
    traces = {"forth": forth.trace}
    if cfg.bidirectional:
        back = ttt_forward(ad.flip_seq(x), cfg.ttt, params.back.proj, params.back.state,
                           sink=None if sink is None else sink.back)
        merged = ad.add(merged, ad.mul(gate, ad.flip_seq(back.z)))
        traces["back"] = back.trace
    y = ad.add(ad.matmul(merged, params.out_proj), x)
    return BlockResult(y, traces)


def block_param_count(D: int, nh: int, d: int, conv1d_size: int = 4, conv2d_size: int = 3,
                      w0_mode: str = "dual_learnable", bidirectional: bool = True) -> dict[str, int]:
    """Itemized parameter count of one block; ``total`` sums the items."""
    if nh * d != D:
        raise ValueError("nh * d must equal D")
    directions = 2 if bidirectional else 1
    per_dir_proj = 2 * D * D + 2 * conv1d_size * D + D * nh
    per_dir_state = 3 * D  # b_inner, ln_gamma, ln_beta
    w0_copies = 1 if (w0_mode == "shared_learnable" or not bidirectional) else 2
    items = {
        "dwconv2d": conv2d_size * conv2d_size * D,
        "norm": 2 * D,
        "gate_proj": D * D,
        "ttt_projections": directions * per_dir_proj,
        "ttt_inner_state": directions * per_dir_state,
        "ttt_W0": w0_copies * nh * d * d,
        "out_proj": D * D,
    }
    items["total"] = sum(items.values())
    return items
