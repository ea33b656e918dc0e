import copy
import math

import numpy as np
import pytest

from vittt import oracles
from vittt import tensor as K
from vittt.block import (
    BlockConfig,
    BlockDiagnostics,
    _conv_preprocess,
    block_forward,
    block_param_count,
    init_block,
)
from vittt.tree import count, tree_map
from vittt.ttt import TTTConfig


def noisy_block(cfg, rng, std=0.3):
    """Block with weights large enough that every path matters."""
    params = init_block(cfg, rng)
    return tree_map(lambda name, a: a + rng.normal(0, std, a.shape), params)


def micro_cfg(**kw):
    ttt = kw.pop("ttt", TTTConfig(2, 4, minibatch_size=4))
    return BlockConfig(ttt=ttt, **kw)


# -- monolithic oracle ---------------------------------------------------------


def straight_line_block(y, grid, p, cfg):
    """Loop-level rewrite of the block that shares nothing with block.py."""
    T, D = y.shape
    H, W = grid
    r = cfg.conv2d_size // 2
    ker = p.dwconv2d_kernel
    x_pre = np.zeros_like(y)
    for t in range(T):
        i, j = divmod(t, W)
        acc = y[t].copy()
        for a in range(-r, r + 1):
            for b in range(-r, r + 1):
                ii, jj = i + a, j + b
                if 0 <= ii < H and 0 <= jj < W:
                    acc += ker[a + r, b + r] * y[ii * W + jj]
        x_pre[t] = acc
    x = np.zeros_like(y)
    for t in range(T):
        mu = sum(x_pre[t]) / D
        var = sum((v - mu) ** 2 for v in x_pre[t]) / D
        x[t] = (x_pre[t] - mu) / math.sqrt(var + cfg.norm_eps) * p.norm_gamma + p.norm_beta
    pre = x @ p.gate_proj
    gate = 0.5 * pre * (1 + np.tanh(math.sqrt(2 / math.pi) * (pre + 0.044715 * pre**3)))
    z_f, _ = oracles.ttt_naive(x, cfg.ttt, p.forth.proj, p.forth.state)
    z_b, _ = oracles.ttt_naive(x[::-1], cfg.ttt, p.back.proj, p.back.state)
    merged = gate * z_f + gate * z_b[::-1]
    return merged @ p.out_proj + x


@pytest.mark.parametrize("inner", ["ln_residual", "plain_linear"])
def test_block_matches_straight_line_rewrite(rng, inner):
    cfg = micro_cfg(ttt=TTTConfig(2, 4, minibatch_size=5, inner_model=inner))
    params = noisy_block(cfg, rng)
    params.forth.proj.theta_kq *= 0.4
    params.back.proj.theta_kq *= 0.4
    y = rng.standard_normal((12, 8))
    got = np.asarray(block_forward(y, (3, 4), params, cfg).y)
    ref = straight_line_block(y, (3, 4), params, cfg)
    assert np.abs(got - ref).max() < 1e-11


# -- examples ------------------------------------------------------------------


def test_zero_out_proj_is_pure_residual(rng):
    cfg = micro_cfg()
    params = noisy_block(cfg, rng)
    params.out_proj = np.zeros_like(params.out_proj)
    y = rng.standard_normal((12, 8))
    x_pre = y + np.asarray(_conv_preprocess(y, (3, 4), params.dwconv2d_kernel, ()))
    x = K.layer_norm(x_pre, params.norm_gamma, params.norm_beta, cfg.norm_eps)
    assert np.array_equal(np.asarray(block_forward(y, (3, 4), params, cfg).y), x)


def test_flip_symmetry_with_copied_directions(rng):
    cfg = micro_cfg()
    params = noisy_block(cfg, rng)
    params.back = copy.deepcopy(params.forth)
    k = params.dwconv2d_kernel
    params.dwconv2d_kernel = 0.5 * (k + k[::-1, ::-1])  # symmetric under a half turn
    y = rng.standard_normal((12, 8))
    out = np.asarray(block_forward(y, (3, 4), params, cfg).y)
    out_flipped = np.asarray(block_forward(y[::-1].copy(), (3, 4), params, cfg).y)
    assert np.abs(out_flipped[::-1] - out).max() < 1e-12


def test_sigmoid_gate_option(rng):
    cfg = micro_cfg(gate="sigmoid")
    params = noisy_block(cfg, rng)
    params.out_proj = np.eye(8)
    y = rng.standard_normal((12, 8))
    gelu_cfg = micro_cfg()
    assert not np.allclose(np.asarray(block_forward(y, (3, 4), params, cfg).y),
                           np.asarray(block_forward(y, (3, 4), params, gelu_cfg).y))


def test_grid_mismatch_is_an_error(rng):
    cfg = micro_cfg()
    params = init_block(cfg, rng)
    with pytest.raises(K.DimensionError):
        block_forward(rng.standard_normal((12, 8)), (3, 3), params, cfg)
    with pytest.raises(K.DimensionError):
        block_forward(rng.standard_normal((12, 8)), (3, 4), params, cfg, cls_positions=(0,))


def test_config_validation():
    with pytest.raises(ValueError):
        micro_cfg(gate="relu")
    with pytest.raises(ValueError):
        micro_cfg(w0_mode="frozen")
    with pytest.raises(ValueError):
        micro_cfg(conv2d_size=4)


def test_class_tokens_skip_the_spatial_conv(rng):
    y = rng.standard_normal((1, 13, 8))
    kernel = rng.standard_normal((3, 3, 8))
    out = np.asarray(_conv_preprocess(y, (3, 4), kernel, (6,)))
    assert not np.any(out[0, 6])
    patches = np.delete(y, 6, axis=1).reshape(1, 3, 4, 8)
    ref = K.dwconv2d(patches, kernel).reshape(1, 12, 8)
    assert np.array_equal(np.delete(out, 6, axis=1), ref)


def test_sink_does_not_change_output_and_traces_both_directions(rng):
    cfg = micro_cfg()
    params = noisy_block(cfg, rng)
    y = rng.standard_normal((12, 8))
    sink = BlockDiagnostics()
    plain = block_forward(y, (3, 4), params, cfg)
    logged = block_forward(y, (3, 4), params, cfg, sink=sink)
    assert np.array_equal(np.asarray(plain.y), np.asarray(logged.y))
    assert set(plain.traces) == {"forth", "back"}
    assert sink.forth.grad_norms.shape == sink.back.grad_norms.shape == (2, 12)


# -- invariants ----------------------------------------------------------------


@pytest.mark.parametrize("s", range(12))
def test_bidirectional_block_has_global_coverage(rng, s):
    cfg = micro_cfg()
    params = noisy_block(cfg, np.random.default_rng(5))
    params.dwconv2d_kernel = np.zeros_like(params.dwconv2d_kernel)  # isolate the TTT paths
    y = np.random.default_rng(6).standard_normal((12, 8))
    base = np.asarray(block_forward(y, (3, 4), params, cfg).y)
    y2 = y.copy()
    y2[s] += np.random.default_rng(7).standard_normal(8)
    diff = np.abs(np.asarray(block_forward(y2, (3, 4), params, cfg).y) - base).max(axis=1)
    assert np.all(diff > 0)


def test_forth_only_block_is_causal_without_spatial_mixing(rng):
    cfg = micro_cfg(bidirectional=False)
    params = noisy_block(cfg, rng)
    params.dwconv2d_kernel = np.zeros_like(params.dwconv2d_kernel)
    y = rng.standard_normal((12, 8))
    base = np.asarray(block_forward(y, (3, 4), params, cfg).y)
    y2 = y.copy()
    y2[7] += rng.standard_normal(8)
    out = np.asarray(block_forward(y2, (3, 4), params, cfg).y)
    assert np.array_equal(out[:7], base[:7])
    assert np.all(np.abs(out[7:] - base[7:]).max(axis=1) > 0)


def test_shared_w0_aliases_one_storage(rng):
    shared = init_block(micro_cfg(w0_mode="shared_learnable"), rng)
    shared.forth.state.W[0, 0, 0] += 1.0
    assert shared.back.state.W[0, 0, 0] == shared.forth.state.W[0, 0, 0]
    dual = init_block(micro_cfg(w0_mode="dual_learnable"), rng)
    before = dual.back.state.W.copy()
    dual.forth.state.W[0, 0, 0] += 1.0
    assert np.array_equal(dual.back.state.W, before)


def test_fixed_w0_starts_at_zero(rng):
    params = init_block(micro_cfg(w0_mode="fixed"), rng)
    assert not np.any(params.forth.state.W) and not np.any(params.back.state.W)


@pytest.mark.parametrize("w0_mode", ["fixed", "shared_learnable", "dual_learnable"])
@pytest.mark.parametrize("bidirectional", [True, False])
@pytest.mark.parametrize("nh,d,k1,k2", [(2, 4, 4, 3), (3, 2, 2, 5)])
def test_param_count_equals_tensor_enumeration(rng, w0_mode, bidirectional, nh, d, k1, k2):
    cfg = BlockConfig(TTTConfig(nh, d), w0_mode=w0_mode, bidirectional=bidirectional,
                      conv1d_size=k1, conv2d_size=k2)
    items = block_param_count(nh * d, nh, d, k1, k2, w0_mode, bidirectional)
    assert items["total"] == sum(v for k, v in items.items() if k != "total")
    assert items["total"] == count(init_block(cfg, rng))


@pytest.mark.parametrize("D,nh,expected", [(192, 3, 20_736), (384, 6, 41_472), (768, 12, 82_944)])
def test_conv2d_parameter_delta_over_twelve_blocks(D, nh, expected):
    assert 12 * block_param_count(D, nh, 64)["dwconv2d"] == expected


def test_param_count_rejects_bad_head_split():
    with pytest.raises(ValueError):
        block_param_count(10, 3, 4)
