"""Naive reference implementations used as ground truth for the fast paths.

Everything here runs on Python lists of floats in double precision, one token
and one scalar at a time, and shares no code with :mod:`vittt.ttt`. Inputs may
be numpy arrays; they are converted with ``tolist()`` on entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    max_abs_dev: float
    max_rel_dev: float
    arg_max_location: tuple[int, ...]
    tolerance: float
    passed: bool


def compare(actual, expected, tol: float, relative: bool = False, head_dim: int | None = None) -> OracleReport:
    """Max deviation between two arrays.

    The relative deviation is ``max|a - e| / max|e|`` (infinity-norm relative
    error), which stays meaningful when individual reference entries are zero.
    For ``[T, D]`` inputs with ``head_dim`` given, the location is reported as
    ``(head, token, feature)``.
    """
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {e.shape}")
    diff = np.abs(a - e)
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = float(np.abs(e).max()) if e.size else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    loc = tuple(int(i) for i in np.unravel_index(int(diff.argmax()), diff.shape)) if diff.size else ()
    if head_dim is not None and len(loc) == 2:
        loc = (loc[1] // head_dim, loc[0], loc[1] % head_dim)
    dev = max_rel if relative else max_abs
    return OracleReport(max_abs, max_rel, loc, tol, dev < tol)


def _tolist(x):
    return np.asarray(x, dtype=np.float64).tolist()


def _vecmat(v, m):
    cols = len(m[0])
    out = [0.0] * cols
    for i, vi in enumerate(v):
        row = m[i]
        for j in range(cols):
            out[j] += vi * row[j]
    return out


def _matvec(m, v):
    out = []
    for row in m:
        acc = 0.0
        for rij, vj in zip(row, v):
            acc += rij * vj
        out.append(acc)
    return out


def _dot(a, b):
    acc = 0.0
    for ai, bi in zip(a, b):
        acc += ai * bi
    return acc


def _layer_norm_parts(u, eps):
    n = len(u)
    mu = 0.0
    for ui in u:
        mu += ui
    mu /= n
    var = 0.0
    for ui in u:
        var += (ui - mu) ** 2
    var /= n
    sigma = math.sqrt(var + eps)
    return [(ui - mu) / sigma for ui in u], sigma


def _causal_conv(seq, kernel):
    taps = len(kernel)
    out = []
    for t in range(len(seq)):
        row = [0.0] * len(seq[0])
        for j in range(taps):
            s = t - (taps - 1) + j
            if s < 0:
                continue
            for c in range(len(row)):
                row[c] += kernel[j][c] * seq[s][c]
        out.append(row)
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def naive_projections(x, proj, num_heads: int, eta_base: float):
    """Per-token projections: returns (xk, xq, xv, eta) as nested lists.

    ``xk/xq/xv`` are ``[T][D]``; ``eta`` is ``[T][nh]``.
    """
    X = _tolist(x)
    theta_kq, theta_v = _tolist(proj.theta_kq), _tolist(proj.theta_v)
    eta_proj = _tolist(proj.eta_proj)
    shared = [_vecmat(row, theta_kq) for row in X]
    xk = _causal_conv(shared, _tolist(proj.conv1d_k))
    xq = _causal_conv(shared, _tolist(proj.conv1d_q))
    xv = [_vecmat(row, theta_v) for row in X]
    eta = [[eta_base * _sigmoid(g) for g in _vecmat(row, eta_proj)] for row in X]
    return xk, xq, xv, eta


def ttt_naive(x, cfg, proj, state):
    """Token-by-token inner loop with explicit ``G_t`` materialization.

    ``x`` is a single ``[T, D]`` sequence. Returns ``z`` as a ``[T, D]`` array
    and the final per-head states as an ``[nh, d, d]`` array.
    """
    T = len(x)
    nh, d = cfg.num_heads, cfg.head_dim
    if cfg.descent_mode == "online":
        b = 1
    elif cfg.descent_mode == "batch":
        b = T
    else:
        b = cfg.minibatch_size
    xk, xq, xv, eta = naive_projections(x, proj, nh, cfg.eta_base)
    W_all = _tolist(state.W)
    b_inner, gamma, beta = _tolist(state.b_inner), _tolist(state.ln_gamma), _tolist(state.ln_beta)
    eps = cfg.ln_eps
    ln = cfg.inner_model == "ln_residual"

    z = [[0.0] * (nh * d) for _ in range(T)]
    finals = []
    for h in range(nh):
        lo, hi = h * d, (h + 1) * d
        W = [row[:] for row in W_all[h]]
        W_enter = None
        for t in range(T):
            if t % b == 0:
                W_enter = [row[:] for row in W]
            k, q, v = xk[t][lo:hi], xq[t][lo:hi], xv[t][lo:hi]
            u = _matvec(W_enter, k)
            if ln:
                uh, sigma = _layer_norm_parts([u[i] + b_inner[h][i] for i in range(d)], eps)
                r = [k[i] + uh[i] * gamma[h][i] + beta[h][i] - v[i] for i in range(d)]
                g = [2.0 * r[i] * gamma[h][i] for i in range(d)]
                g_mean = sum(g) / d
                gx_mean = sum(g[i] * uh[i] for i in range(d)) / d
                du = [(g[i] - g_mean - uh[i] * gx_mean) / sigma for i in range(d)]
            else:
                du = [2.0 * (u[i] - v[i]) for i in range(d)]
            G = [[du[i] * k[j] for j in range(d)] for i in range(d)]
            lr = eta[t][h]
            for i in range(d):
                for j in range(d):
                    W[i][j] -= lr * G[i][j]
            wq = _matvec(W, q)
            if ln:
                wh, _ = _layer_norm_parts([wq[i] + b_inner[h][i] for i in range(d)], eps)
                out = [q[i] + wh[i] * gamma[h][i] + beta[h][i] for i in range(d)]
            else:
                out = wq
            z[t][lo:hi] = out
        finals.append(W)
    return np.array(z), np.array(finals)


def linear_attention_ref(xk, xq, xv):
    """Causal linear attention ``z_t = sum_{s<=t} v_s (k_s . q_t)`` for one head."""
    K_, Q, V = _tolist(xk), _tolist(xq), _tolist(xv)
    T, d = len(K_), len(V[0]) if V else 0
    z = []
    for t in range(T):
        acc = [0.0] * d
        for s in range(t + 1):
            w = _dot(K_[s], Q[t])
            for i in range(d):
                acc[i] += V[s][i] * w
        z.append(acc)
    return np.array(z).reshape(T, d)


def adapted_value_ref(xk, xq, xv, W0=None):
    """Linear attention over adapted values for one head.

    ``z_t = W0 q_t + sum_{s<=t} (v_s - W_{s-1} k_s)(k_s . q_t)`` where the state
    follows ``W_s = W_{s-1} + (v_s - W_{s-1} k_s) k_s^T``.
    """
    K_, Q, V = _tolist(xk), _tolist(xq), _tolist(xv)
    T, d = len(K_), len(V[0]) if V else 0
    W0 = [[0.0] * d for _ in range(d)] if W0 is None else _tolist(W0)
    W = [row[:] for row in W0]
    adapted = []
    for s in range(T):
        wk = _matvec(W, K_[s])
        a = [V[s][i] - wk[i] for i in range(d)]
        adapted.append(a)
        for i in range(d):
            for j in range(d):
                W[i][j] += a[i] * K_[s][j]
    z = []
    for t in range(T):
        acc = _matvec(W0, Q[t])
        for s in range(t + 1):
            w = _dot(K_[s], Q[t])
            for i in range(d):
                acc[i] += adapted[s][i] * w
        z.append(acc)
    return np.array(z).reshape(T, d)
