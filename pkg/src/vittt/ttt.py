"""Test-time-training sequence layer.

The hidden state of each head is the weight matrix ``W`` of a small inner
model trained by gradient descent on the reconstruction loss
``||f(x_k; W) - x_v||^2`` while the sequence is scanned. Tokens are rows, so
``W`` acts on column vectors and ``W @ k`` is written ``k @ W.T``.

Within a mini-batch every gradient is taken at the state the mini-batch was
entered with, and token ``t`` is read out from the causally accumulated state
``W_t = W_{t-1} - eta_t * G_t``. The primal form materializes every ``G_t`` and
``W_t``; the dual form reaches the same outputs with masked matmuls.

All functions accept plain arrays or :class:`vittt.autodiff.Var` handles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from vittt import autodiff as ad
from vittt import tensor as K

DESCENT_MODES = ("online", "minibatch", "batch")
INNER_MODELS = ("plain_linear", "ln_residual")
FORMS = ("primal", "dual")


@dataclass(frozen=True)
class TTTConfig:
    num_heads: int
    head_dim: int
    minibatch_size: int = 16
    eta_base: float = 1.0
    descent_mode: str = "minibatch"
    inner_model: str = "ln_residual"
    form: str = "primal"
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be positive")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.eta_base < 0:
            raise ValueError("eta_base must be non-negative")
        if self.descent_mode not in DESCENT_MODES:
            raise ValueError(f"descent_mode must be one of {DESCENT_MODES}")
        if self.inner_model not in INNER_MODELS:
            raise ValueError(f"inner_model must be one of {INNER_MODELS}")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if self.form == "dual" and self.inner_model != "plain_linear":
            raise ValueError("the dual form is only defined for the plain_linear inner model")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    def effective_minibatch(self, seq_len: int) -> int:
        if self.descent_mode == "online":
            return 1
        if self.descent_mode == "batch":
            return seq_len
        return self.minibatch_size

    def num_minibatches(self, seq_len: int) -> int:
        return math.ceil(seq_len / self.effective_minibatch(seq_len))


@dataclass
class TTTHeadState:
    W: np.ndarray  # [nh, d, d]
    b_inner: np.ndarray  # [nh, d]
    ln_gamma: np.ndarray  # [nh, d]
    ln_beta: np.ndarray  # [nh, d]

    @classmethod
    def zeros(cls, cfg: TTTConfig) -> "TTTHeadState":
        nh, d = cfg.num_heads, cfg.head_dim
        return cls(
            W=K.asarray(np.zeros((nh, d, d))),
            b_inner=K.asarray(np.zeros((nh, d))),
            ln_gamma=K.asarray(np.ones((nh, d))),
            ln_beta=K.asarray(np.zeros((nh, d))),
        )

    @classmethod
    def random(cls, cfg: TTTConfig, rng: np.random.Generator, std: float = 0.02) -> "TTTHeadState":
        state = cls.zeros(cfg)
        state.W = K.asarray(rng.normal(0.0, std, state.W.shape))
        return state


@dataclass
class TTTProjections:
    theta_kq: np.ndarray  # [D, D], shared by keys and queries
    theta_v: np.ndarray  # [D, D]
    conv1d_k: np.ndarray  # [K, D]
    conv1d_q: np.ndarray  # [K, D]
    eta_proj: np.ndarray  # [D, nh]

    @classmethod
    def init(
        cls, cfg: TTTConfig, rng: np.random.Generator, conv_size: int = 4, std: float = 0.02
    ) -> "TTTProjections":
        D, nh = cfg.dim, cfg.num_heads
        return cls(
            theta_kq=K.asarray(rng.normal(0.0, std, (D, D))),
            theta_v=K.asarray(rng.normal(0.0, std, (D, D))),
            conv1d_k=K.asarray(rng.normal(0.0, std, (conv_size, D))),
            conv1d_q=K.asarray(rng.normal(0.0, std, (conv_size, D))),
            eta_proj=K.asarray(rng.normal(0.0, std, (D, nh))),
        )

    @classmethod
    def identity_conv(
        cls, theta_kq, theta_v, num_heads: int, conv_size: int = 4, eta_proj=None
    ) -> "TTTProjections":
        """Projections whose causal convs are delta taps (pass-through)."""
        D = np.shape(theta_kq)[0]
        delta = np.zeros((conv_size, D))
        delta[-1] = 1.0
        return cls(
            theta_kq=K.asarray(theta_kq),
            theta_v=K.asarray(theta_v),
            conv1d_k=K.asarray(delta),
            conv1d_q=K.asarray(delta.copy()),
            eta_proj=K.asarray(np.zeros((D, num_heads)) if eta_proj is None else eta_proj),
        )


class TTTResult(NamedTuple):
    z: object  # [..., T, D]
    W_final: object  # [..., nh, d, d]
    trace: np.ndarray  # [..., n_minibatches, nh] mean reconstruction loss


@dataclass
class TTTDiagnostics:
    """Optional sink for per-token intermediates of one TTT pass."""

    xk: np.ndarray | None = None  # [..., nh, T, d]
    xv: np.ndarray | None = None
    W_entering: list[np.ndarray] = field(default_factory=list)  # per mini-batch, [..., nh, d, d]
    grad_norms: np.ndarray | None = None  # [..., nh, T] Frobenius norms of G_t
    losses: np.ndarray | None = None  # [..., nh, T] per-token loss at the entering state
    trace: np.ndarray | None = None


def split_heads(x, num_heads: int):
    """``[..., T, D]`` -> ``[..., nh, T, d]``."""
    shape = ad.value(x).shape
    *lead, t, dim = shape
    x = ad.reshape(x, (*lead, t, num_heads, dim // num_heads))
    n = len(lead)
    return ad.transpose(x, (*range(n), n + 1, n, n + 2))


def merge_heads(x):
    """``[..., nh, T, d]`` -> ``[..., T, D]``."""
    *lead, nh, t, d = ad.value(x).shape
    n = len(lead)
    x = ad.transpose(x, (*range(n), n + 1, n, n + 2))
    return ad.reshape(x, (*lead, t, nh * d))


def project_kqv(x, proj: TTTProjections, num_heads: int):
    """Shared key/query projection followed by separate causal convs."""
    shared = ad.matmul(x, proj.theta_kq)
    xk = ad.dwconv1d_causal(shared, proj.conv1d_k)
    xq = ad.dwconv1d_causal(shared, proj.conv1d_q)
    xv = ad.matmul(x, proj.theta_v)
    return split_heads(xk, num_heads), split_heads(xq, num_heads), split_heads(xv, num_heads)


def token_eta(x, proj: TTTProjections, cfg: TTTConfig):
    """Per-token, per-head learning rate ``eta_base * sigmoid(x @ eta_proj)`` as ``[..., nh, T, 1]``."""
    gate = ad.sigmoid(ad.matmul(x, proj.eta_proj))  # [..., T, nh]
    eta = ad.scale(ad.mT(gate), cfg.eta_base)
    return ad.reshape(eta, (*ad.value(eta).shape, 1))


# -- single-token inner objective (plain numpy) ------------------------------


def _ln_parts(u: np.ndarray, eps: float):
    mu = u.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((u - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    return (u - mu) / sigma, sigma


def reconstruction(W, xk, inner_model: str, b_inner=None, ln_gamma=None, ln_beta=None, eps: float = 1e-6):
    """Inner model output ``f(xk; W)`` for ``W [..., d, d]`` and ``xk [..., d]``."""
    W, xk = np.asarray(W), np.asarray(xk)
    u = np.einsum("...ij,...j->...i", W, xk)
    if inner_model == "plain_linear":
        return u
    xhat, _ = _ln_parts(u + b_inner, eps)
    return xk + xhat * ln_gamma + ln_beta


def inner_loss(W, xk, xv, inner_model: str = "plain_linear", b_inner=None, ln_gamma=None, ln_beta=None,
               eps: float = 1e-6):
    """Squared reconstruction error ``||f(xk; W) - xv||^2`` (reduced over the last axis)."""
    r = reconstruction(W, xk, inner_model, b_inner, ln_gamma, ln_beta, eps) - np.asarray(xv)
    return (r * r).sum(axis=-1)


def inner_grad(W, xk, xv, inner_model: str = "plain_linear", b_inner=None, ln_gamma=None, ln_beta=None,
               eps: float = 1e-6):
    """Exact gradient of :func:`inner_loss` with respect to ``W``, shape ``[..., d, d]``."""
    W, xk, xv = np.asarray(W), np.asarray(xk), np.asarray(xv)
    u = np.einsum("...ij,...j->...i", W, xk)
    if inner_model == "plain_linear":
        du = 2.0 * (u - xv)
    else:
        xhat, sigma = _ln_parts(u + b_inner, eps)
        r = xk + xhat * ln_gamma + ln_beta - xv
        g = 2.0 * r * ln_gamma
        du = (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / sigma
    return du[..., :, None] * xk[..., None, :]


# -- differentiable mini-batch pieces ----------------------------------------


def _per_head(p):
    """[nh, d] -> [nh, 1, d] so it lines up with [..., nh, b, d]."""
    nh, d = ad.value(p).shape
    return ad.reshape(p, (nh, 1, d))


def _ln_forward(u, eps: float):
    mu = ad.mean(u, axis=-1, keepdims=True)
    c = ad.sub(u, mu)
    var = ad.mean(ad.square(c), axis=-1, keepdims=True)
    sigma = ad.sqrt(ad.add(var, eps))
    return ad.div(c, sigma), sigma


def _residual_grad(zre, kb, vb, cfg: TTTConfig, state: TTTHeadState):
    """Residual and ``dloss/du`` for a mini-batch, where ``u = W_entering k``."""
    if cfg.inner_model == "plain_linear":
        r = ad.sub(zre, vb)
        return r, ad.scale(r, 2.0)
    gamma = _per_head(state.ln_gamma)
    beta = _per_head(state.ln_beta)
    xhat, sigma = _ln_forward(ad.add(zre, _per_head(state.b_inner)), cfg.ln_eps)
    r = ad.sub(ad.add(kb, ad.add(ad.mul(xhat, gamma), beta)), vb)
    g = ad.mul(ad.scale(r, 2.0), gamma)
    centred = ad.sub(g, ad.mean(g, axis=-1, keepdims=True))
    proj = ad.mul(xhat, ad.mean(ad.mul(g, xhat), axis=-1, keepdims=True))
    return r, ad.div(ad.sub(centred, proj), sigma)


def _readout(wq, qb, cfg: TTTConfig, state: TTTHeadState):
    """Output rule applied to ``wq = W_t q_t``."""
    if cfg.inner_model == "plain_linear":
        return wq
    xhat, _ = _ln_forward(ad.add(wq, _per_head(state.b_inner)), cfg.ln_eps)
    return ad.add(qb, ad.add(ad.mul(xhat, _per_head(state.ln_gamma)), _per_head(state.ln_beta)))


def _seq_slice(x, start: int, stop: int):
    return ad.getitem(x, (Ellipsis, slice(start, stop), slice(None)))


def ttt_core(xk, xq, xv, eta, cfg: TTTConfig, state: TTTHeadState, form: str | None = None,
             sink: TTTDiagnostics | None = None) -> TTTResult:
    """Run the inner loop on pre-projected heads.

    ``xk``, ``xq``, ``xv`` are ``[..., nh, T, d]``; ``eta`` is ``[..., nh, T, 1]``
    or a scalar. Returns head-layout outputs in ``TTTResult.z``.
    """
    form = form or cfg.form
    if form == "dual" and cfg.inner_model != "plain_linear":
        raise ValueError("the dual form is only defined for the plain_linear inner model")
    shape = ad.value(xk).shape
    t_len = shape[-2]
    if t_len < 1:
        raise ValueError("sequence must contain at least one token")
    b = cfg.effective_minibatch(t_len)
    scalar_eta = np.ndim(ad.value(eta)) == 0 and not isinstance(eta, ad.Var)

    W = state.W
    outputs, trace = [], []
    norms, losses = [], []
    if sink is not None:
        sink.xk, sink.xv = ad.value(xk), ad.value(xv)
    for start in range(0, t_len, b):
        stop = min(start + b, t_len)
        kb, qb, vb = (_seq_slice(a, start, stop) for a in (xk, xq, xv))
        eb = eta if scalar_eta else _seq_slice(eta, start, stop)
        if sink is not None:
            d = shape[-1]
            sink.W_entering.append(np.array(np.broadcast_to(ad.value(W), (*shape[:-2], d, d))))

        zre = ad.matmul(kb, ad.mT(W))
        r, du = _residual_grad(zre, kb, vb, cfg, state)
        rv = ad.value(r)
        tok_loss = (rv * rv).sum(axis=-1)  # [..., nh, b]
        trace.append(tok_loss.mean(axis=-1))
        if sink is not None:
            losses.append(tok_loss)
            norms.append(np.linalg.norm(ad.value(du), axis=-1) * np.linalg.norm(ad.value(kb), axis=-1))

        if form == "dual":
            r_eta = ad.mul(r, eb)
            attn = ad.causal_mask(ad.matmul(qb, ad.mT(kb)))
            z = ad.sub(ad.matmul(qb, ad.mT(W)), ad.scale(ad.matmul(attn, r_eta), 2.0))
            W = ad.sub(W, ad.scale(ad.matmul(ad.mT(r_eta), kb), 2.0))
        else:
            nb = stop - start
            lead = ad.value(du).shape[:-1]
            d = ad.value(du).shape[-1]
            grads = ad.mul(ad.reshape(du, (*lead, d, 1)), ad.reshape(kb, (*lead, 1, d)))
            if scalar_eta:
                steps = ad.scale(grads, float(eb))
            else:
                steps = ad.mul(grads, ad.reshape(eb, (*ad.value(eb).shape, 1)))
            w_tok = ad.sub(ad.reshape(W, (*ad.value(W).shape[:-2], 1, d, d)), ad.cumsum(steps, axis=-3))
            wq = ad.reshape(ad.matmul(w_tok, ad.reshape(qb, (*lead, d, 1))), (*lead, d))
            z = _readout(wq, qb, cfg, state)
            W = ad.getitem(w_tok, (Ellipsis, nb - 1, slice(None), slice(None)))
        outputs.append(z)

    z = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=-2)
    trace_arr = np.stack(trace, axis=-2)  # [..., n_mb, nh]
    if sink is not None:
        sink.losses = np.concatenate(losses, axis=-1)
        sink.grad_norms = np.concatenate(norms, axis=-1)
        sink.trace = trace_arr
    return TTTResult(z, W, trace_arr)


def _forward(x, cfg: TTTConfig, proj: TTTProjections, state: TTTHeadState, form: str, sink) -> TTTResult:
    shape = ad.value(x).shape
    if shape[-1] != cfg.dim:
        raise K.DimensionError(f"input width {shape[-1]} != num_heads * head_dim = {cfg.dim}")
    xk, xq, xv = project_kqv(x, proj, cfg.num_heads)
    eta = token_eta(x, proj, cfg)
    res = ttt_core(xk, xq, xv, eta, cfg, state, form=form, sink=sink)
    return TTTResult(merge_heads(res.z), res.W_final, res.trace)


def ttt_forward_primal(x, cfg: TTTConfig, proj: TTTProjections, state: TTTHeadState,
                       sink: TTTDiagnostics | None = None) -> TTTResult:
    """Primal form: every ``G_t`` and ``W_t`` is materialized."""
    return _forward(x, cfg, proj, state, "primal", sink)


def ttt_forward_dual(x, cfg: TTTConfig, proj: TTTProjections, state: TTTHeadState,
                     sink: TTTDiagnostics | None = None) -> TTTResult:
    """Dual form: masked matmuls over each mini-batch, plain_linear only."""
    if cfg.inner_model != "plain_linear":
        raise ValueError("the dual form is only defined for the plain_linear inner model")
    return _forward(x, cfg, proj, state, "dual", sink)


def ttt_forward(x, cfg: TTTConfig, proj: TTTProjections, state: TTTHeadState,
                sink: TTTDiagnostics | None = None) -> TTTResult:
    return _forward(x, cfg, proj, state, cfg.form, sink)
