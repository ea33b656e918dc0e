"""Executable property suites: dual form, theorem oracles, naive oracle, gradient check."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from vittt import oracles
from vittt.autodiff import cross_entropy
from vittt.backbone import ModelConfig, ModelParams, forward, init_params, preset
from vittt.training import loss_and_grads
from vittt.tree import iter_tensors, tree_map
from vittt.ttt import (
    TTTConfig,
    TTTHeadState,
    TTTProjections,
    project_kqv,
    ttt_forward,
    ttt_forward_dual,
    ttt_forward_primal,
)

SUITES = ("dual_form", "theorem1", "theorem2", "gradcheck", "oracle")


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    tolerance: float
    max_dev: float
    instances: int
    seconds: float = 0.0
    details: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}: max deviation {self.max_dev:.3e} (tol {self.tolerance:g}) "
                f"over {self.instances} instances")


def random_instance(rng: np.random.Generator, T: int, nh: int, d: int, *, eta: float | None = None,
                    w0: str = "random", conv: str = "random") -> tuple[np.ndarray, TTTProjections, TTTHeadState]:
    """Random ``(x, proj, state)`` scaled so that ``||k||^2`` stays near 1/4.

    With ``eta`` given, ``eta_proj`` is zero and every token's learning rate is
    ``eta_base / 2``; otherwise ``eta_proj`` is random.
    """
    D = nh * d
    x = rng.standard_normal((T, D))
    theta_kq = rng.normal(0.0, 0.5 / np.sqrt(D * d), (D, D))
    theta_v = rng.normal(0.0, 1.0 / np.sqrt(D), (D, D))
    eta_proj = np.zeros((D, nh)) if eta is not None else rng.normal(0.0, 1.0 / np.sqrt(D), (D, nh))
    if conv == "delta":
        proj = TTTProjections.identity_conv(theta_kq, theta_v, nh, eta_proj=eta_proj)
    else:
        proj = TTTProjections(theta_kq, theta_v, rng.normal(0.0, 0.5, (4, D)), rng.normal(0.0, 0.5, (4, D)), eta_proj)
    cfg = TTTConfig(nh, d)
    state = TTTHeadState.zeros(cfg)
    if w0 == "random":
        state.W = rng.normal(0.0, 0.3, (nh, d, d))
    return x, proj, state


def _dev(actual, expected) -> oracles.OracleReport:
    return oracles.compare(actual, expected, tol=np.inf, relative=True)


# -- dual form ---------------------------------------------------------------


def suite_dual_form(seeds: int = 200, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Dual vs primal outputs and final states, plain_linear with uniform eta."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failures, covered = 0.0, [], set()
    for i in range(seeds):
        T = int(rng.integers(1, 65))
        b_kind = ("1", "4", "16", "T")[i % 4]
        b = T if b_kind == "T" else int(b_kind)
        nh = int(rng.choice([1, 2, 4]))
        d = int(rng.choice([4, 8, 16]))
        eta_base = float(rng.uniform(0.1, 1.0))
        x, proj, state = random_instance(rng, T, nh, d, eta=eta_base)
        cfg = TTTConfig(nh, d, minibatch_size=b, eta_base=eta_base, inner_model="plain_linear")
        p = ttt_forward_primal(x, cfg, proj, state)
        q = ttt_forward_dual(x, cfg, proj, state)
        dev = max(_dev(q.z, p.z).max_rel_dev, _dev(q.W_final, p.W_final).max_rel_dev)
        covered.add((b_kind, nh, d))
        worst = max(worst, dev)
        if not dev < tol:
            failures.append({"instance": i, "T": T, "b": b, "nh": nh, "d": d, "dev": dev})
    return SuiteResult("dual_form", not failures, tol, worst, seeds, time.perf_counter() - start,
                       {"configs_covered": len(covered)}, failures)


# -- theorem oracles ---------------------------------------------------------


def _theorem_case(rng, T: int, nh: int, d: int, mode: str, form: str):
    """TTT output (eta = 1/2, W0 = 0) and the per-head projected inputs."""
    x, proj, state = random_instance(rng, T, nh, d, eta=1.0, w0="zero")
    cfg = TTTConfig(nh, d, eta_base=1.0, descent_mode=mode, inner_model="plain_linear", form=form)
    z = np.asarray(ttt_forward(x, cfg, proj, state).z)
    xk, xq, xv = (np.asarray(a) for a in project_kqv(x, proj, nh))
    return z, xk, xq, xv


def _per_head_ref(ref, xk, xq, xv) -> np.ndarray:
    heads = [ref(xk[h], xq[h], xv[h]) for h in range(xk.shape[0])]
    return np.concatenate(heads, axis=-1)


def _theorem_suite(name: str, mode: str, ref, seeds: int, seed: int, tol: float, T: int | None) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for i in range(seeds):
        t_len = T if T is not None else int(rng.integers(1, 65))
        nh, d = int(rng.choice([1, 2])), int(rng.choice([4, 8]))
        for form in ("primal", "dual"):
            z, xk, xq, xv = _theorem_case(np.random.default_rng([seed, i]), t_len, nh, d, mode, form)
            dev = oracles.compare(z, _per_head_ref(ref, xk, xq, xv), tol).max_abs_dev
            worst = max(worst, dev)
            if not dev < tol:
                failures.append({"instance": i, "T": t_len, "form": form, "dev": dev})
    return SuiteResult(name, not failures, tol, worst, seeds, time.perf_counter() - start, {}, failures)


def suite_theorem1(seeds: int = 100, seed: int = 0, tol: float = 1e-10, T: int | None = None) -> SuiteResult:
    """Batch descent (b = T) equals causal linear attention."""
    return _theorem_suite("theorem1", "batch", oracles.linear_attention_ref, seeds, seed, tol, T)


def theorems_differ(seeds: int = 100, seed: int = 0, T: int = 8, threshold: float = 1e-6) -> tuple[int, list[float]]:
    """How many random instances give batch and online outputs more than ``threshold`` apart."""
    devs = []
    for i in range(seeds):
        rng = np.random.default_rng([seed, 7919, i])
        nh, d = 1, int(rng.choice([4, 8]))
        x, proj, state = random_instance(rng, T, nh, d, eta=1.0, w0="zero")
        outs = []
        for mode in ("batch", "online"):
            cfg = TTTConfig(nh, d, eta_base=1.0, descent_mode=mode, inner_model="plain_linear")
            outs.append(np.asarray(ttt_forward(x, cfg, proj, state).z))
        devs.append(float(np.abs(outs[0] - outs[1]).max()))
    return sum(dv > threshold for dv in devs), devs


def suite_theorem2(seeds: int = 100, seed: int = 0, tol: float = 1e-10, T: int | None = None) -> SuiteResult:
    """Online descent (b = 1) equals the adapted-value recursion; batch and online differ."""
    res = _theorem_suite("theorem2", "online", oracles.adapted_value_ref, seeds, seed, tol, T)
    n_differ, _ = theorems_differ(seeds, seed)
    res.details["differ_count"] = n_differ
    res.details["differ_required"] = int(np.ceil(0.95 * seeds))
    if n_differ < res.details["differ_required"]:
        res.passed = False
        res.failures.append({"differ_count": n_differ})
    return res


# -- naive oracle ------------------------------------------------------------


def suite_oracle(seeds: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Token-loop oracle vs the fast paths for every descent mode and inner model."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failures, n = 0.0, [], 0
    variants = [(m, inner, form) for m in ("online", "minibatch", "batch")
                for inner, form in (("plain_linear", "primal"), ("plain_linear", "dual"), ("ln_residual", "primal"))]
    for i in range(seeds):
        T = int(rng.integers(1, 17))
        nh, d = 2, int(rng.choice([4, 8]))
        b = int(rng.integers(1, 9))
        x, proj, state = random_instance(rng, T, nh, d)
        state.b_inner = rng.normal(0.0, 0.5, (nh, d))
        state.ln_gamma = rng.normal(1.0, 0.3, (nh, d))
        state.ln_beta = rng.normal(0.0, 0.3, (nh, d))
        eta_base = float(rng.uniform(0.2, 1.0))
        for mode, inner, form in variants:
            cfg = TTTConfig(nh, d, minibatch_size=b, eta_base=eta_base, descent_mode=mode,
                            inner_model=inner, form=form)
            fast = ttt_forward(x, cfg, proj, state)
            z_ref, w_ref = oracles.ttt_naive(x, cfg, proj, state)
            dev = max(oracles.compare(fast.z, z_ref, tol).max_abs_dev,
                      oracles.compare(fast.W_final, w_ref, tol).max_abs_dev)
            n += 1
            worst = max(worst, dev)
            if not dev < tol:
                failures.append({"instance": i, "mode": mode, "inner": inner, "form": form, "dev": dev})
    return SuiteResult("oracle", not failures, tol, worst, n, time.perf_counter() - start, {}, failures)


# -- gradient check ----------------------------------------------------------


def gradcheck_config() -> ModelConfig:
    """Two-block model on 16x16 images with 4x4 patches: T = 16 tokens of width 16."""
    return preset("micro", ttt={"num_heads": 2, "head_dim": 8, "minibatch_size": 8})


def gradcheck_params(cfg: ModelConfig, seed: int = 0, std: float = 0.3) -> ModelParams:
    rng = np.random.default_rng(seed)
    base = init_params(cfg, seed=seed)
    return tree_map(lambda name, a: a + rng.normal(0.0, std, a.shape), base)


def suite_gradcheck(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, floor: float = 1e-8,
                    batch: int = 2, max_coords: int | None = None, cfg: ModelConfig | None = None) -> SuiteResult:
    """Autodiff gradients of the cross-entropy loss vs central differences.

    Every coordinate of every parameter is checked unless ``max_coords`` caps
    the number per tensor. Coordinates with ``|grad| <= floor`` are skipped.
    The relative error is ``|fd - g| / |g|``.
    """
    start = time.perf_counter()
    cfg = cfg or gradcheck_config()
    params = gradcheck_params(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    images = rng.standard_normal((batch, *cfg.image_size, cfg.channels))
    labels = rng.integers(0, cfg.num_classes, batch)
    grads = loss_and_grads(params, cfg, images, labels).grads

    def loss() -> float:
        return float(cross_entropy(forward(images, params, cfg).logits, labels))

    worst, failures, checked, skipped = 0.0, [], 0, 0
    per_tensor = {}
    for name, arr in iter_tensors(params):
        g = grads[name]
        idx = range(arr.size)
        if max_coords is not None and arr.size > max_coords:
            idx = rng.choice(arr.size, max_coords, replace=False)
        flat = arr.reshape(-1)
        tensor_worst = 0.0
        for j in idx:
            gj = float(g.reshape(-1)[j])
            if abs(gj) <= floor:
                skipped += 1
                continue
            orig = flat[j]
            flat[j] = orig + h
            lp = loss()
            flat[j] = orig - h
            lm = loss()
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - gj) / abs(gj)
            checked += 1
            tensor_worst = max(tensor_worst, rel)
            if not rel < tol:
                failures.append({"param": name, "index": int(j), "grad": gj, "fd": fd, "rel": rel})
        per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    details = {"checked": checked, "skipped_below_floor": skipped, "per_tensor_max_rel": per_tensor}
    return SuiteResult("gradcheck", not failures, tol, worst, checked, time.perf_counter() - start, details,
                       failures[:50])


def run_suite(name: str, seeds: int | None = None, seed: int = 0, T: int | None = None,
              max_coords: int | None = None) -> SuiteResult:
    if name == "dual_form":
        return suite_dual_form(seeds or 200, seed)
    if name == "theorem1":
        return suite_theorem1(seeds or 100, seed, T=T)
    if name == "theorem2":
        return suite_theorem2(seeds or 100, seed, T=T)
    if name == "oracle":
        return suite_oracle(seeds or 100, seed)
    if name == "gradcheck":
        return suite_gradcheck(seed, max_coords=max_coords)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
