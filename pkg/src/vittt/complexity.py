"""Analytic FLOPs and memory models, checked against the kernel MAC counter.

Counts are multiply-accumulates of matmul and convolution kernels, per
sample; elementwise work is not counted.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from vittt import tensor as K
from vittt.block import BlockConfig, block_forward, init_block
from vittt.ttt import TTTConfig

ARCHS = ("vit", "vim", "vittt")
MEASURABLE = ("vittt", "attention")
CSV_COLUMNS = ("arch", "T", "D", "d", "b", "B", "flops_analytic", "flops_measured", "wallclock_ms", "threads")


class CostBudgetError(RuntimeError):
    """A benchmark sweep would exceed the configured MAC budget."""


def _positive(**kw) -> None:
    for name, v in kw.items():
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")


def flops_formula(arch: str, T: int, D: int, d: int = 64, b: int = 16, N: int = 16) -> int:
    """Per-sample cost of one token mixer at sequence length ``T`` and width ``D``."""
    _positive(T=T, D=D, d=d, b=b, N=N)
    if arch == "vit":
        return 4 * T * D * D + 2 * T * T * D
    if arch == "vim":
        return 6 * T * D * D + 18 * T * (2 * D) * N
    if arch == "vittt":
        return 6 * T * D * D + 6 * T * D * d + 4 * b * T * D
    if arch == "attention":
        return flops_formula("vit", T, D)
    raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")


def flops_terms(arch: str, T: int, D: int, d: int = 64, b: int = 16, N: int = 16) -> dict[str, int]:
    _positive(T=T, D=D, d=d, b=b, N=N)
    return {
        "vit": {"4TD^2": 4 * T * D * D, "2T^2D": 2 * T * T * D},
        "vim": {"6TD^2": 6 * T * D * D, "18T(2D)N": 18 * T * 2 * D * N},
        "vittt": {"6TD^2": 6 * T * D * D, "6TDd": 6 * T * D * d, "4bTD": 4 * b * T * D},
    }[arch]


@dataclass
class MemModel:
    arch: str
    terms: list[tuple[str, int]]  # labeled asymptotic terms evaluated at the arguments
    reduced: list[tuple[str, int]]  # after kernel fusion and recomputation
    reduction_factor: float | None = None  # d / b for vittt


def mem_model(arch: str, B: int, T: int, D: int, d: int = 64, b: int = 16, N: int = 16) -> MemModel:
    _positive(B=B, T=T, D=D, d=d, b=b, N=N)
    btd = ("BTD", B * T * D)
    if arch == "vit":
        return MemModel(arch, [btd, ("BT^2", B * T * T)], [btd, ("BT^2", B * T * T)])
    if arch == "vim":
        return MemModel(arch, [btd, ("BTDN", B * T * D * N)], [btd])
    if arch == "vittt":
        terms = [btd, ("BTd", B * T * d), ("BTDd/b", B * T * D * d // b)]
        return MemModel(arch, terms, [btd], d / b)
    raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")


# -- measurement -------------------------------------------------------------


@dataclass
class ComplexityReport:
    arch: str
    T: int
    D: int
    d: int
    b: int
    N: int
    B: int
    flops_analytic: int
    mem_asymptotic_terms: list[tuple[str, int]] = field(default_factory=list)
    flops_measured: int | None = None
    wallclock: float | None = None  # seconds per batch forward, median
    threads: int = 1

    def row(self) -> dict:
        return {
            "arch": self.arch, "T": self.T, "D": self.D, "d": self.d, "b": self.b, "B": self.B,
            "flops_analytic": self.flops_analytic,
            "flops_measured": "" if self.flops_measured is None else self.flops_measured,
            "wallclock_ms": "" if self.wallclock is None else f"{self.wallclock * 1e3:.3f}",
            "threads": self.threads,
        }


def grid_for(T: int) -> tuple[int, int]:
    """Most nearly square ``(rows, cols)`` factorization of ``T``."""
    rows = max(h for h in range(1, int(np.sqrt(T)) + 1) if T % h == 0)
    return rows, T // rows


def vittt_layer(D: int, d: int, b: int, seed: int = 0):
    """A bidirectional plain-linear Vittt block in dual form; returns ``run(x)``."""
    if D % d:
        raise ValueError(f"D={D} is not a multiple of d={d}")
    ttt = TTTConfig(num_heads=D // d, head_dim=d, minibatch_size=b, inner_model="plain_linear", form="dual")
    cfg = BlockConfig(ttt=ttt)
    params = init_block(cfg, np.random.default_rng(seed))

    def run(x):
        return block_forward(x, grid_for(x.shape[-2]), params, cfg).y

    return run


def attention_layer(D: int, seed: int = 0):
    """Single-head softmax self-attention with Q/K/V/O projections; returns ``run(x)``."""
    rng = np.random.default_rng(seed)
    wq, wk, wv, wo = (K.asarray(rng.normal(0, 0.02, (D, D))) for _ in range(4))

    def run(x):
        q, k, v = K.matmul(x, wq), K.matmul(x, wk), K.matmul(x, wv)
        s = K.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(D)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        return K.matmul(K.matmul(p, v), wo)

    return run


def count_macs(run, x) -> int:
    with K.counter.counting() as c:
        run(x)
        return c.total


def measure(arch: str, T_values, D: int = 192, d: int = 64, b: int = 16, B: int = 1, N: int = 16,
            seed: int = 0, threads: int = 1, timing: bool = True, repeats: int = 5, warmup: int = 2,
            budget: float = 2e10) -> list[ComplexityReport]:
    """Counted MACs and median wall time of one forward per sequence length.

    ``arch`` is ``vittt`` (the block in dual form), ``attention`` (the quadratic
    reference) or ``vim`` (analytic only; measured fields stay empty). The
    sweep is refused up front when its analytic cost, summed over the timing
    repeats, exceeds ``budget`` MACs.
    """
    T_values = [int(t) for t in T_values]
    if arch not in (*ARCHS, "attention"):
        raise ValueError(f"unknown arch {arch!r}")
    runs = 1 + (warmup + repeats if timing else 0)
    planned = sum(flops_formula(arch, t, D, d, b, N) for t in T_values) * B * runs
    if arch in MEASURABLE and planned > budget:
        raise CostBudgetError(f"sweep needs about {planned:.3g} MACs, budget is {budget:.3g}")

    mem_arch = "vit" if arch == "attention" else arch
    reports = []
    for t in T_values:
        rep = ComplexityReport(arch, t, D, d, b, N, B, flops_formula(arch, t, D, d, b, N),
                               mem_model(mem_arch, B, t, D, d, b, N).terms, threads=threads)
        if arch in MEASURABLE:
            run = vittt_layer(D, d, b, seed) if arch == "vittt" else attention_layer(D, seed)
            x = K.asarray(np.random.default_rng(seed + t).standard_normal((B, t, D)))
            with threadpool_limits(limits=threads):
                rep.flops_measured = count_macs(run, x) // B
                if timing:
                    for _ in range(warmup):
                        run(x)
                    times = []
                    for _ in range(repeats):
                        start = time.perf_counter()
                        run(x)
                        times.append(time.perf_counter() - start)
                    rep.wallclock = statistics.median(times)
        reports.append(rep)
    return reports


def write_csv(reports: list[ComplexityReport], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path
