import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vittt.complexity import (
    CSV_COLUMNS,
    CostBudgetError,
    attention_layer,
    count_macs,
    flops_formula,
    flops_terms,
    grid_for,
    measure,
    mem_model,
    vittt_layer,
    write_csv,
)


def test_vittt_formula_at_tiny_scale():
    terms = flops_terms("vittt", 196, 192)
    assert terms == {"6TD^2": 43_352_064, "6TDd": 14_450_688, "4bTD": 2_408_448}
    assert flops_formula("vittt", 196, 192) == 60_211_200


def test_unit_arguments():
    assert flops_formula("vit", 1, 1) == 6
    assert flops_formula("vim", 1, 1, N=1) == 6 + 36
    assert flops_formula("vittt", 1, 1, d=1, b=1) == 16
    assert flops_formula("attention", 3, 5) == flops_formula("vit", 3, 5)


def test_formula_rejects_bad_input():
    with pytest.raises(ValueError):
        flops_formula("vittt", 0, 192)
    with pytest.raises(ValueError):
        flops_formula("rnn", 4, 4)
    with pytest.raises(ValueError):
        mem_model("rnn", 1, 4, 4)


@given(T=st.integers(1, 10_000), D=st.integers(1, 2048), d=st.integers(1, 128), b=st.integers(1, 64))
def test_vittt_formula_is_linear_in_sequence_length(T, D, d, b):
    assert flops_formula("vittt", 2 * T, D, d, b) == 2 * flops_formula("vittt", T, D, d, b)


@given(T=st.integers(1, 1000), D=st.integers(1, 512), d=st.integers(1, 64), b=st.integers(1, 64))
def test_vittt_terms_scale_termwise(T, D, d, b):
    base = flops_terms("vittt", T, D, d, b)
    assert flops_terms("vittt", T, D, d, 2 * b)["4bTD"] == 2 * base["4bTD"]
    doubled = flops_terms("vittt", T, 2 * D, d, b)
    assert doubled["6TD^2"] == 4 * base["6TD^2"]
    assert doubled["6TDd"] == 2 * base["6TDd"] and doubled["4bTD"] == 2 * base["4bTD"]
    assert sum(base.values()) == flops_formula("vittt", T, D, d, b)


def test_memory_models():
    vit = mem_model("vit", 2, 196, 192)
    assert ("BT^2", 2 * 196 * 196) in vit.terms
    vittt = mem_model("vittt", 2, 196, 192, 64, 16)
    assert [n for n, _ in vittt.terms] == ["BTD", "BTd", "BTDd/b"]
    assert vittt.reduced == [("BTD", 2 * 196 * 192)] and vittt.reduction_factor == 4
    vim = mem_model("vim", 1, 10, 8, N=16)
    assert ("BTDN", 10 * 8 * 16) in vim.terms
    for m in (vit, vittt, vim):
        assert all(v > 0 for _, v in m.terms + m.reduced)


@pytest.mark.parametrize("T,grid", [(196, (14, 14)), (64, (8, 8)), (12, (3, 4)), (7, (1, 7))])
def test_grid_for(T, grid):
    assert grid_for(T) == grid


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_measured_block_count_within_band(seed):
    reps = measure("vittt", [64, 256, 1024], seed=seed, timing=False)
    for r in reps:
        assert abs(r.flops_measured / r.flops_analytic - 1) <= 0.15


def test_measured_counts_do_not_depend_on_batch():
    one = measure("vittt", [64], B=1, timing=False)[0]
    two = measure("vittt", [64], B=2, timing=False)[0]
    assert one.flops_measured == two.flops_measured


def test_scaling_ratios():
    att = measure("attention", [1024, 2048], timing=False, budget=1e11)
    assert att[1].flops_measured / att[0].flops_measured > 3.0
    vt = measure("vittt", [1024, 2048], timing=False, budget=1e11)
    assert vt[1].flops_measured / vt[0].flops_measured <= 2.3


def test_attention_reference_count_is_exact():
    x = np.random.default_rng(0).standard_normal((1, 10, 8))
    assert count_macs(attention_layer(8), x) == flops_formula("vit", 10, 8)


def test_vittt_layer_requires_divisible_width():
    with pytest.raises(ValueError):
        vittt_layer(100, 64, 16)


def test_vim_has_no_measurement():
    rep = measure("vim", [64])[0]
    assert rep.flops_measured is None and rep.wallclock is None
    assert rep.flops_analytic == flops_formula("vim", 64, 192)


def test_budget_guard():
    with pytest.raises(CostBudgetError):
        measure("vittt", [4096], budget=1e8)


def test_timing_and_csv(tmp_path):
    reps = measure("vittt", [16], D=32, d=16, b=4, repeats=2, warmup=1, threads=1)
    assert reps[0].wallclock > 0
    path = write_csv(reps, tmp_path / "bench.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["arch"] == "vittt" and int(rows[0]["flops_measured"]) == reps[0].flops_measured
