import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vittt import oracles
from vittt.ttt import TTTConfig, TTTHeadState, TTTProjections, ttt_forward
from vittt.verify import random_instance


def scalar_model(a, b):
    """One head of width 1 where k = q = v = x and every eta is 1/2."""
    proj = TTTProjections.identity_conv(np.ones((1, 1)), np.ones((1, 1)), 1, eta_proj=np.zeros((1, 1)))
    state = TTTHeadState.zeros(TTTConfig(1, 1))
    return np.array([[a], [b]]), proj, state


@pytest.mark.parametrize("mode,expected", [("online", [0.125, 6.5]), ("batch", [0.125, 8.5])])
def test_scalar_hand_worked_example(mode, expected):
    # online: W1 = a^2, W2 = W1 + (b - W1 b) b; batch: W2 = a^2 + b^2
    x, proj, state = scalar_model(0.5, 2.0)
    cfg = TTTConfig(1, 1, eta_base=1.0, descent_mode=mode, inner_model="plain_linear")
    z_naive, _ = oracles.ttt_naive(x, cfg, proj, state)
    assert z_naive.ravel().tolist() == pytest.approx(expected, abs=1e-15)
    for form in ("primal", "dual"):
        z = np.asarray(ttt_forward(x, TTTConfig(1, 1, eta_base=1.0, descent_mode=mode,
                                                inner_model="plain_linear", form=form), proj, state).z)
        assert z.ravel().tolist() == pytest.approx(expected, abs=1e-15)


def test_linear_attention_single_token():
    k, q, v = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), np.array([[0.5, 4.0]])
    assert oracles.linear_attention_ref(k, q, v).tolist() == [[0.5, 4.0]]


def test_adapted_value_two_token_expansion(rng):
    k, q, v = rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    W1 = np.outer(v[0], k[0])
    a1 = v[1] - W1 @ k[1]
    z1 = v[0] * (k[0] @ q[1]) + a1 * (k[1] @ q[1])
    out = oracles.adapted_value_ref(k, q, v)
    assert np.abs(out[0] - v[0] * (k[0] @ q[0])).max() < 1e-14
    assert np.abs(out[1] - z1).max() < 1e-14


def test_adapted_value_with_initial_state(rng):
    k, q, v = rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    W0 = rng.standard_normal((3, 3))
    expected = W0 @ q[0] + (v[0] - W0 @ k[0]) * (k[0] @ q[0])
    assert np.abs(oracles.adapted_value_ref(k, q, v, W0)[0] - expected).max() < 1e-14


@given(c=st.floats(-4, 4), seed=st.integers(0, 1000))
def test_linear_attention_is_linear_in_values(c, seed):
    r = np.random.default_rng(seed)
    k, q, v = r.standard_normal((5, 3)), r.standard_normal((5, 3)), r.standard_normal((5, 3))
    base = oracles.linear_attention_ref(k, q, v)
    assert np.abs(oracles.linear_attention_ref(k, q, c * v) - c * base).max() < 1e-12


@given(c=st.floats(0.1, 3), seed=st.integers(0, 1000))
def test_linear_attention_is_bilinear_in_keys_and_queries(c, seed):
    r = np.random.default_rng(seed)
    k, q, v = r.standard_normal((5, 3)), r.standard_normal((5, 3)), r.standard_normal((5, 3))
    base = oracles.linear_attention_ref(k, q, v)
    assert np.abs(oracles.linear_attention_ref(c * k, q / c, v) - base).max() < 1e-12


def test_naive_oracle_is_causal(rng):
    x, proj, state = random_instance(rng, 6, 1, 4)
    cfg = TTTConfig(1, 4, minibatch_size=2)
    z, _ = oracles.ttt_naive(x, cfg, proj, state)
    y = x.copy()
    y[4] += 1.0
    z2, _ = oracles.ttt_naive(y, cfg, proj, state)
    assert np.array_equal(z[:4], z2[:4])


def test_naive_projections_match_shapes_and_eta_range(rng):
    x, proj, _ = random_instance(rng, 5, 2, 3)
    xk, xq, xv, eta = oracles.naive_projections(x, proj, 2, 0.4)
    assert np.shape(xk) == np.shape(xq) == np.shape(xv) == (5, 6)
    assert np.shape(eta) == (5, 2)
    assert all(0 < e < 0.4 for row in eta for e in row)


def test_compare_reports_location_and_relative_deviation():
    e = np.zeros((3, 4))
    e[0, 0] = 2.0
    a = e.copy()
    a[2, 3] = 0.5
    rep = oracles.compare(a, e, tol=0.3, relative=True, head_dim=2)
    assert rep.max_abs_dev == 0.5 and rep.max_rel_dev == 0.25
    assert rep.arg_max_location == (1, 2, 1)
    assert rep.passed
    assert not oracles.compare(a, e, tol=0.3).passed


def test_compare_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        oracles.compare(np.zeros(3), np.zeros(4), tol=1.0)


def test_compare_with_zero_reference_falls_back_to_absolute():
    rep = oracles.compare(np.full(2, 1e-3), np.zeros(2), tol=1e-2, relative=True)
    assert rep.max_rel_dev == rep.max_abs_dev == 1e-3 and rep.passed
