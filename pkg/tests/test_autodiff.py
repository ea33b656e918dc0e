import numpy as np
import pytest

from vittt import autodiff as ad
from vittt import tensor as K


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(fn, *shapes, seed=0, tol=1e-6, positive=False):
    """Gradient of ``sum(fn(*inputs) * w)`` for random projection weights ``w``."""
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal(s) for s in shapes]
    if positive:
        inputs = [np.abs(x) + 0.5 for x in inputs]
    w = rng.standard_normal(np.shape(fn(*inputs)))

    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    tape.backward(ad.sum(ad.mul(fn(*leaves), w)))
    for i, x in enumerate(inputs):
        def scalar(v, i=i):
            args = list(inputs)
            args[i] = v
            return float((np.asarray(fn(*args)) * w).sum())

        num = numeric_grad(scalar, x)
        err = np.abs(leaves[i].grad - num).max() / max(np.abs(num).max(), 1e-8)
        assert err < tol, (fn, i, err)


PRIMITIVES = [
    (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    (lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    (lambda a, b: ad.sub(a, b), [(3, 1), (3, 4)], False),
    (lambda a, b: ad.mul(a, b), [(2, 3), (2, 3)], False),
    (lambda a, b: ad.div(a, b), [(2, 3), (2, 3)], True),
    (lambda a: ad.scale(a, -2.5), [(3, 3)], False),
    (lambda a: ad.square(a), [(4,)], False),
    (lambda a: ad.sqrt(a), [(4,)], True),
    (lambda a: ad.exp(a), [(4,)], False),
    (lambda a: ad.log(a), [(4,)], True),
    (lambda a: ad.sigmoid(a), [(2, 5)], False),
    (lambda a: ad.silu(a), [(2, 5)], False),
    (lambda a: ad.gelu(a), [(2, 5)], False),
    (lambda a: ad.flip_seq(a), [(4, 3)], False),
    (lambda a: ad.causal_mask(a), [(2, 4, 4)], False),
    (lambda a: ad.cumsum(a, axis=-2), [(5, 3)], False),
    (lambda a: ad.sum(a, axis=0), [(3, 4)], False),
    (lambda a: ad.mean(a, axis=-1, keepdims=True), [(3, 4)], False),
    (lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
    (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    (lambda a: ad.getitem(a, (Ellipsis, np.array([0, 2, 2]), slice(None))), [(4, 3)], False),
    (lambda a, b: ad.concat([a, b], axis=-2), [(2, 3), (4, 3)], False),
    (lambda a: ad.broadcast_to(a, (3, 4)), [(1, 4)], False),
    (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)], False),
    (lambda x, k: ad.dwconv1d_causal(x, k), [(6, 3), (4, 3)], False),
    (lambda x, k: ad.dwconv2d(x, k), [(3, 4, 2), (3, 3, 2)], False),
]


@pytest.mark.parametrize("case", range(len(PRIMITIVES)))
def test_primitive_gradients_over_seeds(case):
    fn, shapes, positive = PRIMITIVES[case]
    for seed in range(20):
        check(fn, *shapes, seed=seed, positive=positive)


def test_cross_entropy_gradient():
    labels = np.array([0, 2, 1])
    for seed in range(20):
        z = np.random.default_rng(seed).standard_normal((3, 4))
        tape = ad.Tape()
        v = tape.leaf(z)
        tape.backward(ad.cross_entropy(v, labels))
        num = numeric_grad(lambda a: float(ad.cross_entropy(a, labels)), z)
        assert np.abs(v.grad - num).max() < 1e-8


def test_forward_values_unchanged_by_recording():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    tape = ad.Tape()
    c = ad.matmul(tape.leaf(a), tape.leaf(b))
    assert np.array_equal(c.value, K.matmul(a, b))


def test_tape_grows_by_one_per_op():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    n = len(tape)
    y = ad.sigmoid(x)
    assert len(tape) == n + 1
    ad.matmul(y, x)
    assert len(tape) == n + 2


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    x = tape.leaf(rng.standard_normal((4, 6)))
    k = tape.leaf(rng.standard_normal((4, 6)))
    y = ad.layer_norm(ad.gelu(ad.dwconv1d_causal(x, k)), np.ones(6), np.zeros(6))
    z = ad.sum(ad.matmul(ad.mT(y), y))
    recorded = [n.value for n in tape.nodes]
    replayed = tape.replay()
    assert all(np.array_equal(a, b) for a, b in zip(recorded, replayed))
    assert np.array_equal(replayed[z.index], z.value)


def test_sum_gradient_is_ones():
    tape = ad.Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    grads = tape.backward(ad.sum(x))
    assert np.array_equal(grads[x], np.ones((2, 3)))


def test_square_at_three():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    tape.backward(ad.mul(x, x))
    assert float(x.grad) == 6.0


def test_shared_use_accumulates():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    tape.backward(ad.sum(ad.add(ad.mul(x, x), ad.scale(x, 3.0))))
    assert np.array_equal(x.grad, 2 * np.array([1.0, 2.0]) + 3)


def test_unused_input_gets_exact_zero():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    unused = tape.leaf(np.full(3, 7.0))
    grads = tape.backward(ad.sum(ad.exp(x)))
    assert np.array_equal(grads[unused], np.zeros(3))


def test_backward_contract_errors():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.TapeError):
        tape.backward(ad.exp(x))  # not scalar
    other = ad.Tape()
    with pytest.raises(ad.TapeError):
        other.backward(ad.sum(x))  # recorded on a different tape
    loss = ad.sum(x)
    tape.backward(loss)
    with pytest.raises(ad.TapeError):
        tape.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.exp(x)


def test_plain_arrays_bypass_the_tape():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray) and np.array_equal(out, [2.0, 2.0])
