import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmbil.diffcore import (Mlp, NonFiniteError, OptimState, Tape, Tensor, adam_step,
                            backward, elu, mlp_forward)


def _fd_grad(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = fn()
        arr[idx] = old - h
        down = fn()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def test_zero_weights_output_equals_bias():
    net = Mlp(3, 2, hidden=5)
    for p in net.params:
        p.data[...] = 0.0
    net.params[-1].data[...] = [0.7, -1.2]
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(net, x).data, np.tile([0.7, -1.2], (4, 1)))


def test_elu_values():
    assert elu(0.0) == 0.0
    assert elu(-1.0) == pytest.approx(np.exp(-1) - 1)
    assert elu(-1.0) == pytest.approx(-0.6321, abs=1e-4)


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_forward_matches_tape_free_path(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(3, 2, hidden=7, seed=seed)
    x = rng.normal(size=(5, 3)) * 3
    taped = mlp_forward(net, Tensor(x), Tape()).data
    np.testing.assert_allclose(taped, net.reference_forward(x), rtol=1e-13, atol=1e-13)


def test_square_chain_derivative():
    tape = Tape()
    x = Tensor(np.array(3.0), requires_grad=True)
    y = tape.square(x)
    (g,) = backward(tape, y, np.array(1.0), [x])
    assert g == 6.0


def test_linear_map_gradient_is_outer_structure():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4,))
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    tape = Tape()
    y = tape.sum(tape.matmul(Tensor(x), w))
    (g,) = backward(tape, y, np.array(1.0), [w])
    np.testing.assert_array_equal(g, np.tile(x[:, None], (1, 3)))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_mlp_loss_gradient_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(2, 2, hidden=6, seed=seed)
    x = rng.normal(size=(8, 2))
    y = rng.normal(size=(8, 2))

    def loss_value():
        return float(np.sum((net.reference_forward(x) - y) ** 2))

    tape = Tape()
    out = mlp_forward(net, Tensor(x), tape)
    loss = tape.sum(tape.square(tape.sub(out, y)))
    grads = backward(tape, loss, np.array(1.0), net.params)
    for p, g in zip(net.params, grads):
        fd = _fd_grad(loss_value, p.data)
        rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert rel < 1e-4


def test_broadcast_ops_gradients():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    m = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)

    def build(tape):
        c = tape.mul(tape.add(a, b), tape.exp(tape.scale(a, 0.1)))
        d = tape.bmv(m, c)
        e = tape.concat([d, tape.slice(c, slice(1, 3))], axis=-1)
        return tape.sum(tape.square(tape.elu(tape.reshape(e, (12,)))))

    tape = Tape()
    out = build(tape)
    grads = backward(tape, out, np.array(1.0), [a, b, m])
    from rmbil.diffcore import NO_TAPE
    for t, g in zip([a, b, m], grads):
        fd = _fd_grad(lambda: float(build(NO_TAPE).data), t.data)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)


def test_non_finite_raises():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.exp(Tensor(np.array([1000.0])))


def test_backward_seed_shape_checked():
    tape = Tape()
    x = Tensor(np.ones(3), requires_grad=True)
    y = tape.scale(x, 2.0)
    with pytest.raises(ValueError):
        backward(tape, y, np.ones(2), [x])


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    x = Tensor(np.ones(2), requires_grad=True)
    z = Tensor(np.ones(3), requires_grad=True)
    (gz,) = backward(tape, tape.sum(x), np.array(1.0), [z])
    np.testing.assert_array_equal(gz, np.zeros(3))


def test_adam_zero_gradients_leave_params_unchanged():
    p = [Tensor(np.array([1.0, -2.0]), requires_grad=True)]
    st_ = OptimState.for_params(p, 0.01)
    adam_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(p[0].data, [1.0, -2.0])


def test_lr_halves_every_hundred_epochs():
    st_ = OptimState.for_params([Tensor(np.zeros(1))], 0.01)
    assert st_.lr_at(99) == 0.01
    assert st_.lr_at(100) == 0.5 * 0.01
    assert st_.lr_at(250) == 0.25 * 0.01


def test_adam_matches_scalar_reference_and_decreases():
    p = [Tensor(np.array([0.0]), requires_grad=True)]
    st_ = OptimState.for_params(p, 0.1)
    m = v = 0.0
    ref = 0.0
    prev = p[0].data[0]
    for k in range(1, 51):
        adam_step(p, [np.array([1.0])], st_, epoch=0)
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        ref -= 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        assert p[0].data[0] < prev
        prev = p[0].data[0]
        assert p[0].data[0] == pytest.approx(ref, rel=1e-12)


def test_adam_rejects_non_finite_gradients():
    p = [Tensor(np.zeros(1), requires_grad=True)]
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan])], OptimState.for_params(p, 0.1))


def test_mlp_copy_is_independent():
    net = Mlp(2, 1, hidden=3)
    other = net.copy()
    other.params[0].data += 1.0
    assert not np.allclose(net.params[0].data, other.params[0].data)
    assert other.shapes() == net.shapes()
