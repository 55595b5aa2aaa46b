import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tkgwalk import diffnet as dn
from tkgwalk.diffnet import AdamState, RecurrentCellParams, Tensor
from tkgwalk.errors import ContractViolation, NonFiniteError


def _cell(w_ih, w_hh, b, grad=False):
    return RecurrentCellParams(Tensor(w_ih, grad), Tensor(w_hh, grad), Tensor(b, grad))


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_zero_cell_gives_zero_hidden():
    p = _cell(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    h, c = dn.recurrent_step(p, Tensor(np.zeros(2)), Tensor(np.zeros(2)), Tensor(np.array([1.0, -2.0, 3.0])))
    assert np.array_equal(h.value, np.zeros(2)) and np.array_equal(c.value, np.zeros(2))


def test_hand_computed_cell():
    w_ih = np.arange(16, dtype=float).reshape(8, 2) / 20 - 0.4
    w_hh = np.arange(16, dtype=float)[::-1].reshape(8, 2) / 25 - 0.3
    b = np.linspace(-0.2, 0.2, 8)
    x, h0, c0 = [0.5, -1.0], [0.1, 0.2], [-0.3, 0.4]
    # scalar loops, gate order input, forget, candidate, output
    z = [sum(w_ih[r][k] * x[k] for k in range(2)) + sum(w_hh[r][k] * h0[k] for k in range(2)) + b[r]
         for r in range(8)]
    want_h, want_c = [], []
    for j in range(2):
        i, f, g, o = _sig(z[j]), _sig(z[2 + j]), math.tanh(z[4 + j]), _sig(z[6 + j])
        c = f * c0[j] + i * g
        want_c.append(c)
        want_h.append(o * math.tanh(c))
    h, c = dn.recurrent_step(_cell(w_ih, w_hh, b), Tensor(np.array(h0)), Tensor(np.array(c0)), Tensor(np.array(x)))
    assert np.allclose(h.value, want_h, atol=1e-6, rtol=0)
    assert np.allclose(c.value, want_c, atol=1e-6, rtol=0)


def test_cell_shape_mismatch():
    p = _cell(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    with pytest.raises(ContractViolation):
        dn.recurrent_step(p, Tensor(np.zeros(2)), Tensor(np.zeros(2)), Tensor(np.zeros(4)))


def test_cell_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    arrays = {"w_ih": rng.normal(size=(12, 4)), "w_hh": rng.normal(size=(12, 3)), "bias": rng.normal(size=12),
              "x": rng.normal(size=(2, 4)), "h": rng.normal(size=(2, 3)), "c": rng.normal(size=(2, 3))}
    target = rng.normal(size=(2, 3))

    def loss(p, grad=False):
        t = {k: Tensor(v, grad) for k, v in p.items()}
        h, c = dn.recurrent_step(RecurrentCellParams(t["w_ih"], t["w_hh"], t["bias"]), t["h"], t["c"], t["x"])
        h2, _ = dn.recurrent_step(RecurrentCellParams(t["w_ih"], t["w_hh"], t["bias"]), h, c, t["x"])
        out = dn.total(dn.mul(dn.add(h2, c), Tensor(target)))
        if not grad:
            return float(out.value)
        out.backward()
        return float(out.value), {k: v.grad for k, v in t.items()}

    _, grads = loss(arrays, True)
    assert dn.finite_diff_check(loss, arrays, 1e-4, grads) < 1e-4


def test_mlp2():
    x = Tensor(np.array([1.0, -2.0]))
    assert np.array_equal(dn.mlp2(x, Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 3)))).value, np.zeros(2))
    w1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    w2 = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]])
    # hidden = relu([1, -2, -1]) = [1, 0, 0]
    assert np.allclose(dn.mlp2(x, Tensor(w1), Tensor(w2)).value, [1.0, -1.0])
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 4))
    v = rng.normal(size=5)
    assert np.allclose(dn.mlp2(Tensor(v), Tensor(a), Tensor(b)).value, b @ np.maximum(a @ v, 0))


def test_softmax_against_high_precision():
    rng = np.random.default_rng(7)
    s = rng.normal(scale=5, size=5)
    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(float(v))) for v in s]
    want = [float(e / sum(ex)) for e in ex]
    assert np.allclose(dn.softmax(s), want, rtol=0, atol=1e-12)
    assert np.allclose(dn.softmax(np.zeros(4)), 0.25)
    assert np.allclose(dn.softmax(s + 1000.0), dn.softmax(s), atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_softmax_is_distribution(values):
    p = dn.softmax(np.array(values))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


def test_masked_log_softmax_ignores_padding():
    x = Tensor(np.array([[1.0, 2.0, 50.0]]))
    lp = dn.log_softmax(x, np.array([[True, True, False]])).value
    assert np.allclose(np.exp(lp[0, :2]), dn.softmax(np.array([1.0, 2.0])))


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.5])}
    g = {"w": np.array([0.2])}
    state = AdamState()
    dn.adam_step(p, g, state, lr=0.01)
    m = 0.1 * 0.2
    v = 0.001 * 0.04
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    assert p["w"][0] == pytest.approx(0.5 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_zero_grad_and_errors():
    p = {"w": np.array([1.0, -1.0])}
    dn.adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -1.0])
    with pytest.raises(NonFiniteError):
        dn.adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState())
    with pytest.raises(ContractViolation):
        dn.adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.0)
    assert AdamState().beta1 == 0.9


def test_adam_keeps_float32():
    p = {"w": np.ones(3, dtype=np.float32)}
    dn.adam_step(p, {"w": np.ones(3, dtype=np.float32)}, AdamState())
    assert p["w"].dtype == np.float32


def test_finite_diff_quadratic_and_mutation():
    params = {"a": np.array([1.0, -2.0, 0.5])}

    def loss(p):
        return float(np.sum(p["a"] ** 2))

    exact = {"a": 2 * params["a"]}
    assert dn.finite_diff_check(loss, params, 1e-4, exact) < 1e-8
    corrupted = {"a": exact["a"] * np.array([1.0, 1.0, 1.5])}
    assert dn.finite_diff_check(loss, params, 1e-4, corrupted) > 1e-2


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        dn.exp(Tensor(np.array([1000.0])))


def test_op_gradients():
    rng = np.random.default_rng(3)
    params = {"w": rng.normal(size=(3, 4)), "x": rng.normal(size=(2, 4)), "t": rng.normal(size=(5, 4))}
    idx = np.array([[0, 3, 3], [1, 4, 0]])
    mask = np.array([[True, True, False], [True, True, True]])

    def loss(p, grad=False):
        t = {k: Tensor(v, grad) for k, v in p.items()}
        h = dn.tanh(dn.linear(t["x"], t["w"]))                    # (2, 3)
        rows = dn.take(t["t"], idx)                               # (2, 3, 4)
        s = dn.rowdot(rows, dn.concat([h, dn.sigmoid(h[:, :1])], axis=1))
        lp = dn.log_softmax(dn.add(s, dn.relu(h)), mask)
        out = dn.total(dn.mul(dn.pick(lp, np.array([1, 2])), 1.0)) + dn.total(dn.sum_axis(dn.exp(h), 1))
        if not grad:
            return float(out.value)
        out.backward()
        return float(out.value), {k: v.grad for k, v in t.items()}

    _, grads = loss(params, True)
    assert dn.finite_diff_check(loss, params, 1e-6, grads) < 1e-6


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), True)
    with dn.no_grad():
        y = dn.mul(w, 2.0)
    assert not y.requires_grad
