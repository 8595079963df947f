import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inftrace import engine as E
from inftrace.verify import fd_gradient, quadratic_hvp_error


def scalar_fn(build):
    """Wrap a graph builder x -> node into (value, gradient) helpers."""
    def value(x):
        tape = E.Tape()
        return float(build(tape, tape.variable("x", x)).value)

    def grad(x):
        tape = E.Tape()
        xv = tape.variable("x", x)
        return E.gradient(tape, build(tape, xv), xv).value
    return value, grad


UNARY = {
    "tanh": lambda t, x: E.sum_(E.tanh(x)),
    "exp": lambda t, x: E.sum_(E.exp(x)),
    "log": lambda t, x: E.sum_(E.log(E.exp(x) + 1.0)),
    "reciprocal": lambda t, x: E.sum_(E.reciprocal(x * x + 1.0)),
    "softmax": lambda t, x: E.inner(E.softmax(x), t.constant(np.arange(x.value.size).reshape(x.shape))),
    "matmul": lambda t, x: E.sum_(E.tanh(E.matmul(x, x, tb=True))),
    "matmul_ta": lambda t, x: E.sum_(E.tanh(E.matmul(x, x, ta=True))),
    "gather": lambda t, x: E.sum_(E.tanh(E.gather(x, np.array([2, 0, 2, 1])))),
    "mean_rows": lambda t, x: E.sum_(E.tanh(E.mean_rows(x, np.array([0, 1, 3])))),
    "sum_axis0": lambda t, x: E.sum_(E.tanh(E.sum_(x, axis=0))),
    "sum_axis1": lambda t, x: E.sum_(E.tanh(E.sum_(x, axis=1))),
    "broadcast_row": lambda t, x: E.sum_(E.tanh(x + t.constant(np.ones((1, x.shape[1]))) * x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_match_finite_differences(name, rng):
    value, grad = scalar_fn(UNARY[name])
    x = rng.normal(size=(3, 4))
    fd = fd_gradient(lambda flat: value(flat.reshape(3, 4)), x.ravel()).reshape(3, 4)
    np.testing.assert_allclose(grad(x), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_double_backward_matches_finite_differences(name, rng):
    """Differentiate the recorded gradient again: d/dx <grad f(x), w>."""
    build = UNARY[name]
    x0, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def inner_value(flat):
        tape = E.Tape()
        xv = tape.variable("x", flat.reshape(3, 4))
        return float(np.sum(E.gradient(tape, build(tape, xv), xv).value * w))

    tape = E.Tape()
    xv = tape.variable("x", x0)
    g = E.gradient(tape, build(tape, xv), xv)
    second = E.gradient(tape, E.inner(g, tape.constant(w)), xv).value
    fd = fd_gradient(inner_value, x0.ravel(), 1e-5).reshape(3, 4)
    np.testing.assert_allclose(second, fd, rtol=1e-5, atol=1e-7)


def test_scatter_add_and_spread_are_adjoints(rng):
    g = rng.normal(size=(5, 3))
    idx = np.array([1, 1, 0, 3, 1])
    tape = E.Tape()
    out = E.scatter_add(tape.constant(g), idx, 4)
    expected = np.zeros((4, 3))
    np.add.at(expected, idx, g)
    np.testing.assert_array_equal(out.value, expected)
    spread = E.spread_rows(tape.constant(rng.normal(size=(2, 3))), np.array([0, 2, 5]))
    assert spread.shape == (5, 3)


def test_argmax_onehot_is_not_differentiable():
    tape = E.Tape()
    x = tape.variable("x", np.array([[1.0, 3.0, 2.0]]))
    y = E.argmax_onehot(x)
    np.testing.assert_array_equal(y.value, [[0, 1, 0]])
    with pytest.raises(E.NonDifferentiableError, match="argmax_onehot"):
        E.gradient(tape, E.inner(y, x), x)


def test_unreachable_input_gets_zero_gradient():
    tape = E.Tape()
    x = tape.variable("x", np.ones((2, 2)))
    y = tape.variable("y", np.ones((2, 2)))
    gx = E.gradient(tape, E.sum_(E.tanh(x)), y)
    np.testing.assert_array_equal(gx.value, np.zeros((2, 2)))


def test_gradient_needs_scalar_output():
    tape = E.Tape()
    x = tape.variable("x", np.ones((2, 2)))
    with pytest.raises(E.ShapeError):
        E.gradient(tape, E.tanh(x), x)


def test_evaluate_replays_with_new_bindings(rng):
    tape = E.Tape()
    x = tape.variable("x", rng.normal(size=(2, 3)))
    w = tape.variable("w", rng.normal(size=(3, 1)))
    out = E.sum_(E.tanh(E.matmul(x, w)))
    x2, w2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 1))
    assert E.evaluate(tape, {"x": x2, "w": w2}, out) == pytest.approx(np.tanh(x2 @ w2).sum(), abs=1e-14)
    n = len(tape)
    E.evaluate(tape, {"x": x2, "w": w2})
    assert len(tape) == n


def test_evaluate_rejects_unbound_and_misshapen():
    tape = E.Tape()
    x = tape.variable("x", np.ones((2, 3)))
    E.sum_(x)
    with pytest.raises(E.UnboundVariableError, match="'x'"):
        E.evaluate(tape, {})
    with pytest.raises(E.ShapeError, match="variable 'x'"):
        E.evaluate(tape, {"x": np.ones((3, 2))})


def test_partial_replay_matches_full_evaluate(rng):
    tape = E.Tape()
    x = tape.variable("x", rng.normal(size=(2, 3)))
    w = tape.variable("w", rng.normal(size=(3, 1)))
    out = E.sum_(E.tanh(E.matmul(x, w)))
    g = E.gradient(tape, out, x)
    fixed = {"x": x.value, "w": w.value}
    replay = E.PartialReplay(tape, fixed, [out, g], ["w"])
    for _ in range(3):
        w2 = rng.normal(size=(3, 1))
        got = replay({"w": w2})
        ref = E.evaluate(tape, {"x": x.value, "w": w2}, [out, g])
        assert all(a.tobytes() == b.tobytes() for a, b in zip(got, ref))
    with pytest.raises(E.UnboundVariableError):
        replay({})
    with pytest.raises(E.ShapeError):
        replay({"w": np.ones((1, 3))})


def test_matmul_shape_mismatch_names_op():
    tape = E.Tape()
    with pytest.raises(E.ShapeError):
        E.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


def test_hvp_is_exact_on_quadratics(rng):
    for size in (1, 3, 8):
        assert quadratic_hvp_error(rng, size) < 1e-12


def test_hvp_rejects_wrong_length():
    tape = E.Tape()
    x0 = np.ones((1, 3))
    x = tape.variable("x", x0)
    loss = E.inner(x, x)
    with pytest.raises(E.ShapeError):
        E.hvp(tape, loss, E.ParamVector.from_arrays({"x": x0}), np.ones(4))


def test_mixed_gradient_of_independent_scalar_warns():
    tape = E.Tape()
    w0 = np.ones((1, 2))
    w = tape.variable("w", w0)
    e = tape.variable("e", np.ones((1, 2)))
    s = E.sum_(E.tanh(w))
    with pytest.warns(E.IndependentInputWarning):
        out = E.mixed_gradient(tape, s, e, E.ParamVector.from_arrays({"w": w0}))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_mixed_gradient_of_bilinear_form(rng):
    """s = e^T A w  =>  d/dw sum_j ds/de_j = A^T 1."""
    A = rng.normal(size=(3, 3))
    w0, e0 = rng.normal(size=(3, 1)), rng.normal(size=(1, 3))
    tape = E.Tape()
    w = tape.variable("w", w0)
    e = tape.variable("e", e0)
    s = E.sum_(E.matmul(E.matmul(e, tape.constant(A)), w))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = E.mixed_gradient(tape, s, e, E.ParamVector.from_arrays({"w": w0}))
    np.testing.assert_allclose(out, A.T @ np.ones(3), rtol=1e-14)


def test_param_vector_roundtrip(rng):
    pv = E.ParamVector.from_arrays({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(1, 4))}, ("b",))
    assert pv.n_trainable == 4
    flat = rng.normal(size=4)
    np.testing.assert_array_equal(pv.with_trainable(flat)["b"].ravel(), flat)
    np.testing.assert_array_equal(pv.with_trainable(flat)["a"], pv["a"])
    with pytest.raises(E.ShapeError):
        pv.with_trainable(np.ones(3))
    with pytest.raises(ValueError):
        E.ParamVector(np.zeros(5), {"a": (0, (2, 3))})


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.booleans(), st.booleans(), st.integers(0, 2**31))
def test_add_mul_broadcast_gradients(rows, cols, row_vec, col_vec, seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=(rows, cols))
    b0 = rng.normal(size=(1 if row_vec else rows, 1 if col_vec else cols))
    tape = E.Tape()
    a, b = tape.variable("a", a0), tape.variable("b", b0)
    out = E.sum_(E.tanh(a * b + b))
    ga, gb = E.gradient(tape, out, [a, b])
    d = 1 - np.tanh(a0 * b0 + b0) ** 2
    np.testing.assert_allclose(ga.value, d * b0, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gb.value, (d * (a0 + 1)).sum(axis=tuple(
        i for i, n in enumerate(b0.shape) if n == 1 and a0.shape[i] != 1), keepdims=True).reshape(b0.shape),
        rtol=1e-12, atol=1e-14)
