import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mddistill import tape as T
from mddistill.checks import primitive_checks
from mddistill.errors import ContractError, DimensionError, StateError
from mddistill.losses import LossConfig, wbce_loss
from mddistill.model import sgd_step


def _tape():
    return T.Tape(np.float64)


def test_default_precision_is_32_bit():
    assert T.Tape().leaf([[1.0]]).value.dtype == np.float32


# -- matmul --------------------------------------------------------------------


def test_matmul_identity():
    tape = _tape()
    m = np.arange(6.0).reshape(3, 2)
    out = T.matmul(tape.const(np.eye(3)), tape.const(m))
    assert np.array_equal(out.value, m)


def test_matmul_hand_case():
    tape = _tape()
    out = tape.const([[1, 2], [3, 4]]) @ tape.const([[1], [1]])
    assert np.array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    tape = _tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(tape.const(np.zeros((2, 3))), tape.const(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    err = T.grad_check(lambda tape, n: T.sum_all(T.matmul(n[0], n[1])), [a, b])
    assert err < 1e-6


def test_matmul_backward_formulas(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    g = rng.standard_normal((3, 2))
    tape = _tape()
    na, nb = tape.leaf(a), tape.leaf(b)
    loss = T.sum_all(T.mul(T.matmul(na, nb), tape.const(g)))
    tape.backward(loss)
    np.testing.assert_allclose(na.grad, g @ b.T, rtol=1e-14)
    np.testing.assert_allclose(nb.grad, a.T @ g, rtol=1e-14)


# -- row_normalize -------------------------------------------------------------


def test_row_normalize_examples():
    tape = _tape()
    x = tape.const([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    out = T.row_normalize(x, 1e-8).value
    assert np.array_equal(out, [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    assert np.array_equal(T.row_normalize(tape.const([[3.0, 4.0]]), 1e-8).value, [[0.6, 0.8]])


@given(arrays(np.float64, (4, 3), elements=st.floats(-100, 100)))
def test_row_normalize_unit_norm_above_guard(x):
    out = T.row_normalize(_tape().const(x), 1e-8).value
    norms = np.linalg.norm(x, axis=1)
    for row, src, n in zip(out, x, norms):
        if n >= 1e-8:
            assert abs(np.linalg.norm(row) - 1.0) < 1e-12
        else:
            np.testing.assert_allclose(row, src / 1e-8)


def test_row_normalize_zero_row_gradient_is_finite():
    tape = _tape()
    x = tape.leaf([[0.0, 0.0], [1.0, 2.0]])
    tape.backward(T.sum_all(T.row_normalize(x, 1e-8)))
    assert np.all(np.isfinite(x.grad))


# -- sigmoid -------------------------------------------------------------------


def test_sigmoid_values_and_saturation():
    tape = _tape()
    with np.errstate(over="raise", invalid="raise"):
        out = T.sigmoid(tape.const([[0.0, 1e3, -1e3]])).value
    assert out[0, 0] == 0.5
    assert abs(out[0, 1] - 1.0) <= np.finfo(np.float64).eps
    assert out[0, 2] >= 0.0 and out[0, 2] < 1e-300


def test_sigmoid_gradient_at_zero():
    tape = _tape()
    x = tape.leaf([[0.0]])
    tape.backward(T.sum_all(T.sigmoid(x)))
    assert x.grad[0, 0] == 0.25
    assert T.grad_check(lambda tape, n: T.sum_all(T.sigmoid(n[0])), [np.zeros((1, 1))]) < 1e-9


# -- backward ------------------------------------------------------------------


def test_backward_linear_functional():
    tape = _tape()
    a = tape.leaf(np.arange(4.0).reshape(2, 2))
    tape.backward(T.sum_all(a))
    assert np.array_equal(a.grad, np.ones((2, 2)))


def test_disconnected_leaf_gets_exact_zero():
    tape = _tape()
    a = tape.leaf([[1.0, 2.0]])
    b = tape.leaf([[3.0], [4.0]])
    loss = T.sum_all(T.mul(a, a))
    grads = tape.backward(loss)
    assert np.array_equal(b.grad, np.zeros((2, 1)))
    assert np.array_equal(grads[b], np.zeros((2, 1)))


def test_grad_and_value_shapes_agree(rng):
    tape = _tape()
    leaves = [tape.leaf(rng.standard_normal(s)) for s in [(3, 4), (4, 2), (1, 2)]]
    out = T.add_row(T.matmul(leaves[0], leaves[1]), leaves[2])
    tape.backward(T.sum_all(T.tanh(out)))
    for leaf in leaves:
        assert leaf.grad.shape == leaf.value.shape


def test_second_backward_is_a_state_error():
    tape = _tape()
    a = tape.leaf([[1.0]])
    loss = T.sum_all(T.mul(a, a))
    tape.backward(loss)
    with pytest.raises(StateError):
        tape.backward(loss)


def test_non_scalar_loss_is_a_contract_error():
    tape = _tape()
    a = tape.leaf([[1.0, 2.0]])
    with pytest.raises(ContractError):
        tape.backward(T.mul(a, a))


def test_loss_from_another_tape_is_rejected():
    a = _tape().leaf([[1.0]])
    with pytest.raises(ContractError):
        _tape().backward(T.sum_all(a))


# -- grad_check ----------------------------------------------------------------


def test_grad_check_quadratic(rng):
    x = rng.standard_normal((5, 1))
    err = T.grad_check(lambda tape, n: T.matmul(T.transpose(n[0]), n[0]), [x], step=1e-5)
    assert err < 1e-9


def test_grad_check_wbce_three_pairs(rng):
    img, txt = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cfg = LossConfig()

    def build(tape, n):
        sim = T.matmul(T.row_normalize(n[0]), T.transpose(T.row_normalize(n[1])))
        return wbce_loss(sim, np.eye(3), cfg)

    assert T.grad_check(build, [img, txt]) < 1e-6


def test_grad_check_constant_loss_is_zero():
    err = T.grad_check(lambda tape, n: tape.const([[2.5]]), [np.ones((2, 2))])
    assert err == 0.0


def test_grad_check_rejects_drifting_builder():
    calls = []

    def build(tape, n):
        calls.append(1)
        return T.add_const(T.sum_all(n[0]), float(len(calls)))

    with pytest.raises(ContractError):
        T.grad_check(build, [np.ones((1, 1))])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        T.grad_check(lambda tape, n: T.sum_all(n[0]), [np.ones((1, 1))], step=0.0)


# -- every primitive, both VJP routes ------------------------------------------


@pytest.mark.slow
def test_every_primitive_both_routes():
    # 100 randomized trials for each of the 27 primitives on both routes
    bad = []
    for seed in range(100):
        results = primitive_checks(seed)
        assert len({r.name for r in results}) == 27
        bad += [(seed, r.name, r.route, r.error) for r in results if r.error >= 1e-6]
    assert not bad


# Gaussian draws keep gradients away from zero and the sigmoid off saturation;
# near either, the relative error only measures finite-difference rounding.
@given(st.integers(0, 2**32 - 1))
def test_composite_graph_gradient(seed):
    r = np.random.default_rng(seed)
    a, b = 0.5 * r.standard_normal((3, 4)), 0.5 * r.standard_normal((4, 2))

    def build(tape, n):
        h = T.sigmoid(T.matmul(n[0], n[1]))
        return T.sum_all(T.mul(h, T.softplus(h)))

    assert T.grad_check(build, [a, b]) < 1e-6


# -- unrolled SGD chains -------------------------------------------------------


def _unrolled_regression(steps):
    """Leaves: data X (6x3), targets y (6x1), start w (3x1), lr (1x1)."""

    def build(tape, n):
        x, y, w, lr = n
        for _ in range(steps):
            r = T.sub(T.matmul(x, w), y)
            inner = T.scale_const(T.sum_all(T.mul(r, r)), 0.5)
            (g,) = tape.grad(inner, [w], create_graph=True)
            (w,) = sgd_step([w], [g], lr)
        return T.scale_const(T.sum_all(T.mul(w, w)), 0.5)

    return build


@pytest.mark.parametrize("steps", [1, 2, 8])
def test_unrolled_sgd_matches_finite_differences(rng, steps):
    leaves = [rng.standard_normal((6, 3)), rng.standard_normal((6, 1)), rng.standard_normal((3, 1)), np.array([[0.05]])]
    assert T.grad_check(_unrolled_regression(steps), leaves) < 1e-6


@pytest.mark.parametrize("steps", [1, 2, 8])
def test_unrolled_sgd_matches_composed_closed_form(rng, steps):
    # N plain steps on 0.5|Xw - y|^2 give w_N = A^N w_0 + c with A = I - lr X^T X,
    # so the start-point gradient of 0.5|w_N|^2 is (A^N)^T w_N.
    x, y, w0, lr = rng.standard_normal((6, 3)), rng.standard_normal((6, 1)), rng.standard_normal((3, 1)), 0.05
    a = np.eye(3) - lr * x.T @ x
    w = w0.copy()
    for _ in range(steps):
        w = w - lr * x.T @ (x @ w - y)
    expected = np.linalg.matrix_power(a, steps).T @ w

    tape = _tape()
    nodes = [tape.leaf(v) for v in (x, y, w0, [[lr]])]
    tape.backward(_unrolled_regression(steps)(tape, nodes))
    np.testing.assert_allclose(nodes[2].grad, expected, rtol=1e-12, atol=1e-14)


def test_sgd_step_without_gradients_is_a_state_error():
    tape = _tape()
    w = tape.leaf([[1.0]])
    with pytest.raises(StateError):
        sgd_step([w], None, tape.scalar(0.1))


def test_evaluation_is_bit_deterministic(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

    def run():
        tape = _tape()
        na, nb = tape.leaf(a), tape.leaf(b)
        loss = T.sum_all(T.logsumexp_rows(T.row_normalize(T.matmul(na, nb))))
        tape.backward(loss)
        return loss.value.tobytes() + na.grad.tobytes() + nb.grad.tobytes()

    assert run() == run()
