import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammamba import tensor as T
from grammamba.errors import ContractError, DimensionError, NonFiniteError
from grammamba.tensor import Tensor


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ---- forward values


def test_matmul_identity_and_hand_product():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 1\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_elementwise_values():
    assert T.silu(Tensor(0.0)).item() == 0.0
    np.testing.assert_allclose(T.exp(Tensor([0.0, 1.0])).data, [1.0, math.e], rtol=1e-15)
    x = param([1.0, 2.0, 3.0, 4.0])
    m = T.mean(x)
    assert m.item() == 2.5
    T.backward(m)
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_binary_ops_reject_mismatched_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    # scalars broadcast
    np.testing.assert_array_equal(T.mul(Tensor(np.ones(3)), 2.0).data, [2.0, 2.0, 2.0])


def test_exp_overflow_in_checked_mode():
    with T.checked():
        with pytest.raises(NonFiniteError):
            T.exp(Tensor([1000.0]))
    # unchecked mode lets inf through
    assert np.isinf(T.exp(Tensor([1000.0])).data[0])


def test_cross_entropy_values():
    ce = T.softmax_cross_entropy(Tensor(np.zeros((1, 12))), [3])
    assert ce.item() == pytest.approx(math.log(12), rel=1e-14)
    ce = T.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
    # log1p(exp(-20)) evaluated independently
    assert ce.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
    assert ce.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---- backward semantics


def test_backward_simple_cases():
    x = param([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    x = param([1.0, 2.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unused_and_frozen_parameters_get_no_gradient():
    x, unused = param([1.0, 2.0]), param([5.0])
    frozen = Tensor([3.0, 4.0])
    T.backward(T.tsum(T.mul(x, frozen)))
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])
    assert unused.grad is None
    assert frozen.grad is None


def test_two_consumers_accumulate():
    # y = x*x + 3x at x = 2 -> dy/dx = 2x + 3 = 7
    x = param([2.0])
    T.backward(T.tsum(T.add(T.mul(x, x), T.mul(x, 3.0))))
    np.testing.assert_array_equal(x.grad, [7.0])


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.backward(T.mul(param([1.0, 2.0]), 2.0))


def test_no_grad_records_nothing():
    x = param([1.0])
    T.get_tape().clear()
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad
    assert len(T.get_tape().nodes) == 0


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        w = param(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(5, 3)))
        loss = T.tsum(T.silu(T.linear(x, w)))
        T.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---- gradient checks


def test_grad_check_linear_is_exact():
    # a power-of-two step keeps x +- eps and the difference quotient exact
    assert T.grad_check(lambda x: T.tsum(x), [param(np.arange(4.0))], eps=2.0 ** -17) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        T.grad_check(lambda x: T.tsum(x), [param([1.0])], eps=1e-2)


def test_grad_check_reports_nonfinite_coordinate():
    # exp overflows just above 709.78, so only nudging coordinate 1 upward breaks f
    x = param([0.0, 709.78 / 710.0])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="coordinate 1"):
        T.grad_check(lambda x: T.tsum(T.exp(T.mul(x, 710.0))), [x], eps=1e-5)


UNARY = {
    "exp": T.exp, "silu": T.silu, "sigmoid": T.sigmoid, "softplus": T.softplus, "neg": T.neg,
    "mean": lambda a: T.mean(a, axis=1), "sum": lambda a: T.tsum(a, axis=0),
    "reshape": lambda a: T.reshape(a, (6,)), "take": lambda a: T.take(a, 1, axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(0)
    op = UNARY[name]
    for _ in range(100):
        x = param(rng.uniform(-2, 2, size=(2, 3)))
        w = Tensor(rng.normal(size=op(Tensor(x.data)).shape))
        assert T.grad_check(lambda a: T.tsum(T.mul(op(a), w)), [x]) < 1e-4


BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(1)
    op = BINARY[name]
    for _ in range(100):
        a, b = param(rng.uniform(-2, 2, 4)), param(rng.uniform(-2, 2, 4))
        assert T.grad_check(lambda a, b: T.tsum(T.mul(op(a, b), op(a, b))), [a, b]) < 1e-4


def test_structural_and_linear_gradients():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = param(rng.uniform(-2, 2, (2, 3))), param(rng.uniform(-2, 2, (2, 3)))
        w, bias = param(rng.uniform(-2, 2, (4, 6))), param(rng.uniform(-2, 2, 4))
        m = param(rng.uniform(-2, 2, (3, 2)))

        def f(a, b, w, bias, m):
            cat = T.concat([a, b], axis=-1)
            st_ = T.stack([a, b], axis=0)
            lin = T.linear(cat, w, bias)
            return T.add(T.tsum(T.mul(lin, lin)),
                         T.add(T.tsum(T.silu(T.matmul(st_, m))), T.tsum(T.mul(st_, st_))))

        assert T.grad_check(f, [a, b, w, bias, m]) < 1e-4


def test_loss_gradients():
    rng = np.random.default_rng(3)
    for _ in range(100):
        logits = param(rng.uniform(-2, 2, (3, 4)))
        labels = rng.integers(0, 4, 3)
        assert T.grad_check(lambda z: T.softmax_cross_entropy(z, labels), [logits]) < 1e-4
        pred, target = param(rng.uniform(-2, 2, (3, 2))), rng.uniform(-2, 2, (3, 2))
        assert T.grad_check(lambda p: T.squared_error(p, target), [pred]) < 1e-4


def test_matmul_gradient_tight():
    rng = np.random.default_rng(4)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    assert T.grad_check(lambda a, b: T.tsum(T.matmul(a, b)), [a, b]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_softplus_positive_and_silu_bounded(values):
    x = Tensor(values)
    assert np.all(T.softplus(x).data > 0)
    # silu(x) >= min over reals, about -0.2785
    assert np.all(T.silu(x).data >= -0.28)
