import numpy as np
import pytest

from dmm import tensor as T
from dmm.gradcheck import NonDeterminismError, gradcheck, rel_error
from dmm.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def wrong_square(x: Tensor, factor: float) -> Tensor:
    # forward x^2 with a backward rule scaled by ``factor``
    return T._make("wrong_square", x.data**2, (x,), lambda g: (g * 2 * x.data * factor,))


def test_correct_rule_passes():
    x = leaf([0.3, -1.2, 2.0])
    assert gradcheck(lambda x: T.tsum(wrong_square(x, 1.0)), [x]).passed


def test_one_percent_error_is_caught():
    x = leaf([0.3, -1.2, 2.0])
    rep = gradcheck(lambda x: T.tsum(wrong_square(x, 1.01)), [x])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-4)


def test_rel_error_floor():
    assert rel_error(1.0, 1.0 + 5e-9) == 0.0
    assert rel_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert rel_error(0.0, 2e-8) == 1.0


def test_requires_float64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises((TypeError, ValueError)):
        gradcheck(lambda x: T.tsum(x), [x])


def test_nondeterministic_function_is_rejected():
    x = leaf([1.0])
    state = {"n": 0}

    def f(x):
        state["n"] += 1
        return T.tsum(x * float(state["n"]))

    with pytest.raises(NonDeterminismError):
        gradcheck(f, [x])


def test_inputs_restored_after_check():
    x = Tensor(np.array([0.5, 1.5]))
    before = x.data.copy()
    gradcheck(lambda x: T.tsum(T.exp(x)), [x])
    np.testing.assert_array_equal(x.data, before)
    assert not x.requires_grad and x.grad is None


def test_relu_kink_reported_as_ambiguous():
    x = leaf([0.0, 1.0])
    rep = gradcheck(lambda x: T.tsum(T.relu(x)), [x])
    assert rep.passed
    assert [c for _, c in rep.ambiguous] == [(0,)]


def test_max_coords_limits_probes(rng):
    x = leaf(rng.normal(size=(10, 10)))
    rep = gradcheck(lambda x: T.tsum(x * x), [x], max_coords=7)
    assert rep.n_checked == 7
