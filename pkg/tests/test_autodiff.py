import numpy as np
import pytest

from misalign import tensor as T
from misalign.gradcheck import objective_gradient_checks, op_gradient_checks
from misalign.tensor import (
    ComputeGraph,
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    central_difference_gradient,
    finite_difference_check,
    max_relative_error,
)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        g = ComputeGraph()
        x = g.leaf([1.0, 2.0, 3.0])
        backward(T.tsum(x))
        assert g.gradient(x).tolist() == [1.0, 1.0, 1.0]

    def test_square_sum_hand_gradient(self):
        g = ComputeGraph()
        x = g.leaf([1.0, -2.0])
        backward(T.tsum(T.mul(x, x)))
        assert g.gradient(x).tolist() == [2.0, -4.0]

    def test_non_scalar_loss_rejected(self):
        g = ComputeGraph()
        x = g.leaf([1.0, 2.0])
        with pytest.raises(GraphError, match="scalar"):
            backward(T.mul(x, x))

    def test_detached_loss_rejected(self):
        with pytest.raises(GraphError):
            backward(T.tsum(Tensor([1.0, 2.0])))

    def test_leaf_off_path_gets_zero(self):
        g = ComputeGraph()
        x = g.leaf([1.0, 2.0])
        y = g.leaf([5.0])
        backward(T.tsum(x))
        assert g.gradient(y).tolist() == [0.0]

    def test_gradients_map_only_holds_on_path_nodes(self):
        g = ComputeGraph()
        x = g.leaf([1.0, 2.0])
        y = g.leaf([5.0])
        dead_end = T.mul(y, y)  # never feeds the loss
        grads = backward(T.tsum(x))
        assert dead_end.node not in grads
        assert y.node not in grads

    def test_backward_twice_is_bit_identical(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((4, 5))
        g = ComputeGraph()
        x = g.leaf(data)
        loss = T.tsum(T.gelu(T.layernorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))))
        g1 = dict(backward(loss))
        g2 = backward(loss)
        assert g1.keys() == g2.keys()
        for k in g1:
            assert np.asarray(g1[k]).tobytes() == np.asarray(g2[k]).tobytes()

    def test_fanout_accumulates(self):
        g = ComputeGraph()
        x = g.leaf([3.0])
        loss = T.tsum(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1
        backward(loss)
        assert g.gradient(x).tolist() == [7.0]


class TestFiniteDifferenceCheck:
    def test_linear_function_is_nearly_exact(self):
        rng = np.random.default_rng(1)
        err = finite_difference_check(T.tsum, rng.standard_normal(12))
        assert err <= 1e-10

    def test_default_h_is_used_and_positive_required(self):
        with pytest.raises(ValueError):
            central_difference_gradient(T.tsum, np.ones(3), h=0.0)

    def test_nonfinite_f_detected(self):
        def f(t):
            return T.tsum(T.log(t))

        with pytest.raises(NonFiniteError):
            central_difference_gradient(f, np.array([1e-9, 1.0]), h=1e-5)

    def test_corrupted_gradient_is_detected(self):
        # gradient deliberately wrong by 1%: the checker must flag it
        rng = np.random.default_rng(2)
        x = rng.standard_normal(8) + 3.0

        def f(t):
            return T.tsum(T.mul(t, t))

        g = ComputeGraph()
        leaf = g.leaf(x)
        backward(f(leaf))
        corrupted = g.gradient(leaf) * 1.01
        numeric = central_difference_gradient(f, x)
        assert max_relative_error(corrupted, numeric) >= 1e-3
        # and the honest gradient passes
        assert max_relative_error(g.gradient(leaf), numeric) <= 1e-6


class TestGradientSuite:
    def test_every_op_passes_at_1e6(self):
        report = op_gradient_checks(instances=20, seed=0)
        failing = {k: v for k, v in report.items() if v > 1e-6}
        assert not failing, f"ops over threshold: {failing}"

    def test_objectives_through_tiny_encoders_pass(self):
        report = objective_gradient_checks(instances=5, seed=1)
        failing = {k: v for k, v in report.items() if v > 1e-6}
        assert not failing, f"objectives over threshold: {failing}"
