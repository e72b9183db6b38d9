"""Tensor engine contracts: worked examples, adjoint checks, determinism."""

import math

import numpy as np
import pytest

from trimf import tensor as T
from trimf.gradcheck import max_gradient_error
from trimf.tensor import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal((a @ b).data, [[11.0]])

    def test_inner_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        err = max_gradient_error(lambda x, y: T.tensor_sum(x @ y), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = T.softmax(Tensor(rng.standard_normal((6, 9)) * 5), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient_random_vectors(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            x = Tensor(rng.standard_normal(5), requires_grad=True)
            w = Tensor(rng.standard_normal(5))
            err = max_gradient_error(lambda v: T.tensor_sum(T.mul(T.softmax(v, axis=0), w)), [x])
            assert err < 1e-6


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_at_one(self):
        # 1 * Phi(1) from a high-precision erf evaluation
        expected = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.841345, abs=1e-6)
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-15)

    def test_negative_asymptote(self):
        assert abs(T.gelu(Tensor([-10.0])).data[0]) < 1e-6


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor([[3.0, 3.0, 3.0]])
        out = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        x = Tensor([[1.0, -1.0]])
        out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        # (x - mu) / sqrt(var + eps) with mu=0, var=1
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, [[expected, -expected]], rtol=1e-12)

    def test_rows_centered(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 7)) * 3 + 2)
        out = T.layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        g = Tensor(rng.standard_normal(4), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 4)))
        err = max_gradient_error(lambda xx, gg, bb: T.tensor_sum(T.mul(T.layer_norm(xx, gg, bb), w)), [x, g, b])
        assert err < 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.tensor_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_square_sum(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.tensor_sum(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            backward(T.mul(w, w))

    def test_accumulates_across_calls(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.tensor_sum(w))
        backward(T.tensor_sum(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [3.0, 5.0])

    def test_constant_loss_leaves_grads_untouched(self):
        w = Tensor([1.0], requires_grad=True)
        backward(T.tensor_sum(Tensor([4.0])))
        assert w.grad is None

    def test_shared_subexpression_counted_once_per_use(self):
        w = Tensor([3.0], requires_grad=True)
        y = T.mul(w, w)  # used twice below
        backward(T.tensor_sum(T.add(y, y)))
        np.testing.assert_allclose(w.grad, [12.0])


class TestContracts:
    def test_nan_surfaces_as_error(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(Tensor([-1.0]))

    def test_overflow_surfaces_as_error(self):
        with pytest.raises(NonFiniteError, match="exp"):
            T.exp(Tensor([1000.0]))

    def test_loose_broadcast_rejected(self):
        a = Tensor(np.ones((2, 4, 1)))
        b = Tensor(np.ones(3))
        with pytest.raises(ShapeError):
            T.add(a, b)

    def test_scalar_and_row_bias_allowed(self):
        a = Tensor(np.ones((2, 3)))
        assert T.add(a, 1.0).data.sum() == 12.0
        out = T.add(a, Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_tensor_division_rejected(self):
        with pytest.raises(ShapeError):
            Tensor([1.0]) / Tensor([2.0])

    def test_precision_switch(self):
        T.set_default_dtype(np.float32)
        try:
            assert Tensor([1.0]).data.dtype == np.float32
        finally:
            T.set_default_dtype(np.float64)
        assert Tensor([1.0]).data.dtype == np.float64

    def test_no_grad_suppresses_tape(self):
        w = Tensor([2.0], requires_grad=True)
        with no_grad():
            y = T.mul(w, w)
        assert not y.requires_grad
        backward(T.tensor_sum(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [4.0])


class TestDeterminism:
    def test_seeded_computation_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            y = T.tensor_sum(T.softmax(T.gelu(x @ w), axis=-1) @ w)
            backward(y)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestFiniteDifferenceSweep:
    """Every primitive's adjoint against central differences (the tape oracle)."""

    def test_all_primitives(self):
        from trimf.gradcheck import run_all

        for result in run_all(max_coords=4, seed=1):
            assert result.passed, f"{result.name}: {result.max_error:.3e}"
