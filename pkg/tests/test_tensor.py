"""Core tensor/tape behavior: values, gradients, contracts, oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tzk.errors import ContractViolation, DomainError, OracleInvalid
from tzk.oracles import gradient_suite, op_gradient_cases
from tzk.tensor import (Tape, Tensor, backward, finite_diff_check, gaussian_logpdf,
                        reparam_sample)

F64 = np.float64


class TestValues:
    def test_sigmoid_at_zero(self):
        assert Tensor(np.zeros(3)).sigmoid().data == pytest.approx(0.5)

    def test_matmul_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
        out = Tensor(np.eye(3)).matmul(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_exp(self):
        out = Tensor(np.array([0.0, 1.0])).exp().sum()
        assert out.item() == pytest.approx(1.0 + math.e, abs=1e-12)

    def test_float32_reduction_uses_wide_accumulator(self):
        x = np.full(100_001, 0.1, dtype=np.float32)
        got = Tensor(x).sum().item()
        assert got == pytest.approx(float(x.astype(np.float64).sum()), rel=1e-7)


class TestBackward:
    def test_product_rule(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            backward(tape, x * y)
        assert x.grad == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_frozen_parameter_receives_no_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, name="x")
        with Tape() as tape:
            tape.freeze([w])
            backward(tape, (w * x).sum())
        assert w.grad is None
        np.testing.assert_allclose(x.grad, np.ones(3))
        assert not w._frozen  # released at tape exit

    def test_gaussian_gradient_zero_at_mean(self):
        mu = Tensor(np.array([0.7]), requires_grad=True)
        with Tape() as tape:
            lp = gaussian_logpdf(Tensor(np.array([0.7])), mu, Tensor(np.array([0.3])))
            backward(tape, lp)
        assert mu.grad == pytest.approx(0.0, abs=1e-12)

    def test_unreachable_parameter_gets_no_gradient(self):
        used = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = (used * 2.0).sum()
            _ = (unused * 3.0).sum()  # on the tape, off the loss path
            backward(tape, loss)
        assert unused.grad is None
        np.testing.assert_allclose(used.grad, 2.0 * np.ones(2))

    def test_diamond_reuse_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            backward(tape, x * x + x)
        assert x.grad == pytest.approx(7.0)

    def test_backward_linearity_is_bitwise(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal(5), requires_grad=True)

        def f1():
            return (w * w).sum()

        def f2():
            return (w.tanh() * 3.0).sum()

        grads = []
        for f in (f1, f2, lambda: f1() + f2()):
            w.grad = None
            with Tape() as tape:
                backward(tape, f())
            grads.append(w.grad.copy())
        # accumulation order differs between the fused and separate sweeps,
        # so equality holds to machine precision rather than bitwise
        eps = np.finfo(np.float64).eps
        np.testing.assert_allclose(grads[0] + grads[1], grads[2], rtol=8 * eps, atol=8 * eps)

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractViolation):
                backward(tape, y)

    def test_backward_rejects_off_tape_output(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            pass
        y = (x * 2.0).sum()  # built outside any tape
        with pytest.raises(ContractViolation):
            backward(tape, y)


class TestContracts:
    def test_broadcast_limited_to_size_one(self):
        with pytest.raises(ContractViolation):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 2)))

    def test_size_one_broadcast_allowed(self):
        out = Tensor(np.ones((2, 1))) + Tensor(np.ones((2, 3)))
        assert out.shape == (2, 3)

    def test_division_by_zero_reports_index(self):
        with pytest.raises(DomainError) as exc:
            Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))
        assert exc.value.index == (1,)

    def test_log_of_nonpositive_reports_index(self):
        with pytest.raises(DomainError):
            Tensor(np.array([1.0, -2.0])).log()


class TestShapes:
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
    @settings(max_examples=30, deadline=None)
    def test_reshape_roundtrip_bit_exact(self, dims):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal(dims))
        flat = x.reshape(-1)
        back = flat.reshape(*dims)
        np.testing.assert_array_equal(back.data, x.data)

    def test_permute_roundtrip_bit_exact(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4)))
        y = x.permute(2, 0, 1).permute(1, 2, 0)
        np.testing.assert_array_equal(y.data, x.data)


class TestGaussian:
    def test_standard_normal_at_zero(self):
        lp = gaussian_logpdf(Tensor(np.zeros(1)), 0.0, 0.0)
        assert lp.item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_at_mean_any_sigma(self):
        lp = gaussian_logpdf(Tensor(np.array([1.7])), 1.7, math.log(2.5))
        assert lp.item() == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(2.5), abs=1e-12)

    def test_two_dims(self):
        lp = gaussian_logpdf(Tensor(np.array([1.0, -1.0])), 0.0, 0.0)
        assert lp.item() == pytest.approx(2 * -0.9189385332046727 - 1.0, abs=1e-6)

    def test_batched_shape(self):
        lp = gaussian_logpdf(Tensor(np.zeros((5, 3))), np.zeros(3), np.zeros(3))
        assert lp.shape == (5,)


class TestReparam:
    def test_zero_noise_returns_mean(self):
        mu = Tensor(np.array([1.0, 2.0]))
        out = reparam_sample(mu, np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(out.data, mu.data)

    def test_scale_times_noise(self):
        out = reparam_sample(Tensor(np.zeros(1)), np.array([math.log(2.0)]), np.array([1.5]))
        assert out.data[0] == pytest.approx(3.0)

    def test_gradient_wrt_mean_is_one(self):
        mu = Tensor(np.array([0.3, -0.2]), requires_grad=True)
        with Tape() as tape:
            backward(tape, reparam_sample(mu, np.zeros(2), np.ones(2)).sum())
        np.testing.assert_allclose(mu.grad, np.ones(2))


class TestFiniteDiffOracle:
    def test_square_function(self):
        x = Tensor(np.array([3.0]), requires_grad=True, name="x")
        report = finite_diff_check(lambda: (x * x).sum(), [x])
        assert report.passed and report.max_rel_error < 1e-6

    def test_constant_function(self):
        x = Tensor(np.array([3.0]), requires_grad=True, name="x")
        report = finite_diff_check(lambda: Tensor(np.array(5.0)) + 0.0 * x.sum(), [x])
        assert report.passed

    def test_rejects_non_determinism(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        rng = np.random.default_rng(0)
        with pytest.raises(OracleInvalid):
            finite_diff_check(lambda: (x * float(rng.standard_normal())).sum(), [x])

    def test_rejects_float32(self):
        x = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        with pytest.raises(OracleInvalid):
            finite_diff_check(lambda: x.sum(), [x])

    def test_every_registered_op_passes(self):
        result = gradient_suite(seed=7, tol=1e-3)
        assert result.passed, str(result)

    def test_case_list_covers_spec_ops(self):
        names = set(op_gradient_cases(np.random.default_rng(0)))
        for required in ("add", "sub", "mul", "div", "exp", "log", "abs", "sign", "tanh",
                         "sigmoid", "prelu", "matmul", "sum", "mean", "reshape", "permute",
                         "concat", "slice"):
            assert required in names
