import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from citycast.errors import EvaluationError, ParameterError, ShapeError
from citycast.numerics import dropout, flush_denormals, grad_check, matmul, softmax_rows

f64 = torch.float64


def t(x, grad=False):
    return torch.tensor(x, dtype=f64, requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        assert torch.equal(matmul(torch.eye(2, dtype=f64), a), a)

    def test_hand_product(self):
        out = matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0], [6.0]]))
        assert out.tolist() == [[17.0], [39.0]]

    def test_zero_annihilates(self):
        b = torch.randn(3, 4, dtype=f64)
        assert torch.count_nonzero(matmul(torch.zeros(2, 3, dtype=f64), b)) == 0

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(torch.zeros(2, 3), torch.zeros(2, 2))

    def test_backward_formula(self):
        a, b = torch.randn(3, 4, dtype=f64, requires_grad=True), torch.randn(4, 2, dtype=f64, requires_grad=True)
        dc = torch.randn(3, 2, dtype=f64)
        matmul(a, b).backward(dc)
        assert torch.allclose(a.grad, dc @ b.T.detach())
        assert torch.allclose(b.grad, a.T.detach() @ dc)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_associativity(self, m, k, n, p, seed):
        g = torch.Generator().manual_seed(seed)
        a, b, c = (torch.rand(s, generator=g, dtype=f64) * 4 - 2 for s in ((m, k), (k, n), (n, p)))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        scale = max(1.0, float(left.abs().max()))
        assert float((left - right).abs().max()) <= 1e-9 * scale


class TestSoftmax:
    def test_equal_logits_uniform(self):
        assert softmax_rows(t([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]

    def test_closed_form(self):
        out = softmax_rows(t([[0.0, math.log(3.0)]]))
        assert out[0, 0].item() == pytest.approx(0.25, abs=1e-15)
        assert out[0, 1].item() == pytest.approx(0.75, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
                  elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariance(self, x, c):
        out = softmax_rows(torch.from_numpy(x))
        assert torch.all(out >= 0)
        assert float((out.sum(-1) - 1).abs().max()) <= 1e-12
        shifted = softmax_rows(torch.from_numpy(x + c))
        assert torch.allclose(out, shifted, atol=1e-12, rtol=0)

    def test_large_logits_stay_finite(self):
        out = softmax_rows(t([[1000.0, 0.0, -1000.0]]))
        assert torch.isfinite(out).all()
        assert out[0, 0].item() == 1.0


class TestDropout:
    def test_rate_zero_identity(self):
        x = torch.randn(4, 5, dtype=f64)
        assert dropout(x, 0.0, True) is x

    def test_eval_bit_identical(self):
        x = torch.randn(4, 5, dtype=f64)
        assert torch.equal(dropout(x, 0.7, False), x)

    def test_mean_preserved(self):
        g = torch.Generator().manual_seed(1)
        out = dropout(torch.ones(100_000, dtype=f64), 0.5, True, g)
        assert abs(out.mean().item() - 1.0) <= 0.01
        assert set(out.unique().tolist()) <= {0.0, 2.0}

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ParameterError):
            dropout(torch.ones(3), rate, True)

    def test_generator_reproducible(self):
        x = torch.ones(50, dtype=f64)
        a = dropout(x, 0.3, True, torch.Generator().manual_seed(7))
        b = dropout(x, 0.3, True, torch.Generator().manual_seed(7))
        assert torch.equal(a, b)


class TestFlushDenormals:
    tiny = torch.tensor([1e-40], dtype=torch.float32)

    def test_flushes_inside_and_restores(self):
        if not torch.set_flush_denormal(False):
            pytest.skip("platform cannot flush subnormals")
        assert (self.tiny * 1.0).item() != 0.0
        with flush_denormals():
            assert (self.tiny * 1.0).item() == 0.0
        assert (self.tiny * 1.0).item() != 0.0

    def test_nested_blocks_keep_flushing(self):
        if not torch.set_flush_denormal(False):
            pytest.skip("platform cannot flush subnormals")
        with flush_denormals():
            with flush_denormals():
                pass
            assert (self.tiny * 1.0).item() == 0.0
        assert (self.tiny * 1.0).item() != 0.0


class TestGradCheck:
    def test_linear(self):
        x = t([5.0], grad=True)
        rep = grad_check(lambda: x.sum(), [x], h=0.5, n_coords=None)  # exact in binary
        assert rep.max_rel_error == 0.0 and rep.passed

    def test_quadratic_exact(self):
        x = t([3.0], grad=True)
        rep = grad_check(lambda: (x**2).sum(), [x], h=1e-4, tol=1e-6, n_coords=None)
        _, _, analytic, numeric, _ = rep.details[0]
        assert analytic == 6.0
        assert numeric == pytest.approx(6.0, abs=1e-9)
        assert rep.passed

    def test_non_finite_raises(self):
        x = t([0.0], grad=True)
        with pytest.raises(EvaluationError):
            grad_check(lambda: (1.0 / x).sum(), [x])

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return g

        x = t([2.0], grad=True)
        assert not grad_check(lambda: Bad.apply(x).sum(), [x], n_coords=None).passed

    def test_bad_step(self):
        x = t([1.0], grad=True)
        with pytest.raises(ParameterError):
            grad_check(lambda: x.sum(), [x], h=0.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_primitive_gradients(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = (torch.rand(3, 4, generator=g, dtype=f64) * 4 - 2).requires_grad_()
        b = (torch.rand(4, 5, generator=g, dtype=f64) * 4 - 2).requires_grad_()
        w = torch.rand(3, 5, generator=g, dtype=f64)

        def f():
            logits = matmul(a, b)
            probs = softmax_rows(logits)
            dropped = dropout(probs, 0.3, True, torch.Generator().manual_seed(3))
            return (dropped * w).sum()

        assert grad_check(f, [a, b], n_coords=20, seed=seed).passed
