import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kda import gradcore as gc
from kda.gradcore import ContractError, DomainError, ShapeError, Tensor
from kda.gradsuite import op_cases

finite = st.floats(-2.0, 2.0, allow_nan=False)


def central_diff(f, x, h=1e-6):
    """Independent oracle: numeric gradient of a numpy function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = gc.matmul(Tensor(np.eye(2)), b)
        assert np.array_equal(out.data, b.data)

    def test_row_times_column(self):
        assert gc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_of_sum(self):
        a = gc.parameter([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        gc.backward(gc.sum(gc.matmul(a, b)))
        expected = central_diff(lambda x: (x @ b.data).sum(), a.data.copy())
        np.testing.assert_allclose(a.grad, expected, rtol=1e-8)
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            gc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_identity_factor_exact(self, m):
        t = Tensor(m)
        assert np.array_equal(gc.matmul(Tensor(np.eye(3)), t).data, m)
        assert np.array_equal(gc.matmul(t, Tensor(np.eye(4))).data, m)


class TestElementwise:
    def test_relu_sign_cases(self):
        assert gc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_zero_at_zero(self):
        x = gc.parameter([0.0, 1.0])
        gc.backward(gc.sum(gc.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_sqrt(self):
        assert gc.sqrt(Tensor([4.0, 9.0])).data.tolist() == [2.0, 3.0]

    def test_sqrt_negative_is_domain_error(self):
        with pytest.raises(DomainError):
            gc.sqrt(Tensor([1.0, -1e-3]))

    def test_sqrt_backward_at_zero_is_finite(self):
        x = gc.parameter([0.0])
        gc.backward(gc.sum(gc.sqrt(x)))
        assert np.isfinite(x.grad).all()
        assert x.grad[0] == pytest.approx(1.0 / (2.0 * math.sqrt(1e-12)))

    def test_square_derivative(self):
        x = gc.parameter([3.0])
        gc.backward(gc.sum(gc.square(x)))
        expected = central_diff(lambda v: (v**2).sum(), np.array([3.0]))
        np.testing.assert_allclose(x.grad, expected, rtol=1e-8)
        assert x.grad[0] == pytest.approx(6.0)

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_shape_mismatch(self, kind):
        with pytest.raises(ShapeError):
            gc.elementwise(kind, Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_dispatch_matches_functions(self):
        a, b = Tensor([1.0, -2.0]), Tensor([3.0, 0.5])
        assert gc.elementwise("add", a, b).data.tolist() == [4.0, -1.5]
        assert gc.elementwise("scale", a, factor=2.0).data.tolist() == [2.0, -4.0]
        with pytest.raises(ValueError):
            gc.elementwise("tanh", a)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert gc.softmax_cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_margin_hand_value(self):
        # e^2 / (e^2 + e^(1+1)) = 1/2
        loss = gc.softmax_cross_entropy(Tensor([2.0, 1.0]), 0, Tensor([123.0, 1.0]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            gc.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)

    @given(arrays(np.float64, 6, elements=finite), st.integers(0, 5))
    def test_zero_margins_bit_identical(self, s, y):
        plain = gc.softmax_cross_entropy(Tensor(s), y).item()
        zero = gc.softmax_cross_entropy(Tensor(s), y, Tensor(np.zeros(6))).item()
        assert plain == zero

    @given(arrays(np.float64, 5, elements=finite), st.integers(0, 4), st.floats(-50, 50))
    def test_shift_invariance(self, s, y, c):
        a = gc.softmax_cross_entropy(Tensor(s), y).item()
        b = gc.softmax_cross_entropy(Tensor(s + c), y).item()
        assert abs(a - b) <= 1e-12 * max(1.0, abs(c))

    def test_large_logits_stable(self):
        loss = gc.softmax_cross_entropy(Tensor([1000.0, -1000.0]), 1)
        assert loss.item() == pytest.approx(2000.0)

    def test_batch_matches_rowwise_mean(self):
        rng = np.random.default_rng(3)
        s = rng.uniform(-2, 2, size=(4, 3))
        y = [0, 2, 1, 1]
        m = rng.uniform(0, 1, size=(4, 3))
        rows = [gc.softmax_cross_entropy(Tensor(s[i]), y[i], Tensor(m[i])).item() for i in range(4)]
        assert gc.batch_cross_entropy(Tensor(s), y, m).item() == pytest.approx(np.mean(rows), abs=1e-14)


class TestReduceStats:
    def test_hand_values(self):
        mu, var = gc.reduce_stats(Tensor([[1.0, 1.0], [3.0, 3.0]]))
        assert mu.data.tolist() == [2.0, 2.0]
        assert var.data.tolist() == [1.0, 1.0]

    def test_single_row(self):
        mu, var = gc.reduce_stats(Tensor([[5.0, 7.0]]))
        assert mu.data.tolist() == [5.0, 7.0]
        assert var.data.tolist() == [0.0, 0.0]

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            gc.reduce_stats(Tensor(np.zeros((0, 3))))

    @given(arrays(np.float64, 4, elements=finite), st.integers(1, 7))
    def test_constant_rows_exact(self, row, n):
        mu, var = gc.reduce_stats(Tensor(np.tile(row, (n, 1))))
        assert np.array_equal(mu.data, row)
        assert np.array_equal(var.data, np.zeros(4))


class TestBackward:
    def test_linear(self):
        p = gc.parameter([1.0, 2.0, 3.0])
        gc.backward(gc.sum(p))
        assert p.grad.tolist() == [1.0, 1.0, 1.0]

    def test_quadratic(self):
        p = gc.parameter([1.0, 2.0])
        gc.backward(gc.sum(gc.square(p)))
        assert p.grad.tolist() == [2.0, 4.0]

    def test_accumulates_without_reset(self):
        p = gc.parameter([1.0, 2.0])
        loss = gc.sum(gc.square(p))
        gc.backward(loss)
        gc.backward(loss)
        assert p.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_rejected(self):
        p = gc.parameter([1.0, 2.0])
        with pytest.raises(ContractError):
            gc.backward(gc.square(p))

    def test_shared_subexpression(self):
        p = gc.parameter([2.0])
        q = gc.square(p)
        gc.backward(gc.sum(gc.mul(q, q)))  # p^4
        assert p.grad[0] == pytest.approx(32.0)

    def test_graph_topological_order(self):
        p = gc.parameter([[1.0, 2.0]])
        w = gc.parameter([[1.0], [1.0]])
        loss = gc.sum(gc.relu(gc.matmul(p, w)))
        graph = gc.Graph.from_root(loss)
        pos = {n.node_id: i for i, n in enumerate(graph.nodes)}
        for node in graph.nodes:
            for parent in node.parents:
                assert pos[parent.node_id] < pos[node.node_id]
        assert [n.op for n in graph.operations()] == ["matmul", "relu", "sum"]

    def test_no_grad_records_nothing(self):
        p = gc.parameter([1.0])
        with gc.no_grad():
            out = gc.square(p)
        assert not out.requires_grad and out.parents == ()


class TestFiniteDifferenceCheck:
    def test_quadratic_passes(self):
        p = gc.parameter([1.0, 2.0], name="p")
        report = gc.finite_difference_check(lambda: gc.sum(gc.square(p)), [p], step=1e-5)
        assert report.passed
        assert report.max_rel_error["p"] < 1e-6

    def test_constant_passes(self):
        p = gc.parameter([1.0, 2.0], name="p")
        report = gc.finite_difference_check(lambda: Tensor(3.0), [p])
        assert report.passed and report.max_abs_error["p"] == 0.0

    def test_wrong_backward_fails(self):
        def bad_square(a):
            return Tensor.from_op("bad_square", a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

        p = gc.parameter([1.0, -1.5], name="p")
        report = gc.finite_difference_check(lambda: gc.sum(bad_square(p)), [p])
        assert not report.passed
        assert "p[" in report.failure

    def test_non_finite_probe_reports_location(self):
        p = gc.parameter([0.0], name="p")

        def f():
            return gc.sum(gc.sqrt(gc.relu(p)) if p.data[0] >= 0 else Tensor(np.nan))

        report = gc.finite_difference_check(f, [p], step=1e-3)
        assert not report.passed and "p[0]" in report.failure

    def test_step_must_be_positive(self):
        with pytest.raises(DomainError):
            gc.finite_difference_check(lambda: Tensor(0.0), [], step=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    for name, (f, params) in op_cases(rng).items():
        report = gc.finite_difference_check(f, params)
        assert report.passed, f"{name}: {report.failure}"


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradient_property(a, b):
    pa, pb = gc.parameter(a), gc.parameter(b)
    w = np.arange(6.0).reshape(3, 2) - 2.5
    report = gc.finite_difference_check(lambda: gc.sum(gc.mul(gc.matmul(pa, pb), Tensor(w))), [pa, pb])
    assert report.passed
