import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asanet import functional as F
from asanet.errors import ContractError, DimensionError, GraphIntegrityError, NumericalInstabilityError
from asanet.gradcheck import finite_diff_check, relative_error
from asanet.tensor import Tensor, no_grad


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_sub_scalar(self):
        assert F.sub(t64([[2.0]]), t64([[0.5]])).data.tolist() == [[1.5]]

    def test_add_symmetric(self):
        out = F.add(t64([[1, 2], [3, 4]]), t64([[4, 3], [2, 1]]))
        assert out.data.tolist() == [[5, 5], [5, 5]]

    def test_mul_broadcast_gate(self):
        gate = t64(np.array([0.5, 2.0]).reshape(2, 1, 1))
        out = F.mul(gate, t64(np.ones((2, 2, 2))))
        assert out.shape == (2, 2, 2)
        assert np.all(out.data[0] == 0.5) and np.all(out.data[1] == 2.0)

    def test_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(3, 2\)"):
            F.add(t64(np.ones((2, 3))), t64(np.ones((3, 2))))

    def test_no_rank_promotion(self):
        with pytest.raises(DimensionError):
            F.mul(t64(np.ones(3)), t64(np.ones((2, 3))))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
    def test_algebra_exact(self, a, b):
        ta, tb = t64(a, False), t64(b, False)
        assert np.array_equal(F.add(ta, tb).data, F.add(tb, ta).data)
        assert np.array_equal(F.mul(ta, tb).data, F.mul(tb, ta).data)
        assert np.array_equal(F.sub(ta, tb).data, -F.sub(tb, ta).data)

    def test_broadcast_backward_equals_tiling(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((3, 1, 1))
        m = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((3, 4, 5))
        tg = t64(g)
        F.sum(F.mul(F.mul(tg, t64(m, False)), t64(w, False))).backward()
        tiled = t64(np.tile(g, (1, 4, 5)))
        F.sum(F.mul(F.mul(tiled, t64(m, False)), t64(w, False))).backward()
        np.testing.assert_allclose(tg.grad, tiled.grad.sum(axis=(1, 2), keepdims=True), rtol=1e-12)


class TestBackward:
    def test_square(self):
        x = t64([3.0])
        F.sum(F.mul(x, x)).backward()
        assert x.grad.tolist() == [6.0]

    def test_linearity(self):
        a, b = t64(np.ones((2, 3))), t64(np.ones((2, 3)))
        F.sum(F.sub(a, b)).backward()
        assert np.all(a.grad == 1) and np.all(b.grad == -1)

    def test_sigmoid_at_zero(self):
        x = t64([0.0])
        F.sum(F.sigmoid(x)).backward()
        # sigma(0) (1 - sigma(0)) = 0.5 * 0.5
        assert x.grad[0] == pytest.approx(0.25, abs=1e-15)

    def test_accumulates_then_zeroes(self):
        x = t64([3.0])
        loss = F.sum(F.mul(x, x))
        loss.backward()
        loss.backward()
        assert x.grad.tolist() == [12.0]
        x.zero_grad()
        loss.backward()
        assert x.grad.tolist() == [6.0]

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            F.mul(t64([1.0, 2.0]), 2.0).backward()

    def test_freed_graph_rejected(self):
        x = t64([2.0])
        loss = F.sum(F.mul(x, x))
        loss.backward(free_graph=True)
        with pytest.raises(GraphIntegrityError):
            loss.backward()

    def test_each_node_visited_once(self):
        x = t64([1.5])
        y = F.mul(x, 2.0)
        calls = []
        inner = y.node.backward_fn
        y.node.backward_fn = lambda g: calls.append(1) or inner(g)
        # diamond: y feeds two branches that merge again
        loss = F.sum(F.add(F.mul(y, y), F.sigmoid(y)))
        loss.backward()
        assert len(calls) == 1
        s = 1 / (1 + np.exp(-3.0))
        assert x.grad[0] == pytest.approx(2 * (2 * 3.0 + s * (1 - s)))

    def test_no_requires_grad_no_buffer(self):
        x = t64([1.0], grad=False)
        w = t64([2.0])
        F.sum(F.mul(x, w)).backward()
        assert x.grad is None and w.grad is not None

    def test_no_grad_records_nothing(self):
        x = t64([1.0])
        with no_grad():
            y = F.mul(x, x)
        assert y.node is None and not y.requires_grad


class TestFiniteDiff:
    def test_quadratic_exactness(self):
        x = t64(np.random.default_rng(1).standard_normal((3, 3)))
        rep = finite_diff_check(lambda a: F.sum(F.mul(a, a)), [x], eps=1e-5, tol=1e-8)
        assert rep.passed, rep

    def test_detects_wrong_gradient(self):
        def bad(a):
            out = F.mul(a, a)
            if out.node is not None:
                out.node.backward_fn = lambda g: (g * 3.0 * a.data, g * a.data)
            return F.sum(out)

        rep = finite_diff_check(bad, [t64([1.0, 2.0])], tol=1e-4)
        assert not rep.passed

    def test_non_finite_names_coordinate(self):
        def f(a):
            if a.data[1] > 1.0:
                return F.sum(F.mul(a, float("inf")))
            return F.sum(a)

        with pytest.raises(NumericalInstabilityError, match=r"\(1,\)"):
            finite_diff_check(f, [t64([0.5, 1.0 - 1e-6])], eps=1e-5)

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)

    def test_requires_float64(self):
        with pytest.raises(ContractError):
            finite_diff_check(F.sum, [Tensor(np.ones(2, dtype=np.float32), requires_grad=True)])


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_gradcheck_random(kind):
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = t64(rng.standard_normal((2, 3, 4)))
        b = t64(rng.standard_normal((2, 1, 4)))
        w = rng.standard_normal((2, 3, 4))
        rep = finite_diff_check(lambda a, b: F.sum(F.mul(F.elementwise(a, b, kind), w)), [a, b])
        assert rep.passed, rep
