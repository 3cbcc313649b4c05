import numpy as np
import pytest

from atlasseg import gradcheck
from atlasseg.errors import DataError, UsageError
from atlasseg.graph import Graph, ParamStore


class TestForward:
    def test_identity_passthrough(self):
        g = Graph()
        x = g.input("x", (1, 2, 2, 2))
        out = g.affine(x, 1.0)
        data = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
        g.bind(x, data)
        g.forward()
        np.testing.assert_array_equal(out.value, data)

    def test_arithmetic_identity(self):
        g = Graph()
        x = g.input("x", (1, 2, 2, 2))
        out = g.affine(x, 2.0, 1.0)
        g.bind(x, np.ones((1, 2, 2, 2)))
        g.forward()
        np.testing.assert_array_equal(out.value, 3.0)

    def test_random_graph_matches_straightline_oracle(self):
        rng = np.random.default_rng(0)
        a_val = rng.uniform(0.5, 1.5, (2, 3, 3, 3))
        b_val = rng.uniform(0.5, 1.5, (2, 3, 3, 3))
        g = Graph()
        a = g.input("a", a_val.shape)
        b = g.input("b", b_val.shape)
        expr = g.sum(g.sqrt(g.div(g.square(g.add(a, b)), g.mul(a, b))))
        g.bind(a, a_val)
        g.bind(b, b_val)
        g.forward()
        oracle = np.sqrt((a_val + b_val) ** 2 / (a_val * b_val)).sum()
        assert float(expr.value) == pytest.approx(oracle, rel=1e-12)

    def test_unbound_input_rejected(self):
        g = Graph()
        g.input("x", (1, 2, 2, 2))
        with pytest.raises(UsageError, match="unbound"):
            g.forward()

    def test_shape_mismatch_rejected(self):
        g = Graph()
        a = g.input("a", (1, 2, 2, 2))
        b = g.input("b", (1, 4, 4, 4))
        with pytest.raises(DataError):
            g.add(a, b)
        with pytest.raises(DataError):
            g.bind(a, np.zeros((1, 3, 3, 3)))

    def test_backward_requires_scalar(self):
        g = Graph()
        x = g.input("x", (1, 2, 2, 2), needs_grad=True)
        y = g.square(x)
        g.bind(x, np.ones((1, 2, 2, 2)))
        g.forward()
        with pytest.raises(UsageError):
            g.backward(y)


class TestBackwardBasics:
    def test_identity_gradient_is_ones(self):
        g = Graph()
        x = g.input("x", (1, 3, 3, 3), needs_grad=True)
        out = g.sum(x)
        g.bind(x, np.random.default_rng(0).uniform(size=(1, 3, 3, 3)))
        g.forward()
        g.backward(out)
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_sum_of_squares_gradient(self):
        g = Graph()
        x = g.input("x", (1, 3, 3, 3), needs_grad=True)
        out = g.sum(g.square(x))
        val = np.random.default_rng(1).uniform(size=(1, 3, 3, 3))
        g.bind(x, val)
        g.forward()
        g.backward(out)
        np.testing.assert_allclose(x.grad, 2.0 * val, atol=1e-15)

    def test_broadcast_scalar_gradient(self):
        g = Graph()
        x = g.input("x", (2, 2, 2, 2), needs_grad=True)
        mu = g.mean(x)
        out = g.sum(g.square(g.sub(x, mu)))
        val = np.random.default_rng(2).uniform(size=(2, 2, 2, 2))
        g.bind(x, val)
        g.forward()
        g.backward(out)
        expected = 2.0 * (val - val.mean())  # d/dx of sum((x - mean)^2)
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_repeated_passes_bit_identical(self):
        g = Graph()
        store = ParamStore()
        rng = np.random.default_rng(3)
        store.add("w", rng.uniform(-0.5, 0.5, (2, 1, 3, 3, 3)))
        x = g.input("x", (1, 4, 4, 4), needs_grad=True)
        w = g.param(store, "w")
        out = g.sum(g.square(g.leaky_relu(g.conv3d(x, w), 0.2)))
        g.bind(x, rng.uniform(size=(1, 4, 4, 4)))
        g.forward()
        g.backward(out)
        first = (out.value.copy(), x.grad.copy(), w.grad.copy())
        g.forward()
        g.backward(out)
        assert float(out.value) == float(first[0])
        np.testing.assert_array_equal(x.grad, first[1])
        np.testing.assert_array_equal(w.grad, first[2])


class TestParamStore:
    def test_duplicate_names_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros(3))
        with pytest.raises(UsageError):
            store.add("w", np.zeros(3))

    def test_param_value_aliases_store(self):
        store = ParamStore()
        block = store.add("w", np.ones(4))
        g = Graph()
        node = g.param(store, "w")
        block[0] = 7.0
        assert node.value[0] == 7.0


class TestFiniteDifferenceSweep:
    @pytest.mark.parametrize("op", gradcheck.CHECKED_OPS)
    def test_op_gradient(self, op):
        result = gradcheck.check_op(op, seed=0)
        assert result.ok, f"{op}: rel err {result.max_rel_err} > {result.tol}"

    def test_grid_sample_matches_analytic_corner_weights(self):
        # single 2x2x2 cell with intensity = z: the displacement gradient is
        # the analytic trilinear slope (1 along z, 0 along x and y)
        g = Graph()
        zramp = np.broadcast_to(np.arange(2.0), (2, 2, 2)).copy()
        vol = g.const(zramp.reshape(1, 2, 2, 2))
        disp = g.input("u", (3, 2, 2, 2), needs_grad=True)
        out = g.sum(g.grid_sample(vol, disp))
        u = np.zeros((3, 2, 2, 2))
        u[2, 0, 0, 0] = 0.3  # strictly inside the cell along z
        g.bind(disp, u)
        g.forward()
        g.backward(out)
        assert disp.grad[2, 0, 0, 0] == pytest.approx(1.0, abs=1e-12)
        assert disp.grad[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-12)
        assert disp.grad[1, 0, 0, 0] == pytest.approx(0.0, abs=1e-12)
