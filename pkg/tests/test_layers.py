import math

import numpy as np
import pytest

from tsgan import gradcheck
from tsgan import tensor as T
from tsgan.errors import ShapeError, TrainingError
from tsgan.layers import Adam, GruLayer, GruStack, Linear, uniform_init


def scalar_gru_step(params, x, h):
    """Independent single-cell evaluation of the recurrence, plain floats."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    r = sig(params["wxr"] * x + params["bxr"] + params["whr"] * h + params["bhr"])
    z = sig(params["wxz"] * x + params["bxz"] + params["whz"] * h + params["bhz"])
    n = math.tanh(
        params["wxn"] * x + params["bxn"] + r * (params["whn"] * h + params["bhn"])
    )
    return (1.0 - z) * n + z * h


class TestLinear:
    def test_identity(self):
        layer = Linear(T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert np.allclose(layer(T.Tensor(x)).data, x)

    def test_constant_map(self):
        layer = Linear(T.Tensor(np.zeros((2, 3))), T.Tensor([5.0, -1.0]))
        out = layer(T.Tensor(np.ones((4, 3))))
        assert np.array_equal(out.data, np.tile([5.0, -1.0], (4, 1)))

    def test_hand_case(self):
        layer = Linear(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([1.0, 1.0]))
        out = layer(T.Tensor([[1.0, 1.0]]))
        assert np.array_equal(out.data, [[4.0, 8.0]])

    def test_shape_check(self):
        layer = Linear.build(3, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            layer(T.Tensor(np.zeros((4, 5))))


class TestInit:
    def test_deterministic(self):
        a = uniform_init(np.random.default_rng(9), (4, 4), 16)
        b = uniform_init(np.random.default_rng(9), (4, 4), 16)
        assert np.array_equal(a.data, b.data)

    def test_bound(self):
        w = uniform_init(np.random.default_rng(1), (50, 100), 100)
        assert np.all(np.abs(w.data) <= 0.1)

    def test_empirical_mean(self):
        n = 10**5
        w = uniform_init(np.random.default_rng(2), (n,), 100)
        bound = 0.1
        assert abs(w.data.mean()) < 3 * bound / math.sqrt(3 * n)


class TestGru:
    def test_zero_params_fixed_point(self):
        stack = GruStack.build(2, 3, 1, np.random.default_rng(0))
        for _, p in stack.parameters():
            p.data = np.zeros_like(p.data)
        x = np.random.default_rng(1).normal(size=(2, 5, 2))
        out, h_t = stack.forward(T.Tensor(x), T.zeros((1, 2, 3)))
        assert not out.data.any()
        assert not h_t.data.any()

    def test_paper_scale_shapes(self):
        stack = GruStack.build(2, 450, 3, np.random.default_rng(0))
        out, h_t = stack.forward(
            T.Tensor(np.zeros((2, 24, 2))), T.zeros((3, 2, 450))
        )
        assert out.shape == (2, 24, 450)
        assert h_t.shape == (3, 2, 450)

    def test_single_cell_matches_scalar_recurrence(self):
        rng = np.random.default_rng(7)
        names = ["wxr", "wxz", "wxn", "whr", "whz", "whn", "bxr", "bxz", "bxn",
                 "bhr", "bhz", "bhn"]
        params = {k: float(rng.normal()) for k in names}
        layer = GruLayer(
            w_x=T.Tensor([[params["wxr"]], [params["wxz"]], [params["wxn"]]]),
            w_h=T.Tensor([[params["whr"]], [params["whz"]], [params["whn"]]]),
            b_x=T.Tensor([params["bxr"], params["bxz"], params["bxn"]]),
            b_h=T.Tensor([params["bhr"], params["bhz"], params["bhn"]]),
        )
        x, h = 0.4, -0.3
        got = layer.step(layer.make_ctx(1), T.Tensor([[x]]), T.Tensor([[h]]))
        assert got.data[0, 0] == pytest.approx(scalar_gru_step(params, x, h), rel=1e-12)

    def test_saturated_update_gate_copies_h0(self):
        stack = GruStack.build(1, 2, 1, np.random.default_rng(3))
        layer = stack.layers[0]
        bx = layer.b_x.data.copy()
        bx[2:4] = 30.0  # update-gate rows
        layer.b_x = T.Tensor(bx, requires_grad=True)
        h0 = np.array([[[0.37, -0.8]]])
        x = np.random.default_rng(4).normal(size=(1, 6, 1))
        _, h_t = stack.forward(T.Tensor(x), T.Tensor(h0))
        assert np.all(np.abs(h_t.data - h0) < 1e-9)

    def test_h0_shape_check(self):
        stack = GruStack.build(1, 2, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            stack.forward(T.Tensor(np.zeros((1, 3, 1))), T.zeros((1, 1, 2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        stack = GruStack.build(2, 3, 2, rng)
        names = [n for n, _ in stack.parameters()]
        arrays = [p.data.copy() for _, p in stack.parameters()]
        x = rng.normal(size=(2, 3, 2))
        h0 = rng.normal(size=(2, 2, 3))
        weights = rng.normal(size=(2, 3, 3))

        def build(*params):
            layers = []
            idx = 0
            for l in range(2):
                layers.append(GruLayer(params[idx], params[idx + 1], params[idx + 2], params[idx + 3]))
                idx += 4
            return GruStack(layers)

        def f(*params):
            stack2 = build(*params[:-1])
            out, _ = stack2.forward(T.Tensor(x), params[-1])
            return T.reduce_sum(T.mul(out, T.Tensor(weights)))

        err = gradcheck.check_scalar_fn(f, arrays + [h0])
        assert err < gradcheck.FIRST_ORDER_TOL, f"{names}: {err}"


class TestAdam:
    def _one_param(self, value):
        return [("p", T.Tensor(np.array([value], dtype=float), requires_grad=True))]

    def test_zero_gradient_keeps_params(self):
        params = self._one_param(1.23)
        opt = Adam(params, lr=0.01)
        opt.step({params[0][1]: T.Tensor([0.0])})
        assert params[0][1].data[0] == 1.23

    def test_first_step_without_momentum(self):
        params = self._one_param(0.0)
        opt = Adam(params, lr=1e-4, beta1=0.0, beta2=0.9)
        opt.step({params[0][1]: T.Tensor([2.0])})
        assert params[0][1].data[0] == pytest.approx(-1e-4, rel=1e-6)

    def test_first_step_bias_correction(self):
        params = self._one_param(0.0)
        opt = Adam(params, lr=1e-3, beta1=0.9, beta2=0.999)
        opt.step({params[0][1]: T.Tensor([1.0])})
        assert params[0][1].data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_constant_gradient_moves_monotonically(self):
        params = self._one_param(0.5)
        opt = Adam(params, lr=0.01)
        prev = params[0][1].data[0]
        for _ in range(50):
            opt.step({params[0][1]: T.Tensor([3.0])})
            cur = params[0][1].data[0]
            assert cur < prev
            prev = cur

    def test_nan_gradient_aborts(self):
        params = self._one_param(0.0)
        opt = Adam(params)
        with pytest.raises(TrainingError):
            opt.step({params[0][1]: T.Tensor([float("nan")])})
