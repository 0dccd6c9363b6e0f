import math

import numpy as np
import pytest

from rafsel.exceptions import ShapeError
from rafsel.nn import (Adam, Conv2D, Dropout, Flatten, Linear, MaxPool2x2, ReLU, Sequential,
                       check_layer, grad_check, softmax, softmax_cross_entropy)


class TestConv2D:
    def test_identity_kernel(self, rng):
        conv = Conv2D(1, 1)
        conv.params["W"][:] = 0
        conv.params["W"][0, 0, 1, 1] = 1
        x = rng.standard_normal((1, 1, 3, 3))
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_ones_kernel_counts_overlaps(self):
        conv = Conv2D(1, 1)
        conv.params["W"][:] = 1
        out = conv.forward(np.ones((1, 1, 3, 3)))[0, 0]
        assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6

    def test_matches_direct_loop(self, rng):
        conv = Conv2D(2, 3, rng=rng)
        conv.params["b"][:] = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, 4, 5))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 3, 4, 5))
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    ref[:, o, i, j] = np.sum(xp[:, :, i:i + 3, j:j + 3] * conv.params["W"][o],
                                             axis=(1, 2, 3)) + conv.params["b"][o]
        np.testing.assert_allclose(conv.forward(x), ref, rtol=1e-12, atol=1e-12)

    def test_gradients(self, rng):
        conv = Conv2D(2, 2, rng=rng)
        rep = check_layer(conv, rng.standard_normal((2, 2, 5, 5)), tolerance=1e-5, samples=None)
        assert rep.passed, rep

    def test_skipped_input_gradient(self, rng):
        conv = Conv2D(1, 2, rng=rng, input_grad=False)
        out = conv.forward(rng.standard_normal((1, 1, 4, 4)))
        assert conv.backward(np.ones_like(out)) is None
        assert conv.grads["W"].any()

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            Conv2D(2, 4).forward(np.zeros((1, 3, 4, 4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            Conv2D(1, 1, kernel=2)


class TestMaxPool:
    def test_single_window(self):
        out = MaxPool2x2().forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.tolist() == [[[[4.0]]]]

    def test_tie_routes_to_first(self):
        pool = MaxPool2x2()
        pool.forward(np.array([[[[5.0, 5.0], [5.0, 1.0]]]]))
        dx = pool.backward(np.array([[[[1.0]]]]))
        assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_halves_dims(self):
        x = np.zeros((1, 2, 16, 8))
        assert MaxPool2x2().forward(x).shape == (1, 2, 8, 4)

    def test_odd_dims(self):
        with pytest.raises(ShapeError):
            MaxPool2x2().forward(np.zeros((1, 1, 3, 4)))

    def test_gradients(self, rng):
        assert check_layer(MaxPool2x2(), rng.standard_normal((2, 3, 6, 6)),
                           samples=None).passed


class TestLinear:
    def test_identity(self, rng):
        lin = Linear(4, 4)
        lin.params["W"][:] = np.eye(4)
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(lin.forward(x), x)

    def test_batch_stacking(self, rng):
        lin = Linear(5, 3, rng=rng)
        x = rng.standard_normal((2, 5))
        joint = lin.forward(x)
        # BLAS may reassociate across batch sizes
        np.testing.assert_allclose(joint[0], lin.forward(x[:1])[0], rtol=1e-12)
        np.testing.assert_allclose(joint[1], lin.forward(x[1:])[0], rtol=1e-12)

    def test_gradients(self, rng):
        assert check_layer(Linear(6, 4, rng=rng), rng.standard_normal((3, 6)),
                           samples=None).passed

    def test_zero_width_input(self):
        lin = Linear(0, 3)
        assert lin.forward(np.zeros((2, 0))).tolist() == [[0.0] * 3] * 2


class TestActivations:
    def test_relu(self, rng):
        x = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(ReLU().forward(x), np.maximum(x, 0))
        assert check_layer(ReLU(), x, samples=None).passed

    def test_dropout_inference_identity(self, rng):
        x = rng.standard_normal((4, 5))
        assert Dropout(0.5).forward(x) is x

    def test_dropout_expectation(self):
        drop = Dropout(0.5, rng=np.random.default_rng(0))
        x = np.ones((2000, 50))
        assert abs(drop.forward(x, train=True).mean() - 1.0) < 0.01

    def test_dropout_gradients(self, rng):
        drop = Dropout(0.5)

        def reseed():
            drop.rng = np.random.default_rng(7)
        assert check_layer(drop, rng.standard_normal((3, 8)), train=True, reseed=reseed,
                           samples=None).passed

    def test_flatten_roundtrip(self, rng):
        f = Flatten()
        x = rng.standard_normal((2, 3, 4, 4))
        assert f.forward(x).shape == (2, 48)
        assert f.backward(np.ones((2, 48))).shape == x.shape


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
        assert loss == pytest.approx(math.log(7), abs=1e-12)

    def test_gradient_formula(self, rng):
        z = rng.standard_normal((4, 5))
        y = np.array([0, 1, 2, 4])
        _, d = softmax_cross_entropy(z, y)
        np.testing.assert_allclose(d * 4, softmax(z) - np.eye(5)[y], atol=1e-15)

    def test_finite_differences(self, rng):
        z = rng.standard_normal((5, 7))
        y = rng.integers(0, 7, size=5)
        _, d = softmax_cross_entropy(z, y)
        rep = grad_check(lambda: softmax_cross_entropy(z, y)[0], [z], [d], tolerance=1e-6,
                         samples=None)
        assert rep.passed, rep

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.standard_normal((6, 4)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = rng.standard_normal(5)
        before = p.copy()
        opt = Adam([p])
        for _ in range(3):
            opt.step([np.zeros(5)])
        np.testing.assert_array_equal(p, before)

    def test_constant_gradient_step_size(self):
        p = np.zeros(3)
        opt = Adam([p], lr=1e-3)
        g = np.array([0.5, -2.0, 3.0])
        prev = p.copy()
        for _ in range(200):
            prev = p.copy()
            opt.step([g])
        np.testing.assert_allclose(p - prev, -1e-3 * np.sign(g), rtol=1e-6)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = rng.standard_normal(4)
            opt = Adam([p])
            for _ in range(20):
                opt.step([rng.standard_normal(4)])
            return p
        np.testing.assert_array_equal(run(), run())


class TestGradCheck:
    def _net(self, rng):
        return Sequential([Linear(5, 4, rng=rng), Linear(4, 3, rng=rng)])

    def _report(self, net, x, tolerance):
        w = np.random.default_rng(1).standard_normal((x.shape[0], 3))
        net.zero_grad()
        net.forward(x)
        net.backward(w)
        arrays = [layer.params[k] for layer in net.layers for k in layer.params]
        grads = [layer.grads[k].copy() for layer in net.layers for k in layer.params]
        return grad_check(lambda: float(np.sum(net.forward(x) * w)), arrays, grads,
                          tolerance=tolerance, samples=None)

    def test_linear_only(self, rng):
        net = self._net(rng)
        rep = self._report(net, rng.standard_normal((3, 5)), 1e-7)
        assert rep.passed, rep

    def test_corrupted_backward_detected(self, rng):
        net = self._net(rng)
        original = net.layers[0].backward

        def broken(dout):
            dx = original(dout)
            net.layers[0].grads["W"] *= 1.1
            return dx
        net.layers[0].backward = broken
        rep = self._report(net, rng.standard_normal((3, 5)), 1e-5)
        assert not rep.passed and rep.max_rel_error > 0.01

    def test_named_params(self, rng):
        names = [n for n, _, _ in self._net(rng).named_params("x.")]
        assert names == ["x.0.W", "x.0.b", "x.1.W", "x.1.b"]
