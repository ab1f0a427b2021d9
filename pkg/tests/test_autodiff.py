"""Backward-pass behavior and finite-difference gradient checks."""

import numpy as np
import pytest

from cianet import tensor as T
from cianet.errors import ContractError
from helpers import check_op_grads


def t(arr, **kw):
    return T.Tensor(np.asarray(arr, dtype=np.float64), **kw)


class TestBackwardMechanics:
    def test_sum_relu(self):
        x = t(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        loss = T.tensor_sum(T.relu(x))
        loss.backward()
        np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0])

    def test_non_scalar_loss_rejected(self):
        x = t(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            T.relu(x).backward()

    def test_fanout_accumulates(self):
        x = t(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        y = T.add(x, x)  # dy/dx = 2
        z = T.mul(y, y)  # z = 4 x^2, dz/dx = 8x = 24
        T.tensor_sum(z).backward()
        np.testing.assert_allclose(x.grad.reshape(-1), [24.0])

    def test_backward_from_multiple_roots(self):
        x = t(np.ones((1, 1, 1, 2)), requires_grad=True)
        a = T.relu(x)
        b = T.mul(x, x)
        T.backward_from([a, b], [np.full(a.shape, 1.0), np.full(b.shape, 0.5)])
        # d/dx [ relu(x) + 0.5 x^2 ] = 1 + x = 2 at x=1
        np.testing.assert_allclose(x.grad.reshape(-1), [2.0, 2.0])

    def test_concat_backward_splits_ones(self):
        a = t(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = t(np.zeros((1, 3, 2, 2)), requires_grad=True)
        T.tensor_sum(T.concat_channels([a, b])).backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_no_grad_blocks_recording(self):
        x = t(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert y._parents == ()

    def test_grad_accumulates_across_backwards(self):
        x = t(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        T.tensor_sum(T.mul(x, x)).backward()
        g1 = x.grad.copy()
        T.tensor_sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * g1)


class TestDeltaKernelProperty:
    def test_identity_for_random_inputs(self):
        rng = np.random.default_rng(7)
        w = np.zeros((2, 2, 3, 3))
        for c in range(2):
            w[c, c, 1, 1] = 1.0
        for _ in range(10):
            x = rng.standard_normal((1, 2, 5, 6))
            out = T.conv2d(t(x), t(w), stride=1, padding=1)
            np.testing.assert_array_equal(out.data, x)


class TestFiniteDifferences:
    """Spot checks per op; the exhaustive 100-case suite runs in acceptance."""

    N_CASES = 8

    def test_conv2d(self):
        rng = np.random.default_rng(10)
        for _ in range(self.N_CASES):
            x = rng.standard_normal((1, 2, 5, 4))
            w = rng.standard_normal((3, 2, 3, 3)) * 0.5
            b = rng.standard_normal((1, 3, 1, 1))
            check_op_grads(
                lambda ts: T.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1),
                [x, w, b], rng, what="conv2d")

    def test_conv2d_stride2(self):
        rng = np.random.default_rng(11)
        for _ in range(self.N_CASES):
            x = rng.standard_normal((1, 1, 7, 7))
            w = rng.standard_normal((2, 1, 3, 3)) * 0.5
            check_op_grads(
                lambda ts: T.conv2d(ts[0], ts[1], stride=2, padding=1),
                [x, w], rng, what="conv2d_s2")

    def test_avg_pool(self):
        rng = np.random.default_rng(12)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.avg_pool2d(ts[0]),
                           [rng.standard_normal((2, 2, 4, 4))], rng, what="avg_pool2d")

    def test_upsample(self):
        rng = np.random.default_rng(13)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.bilinear_upsample2x(ts[0]),
                           [rng.standard_normal((1, 2, 3, 4))], rng, what="bilinear_upsample2x")

    def test_batch_norm_train(self):
        rng = np.random.default_rng(14)
        for _ in range(self.N_CASES):
            c = 3
            x = rng.standard_normal((2, c, 3, 3)) * 2 + 1
            scale = rng.uniform(0.5, 1.5, (1, c, 1, 1))
            shift = rng.standard_normal((1, c, 1, 1))

            def op(ts):
                return T.batch_norm(ts[0], ts[1], ts[2], np.zeros(c), np.ones(c), "train")

            check_op_grads(op, [x, scale, shift], rng, what="batch_norm_train")

    def test_batch_norm_eval(self):
        rng = np.random.default_rng(15)
        c = 2
        rm = rng.standard_normal(c)
        rv = rng.uniform(0.5, 2.0, c)
        for _ in range(self.N_CASES):
            x = rng.standard_normal((2, c, 3, 3))
            scale = rng.uniform(0.5, 1.5, (1, c, 1, 1))
            shift = rng.standard_normal((1, c, 1, 1))

            def op(ts):
                return T.batch_norm(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), "eval")

            check_op_grads(op, [x, scale, shift], rng, what="batch_norm_eval")

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(16)
        for _ in range(self.N_CASES):
            x = rng.standard_normal((1, 2, 3, 3))
            x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep clear of the kink
            check_op_grads(lambda ts: T.relu(ts[0]), [x], rng, what="relu")

    def test_sigmoid(self):
        rng = np.random.default_rng(17)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.sigmoid(ts[0]),
                           [rng.standard_normal((1, 2, 3, 3)) * 2], rng, what="sigmoid")

    def test_concat(self):
        rng = np.random.default_rng(18)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.concat_channels(ts),
                           [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))],
                           rng, what="concat_channels")

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_elementwise(self, kind):
        rng = np.random.default_rng(19)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.elementwise(ts[0], ts[1], kind),
                           [rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((1, 2, 2, 3))],
                           rng, what=f"elementwise_{kind}")

    def test_pad(self):
        rng = np.random.default_rng(20)
        for _ in range(self.N_CASES):
            check_op_grads(lambda ts: T.pad2d(ts[0], 1, 2, 0, 1),
                           [rng.standard_normal((1, 2, 3, 3))], rng, what="pad2d")

    def test_composite_graph(self):
        rng = np.random.default_rng(21)
        for _ in range(4):
            x = rng.standard_normal((1, 2, 4, 4))
            w1 = rng.standard_normal((4, 2, 3, 3)) * 0.4
            w2 = rng.standard_normal((1, 4, 1, 1)) * 0.4

            def op(ts):
                h = T.relu(T.conv2d(ts[0], ts[1], stride=1, padding=1))
                h = T.bilinear_upsample2x(h)
                h = T.avg_pool2d(h)
                return T.sigmoid(T.conv2d(h, ts[2], stride=1, padding=0))

            check_op_grads(op, [x, w1, w2], rng, what="composite")
