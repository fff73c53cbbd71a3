import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpl import numerics as nx
from cpl.numerics import Tensor, backward, fd_gradcheck


def _leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestElementwise:
    def test_relu(self):
        out = nx.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0, 0, 2])

    def test_add_zero_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_array_equal(nx.add(x, 0).data, x.data)

    def test_power_grad(self):
        x = _leaf([0.25])
        backward(nx.sum_(nx.power(x, 2)))
        assert x.grad[0] == pytest.approx(0.5, abs=1e-15)
        res = fd_gradcheck(lambda t: nx.sum_(nx.power(t, 2)), np.array([0.25]))
        assert res.max_rel_error < 1e-8

    def test_clip_grad_zero_outside(self):
        x = _leaf([-0.5, 0.5, 1.5])
        backward(nx.sum_(nx.clip(x, 0.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0, 1, 0])

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_scalar_tensor_broadcast(self):
        a = _leaf(np.arange(1.0, 4.0))
        s = _leaf(2.0)
        backward(nx.sum_(nx.mul(a, s)))
        assert s.grad == pytest.approx(6.0)
        np.testing.assert_allclose(a.grad, [2, 2, 2])

    def test_non_finite_raises(self):
        with pytest.raises(nx.NonFiniteError):
            nx.power(Tensor([0.0]), -1)

    def test_dispatch(self):
        x = Tensor([-1.0, 2.0])
        np.testing.assert_array_equal(nx.elementwise("relu", x).data, [0, 2])
        np.testing.assert_array_equal(nx.elementwise("clip", x, (0.0, 1.0)).data, [0, 1])
        with pytest.raises(ValueError):
            nx.elementwise("tanh", x)


class TestMatmul:
    def test_identity(self):
        X = np.random.default_rng(1).normal(size=(2, 3))
        np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)

    def test_hand_value(self):
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        W = rng.normal(size=(3, 2))
        assert fd_gradcheck(lambda a: nx.sum_(nx.matmul(a, Tensor(B)) * Tensor(W)), A).max_rel_error < 1e-6
        assert fd_gradcheck(lambda b: nx.sum_(nx.matmul(Tensor(A), b) * Tensor(W)), B).max_rel_error < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(3).normal(size=(3, 5, 6))
        k = np.zeros((3, 3, 1, 1))
        k[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_array_equal(nx.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_ones_kernel_on_constant(self):
        c = 0.37
        out = nx.conv2d(Tensor(np.full((1, 6, 6), c)), Tensor(np.ones((1, 1, 3, 3))), padding="valid")
        assert out.shape == (1, 4, 4)
        np.testing.assert_allclose(out.data, 9 * c, rtol=1e-15)

    def test_against_direct_loops(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(2, 7, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        for stride in (1, 2):
            out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
            Ho = (9 - 3) // stride + 1
            ref = np.empty((3, Ho, Ho))
            for o in range(3):
                for i in range(Ho):
                    for j in range(Ho):
                        patch = xp[:, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[o, i, j] = (patch * w[o]).sum() + b[o]
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
        proj = rng.normal(size=(3, 8, 8))
        assert fd_gradcheck(lambda t: nx.sum_(nx.conv2d(t, Tensor(w)) * Tensor(proj)), x).max_rel_error < 1e-5
        assert fd_gradcheck(lambda t: nx.sum_(nx.conv2d(Tensor(x), t) * Tensor(proj)), w).max_rel_error < 1e-5
        proj2 = rng.normal(size=(3, 4, 4))
        assert (
            fd_gradcheck(lambda t: nx.sum_(nx.conv2d(t, Tensor(w), stride=2) * Tensor(proj2)), x).max_rel_error < 1e-5
        )

    def test_kernel_too_large(self):
        with pytest.raises(nx.ShapeError):
            nx.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor(np.full(5, 0.3))).data, 0.2, atol=1e-15)

    def test_shift_invariance(self):
        z = np.random.default_rng(6).normal(size=7)
        np.testing.assert_allclose(nx.softmax(Tensor(z)).data, nx.softmax(Tensor(z + 100)).data, atol=1e-15)

    def test_value(self):
        # e^z / sum(e^z), evaluated independently
        z = np.array([2.0, 1.0, 0.0])
        ref = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(ref, [0.66524, 0.24473, 0.09003], atol=5e-6)
        np.testing.assert_allclose(nx.softmax(Tensor(z)).data, ref, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-300, 300)))
    def test_sums_to_one(self, z):
        p = nx.softmax(Tensor(z)).data
        assert abs(p.sum() - 1.0) < 1e-9
        assert (p >= 0).all() and (p <= 1).all()

    @settings(max_examples=200, deadline=None)
    # a logit spread beyond ~35 rounds the largest probability to exactly 1.0
    @given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-15, 15)))
    def test_strictly_inside_unit_interval(self, z):
        p = nx.softmax(Tensor(z)).data
        assert (p > 0).all() and (p < 1).all()

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=5)
        assert fd_gradcheck(lambda t: nx.sum_(nx.softmax(t) * Tensor(w)), rng.normal(size=5)).max_rel_error < 1e-7


class TestReductions:
    def test_l1_zero(self):
        X = Tensor(np.random.default_rng(8).normal(size=(3, 3)))
        assert nx.l1_mean(X - X).item() == 0.0

    def test_l1_constant(self):
        assert nx.l1_mean(Tensor(np.full((4, 4), 0.125))).item() == 0.125

    def test_l2_sq_mean(self):
        assert nx.l2_sq_mean(Tensor([3.0, 4.0])).item() == 12.5

    def test_dispatch(self):
        x = Tensor([1.0, -3.0])
        assert nx.reduction("sum", x).item() == -2.0
        assert nx.reduction("mean", x).item() == -1.0
        assert nx.reduction("l1_mean", x).item() == 2.0


class TestBackward:
    def test_square(self):
        x = _leaf(3.0)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_relu_sum(self):
        x = _leaf([-1.0, 2.0])
        backward(nx.sum_(nx.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_non_scalar(self):
        x = _leaf([1.0, 2.0])
        with pytest.raises(nx.ShapeError):
            backward(x * 2.0)

    def test_twice(self):
        x = _leaf([1.0, 2.0])
        loss = nx.sum_(x * x)
        backward(loss)
        with pytest.raises(nx.TapeError):
            backward(loss)

    def test_fresh_tape_after_consumption(self):
        x = _leaf([1.0, 2.0])
        backward(nx.sum_(x * x))
        x.zero_grad()
        backward(nx.sum_(x * 3.0))
        np.testing.assert_array_equal(x.grad, [3, 3])

    def test_diamond_sums_branches(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=4)

        def f(x):
            shared = nx.power(x, 2)
            return nx.sum_(nx.relu(shared + 0.1) * 3.0 + shared * x)

        x = _leaf(x0)
        backward(f(x))
        np.testing.assert_allclose(x.grad, 6 * x0 + 3 * x0**2, rtol=1e-12)
        assert fd_gradcheck(f, x0).max_rel_error < 1e-7

    def test_leaf_used_many_times(self):
        x = _leaf([2.0])
        backward(nx.sum_(x * x * x + x))
        assert x.grad[0] == pytest.approx(13.0)

    def test_conv_relu_mean_pipeline(self):
        rng = np.random.default_rng(10)
        img = Tensor(rng.normal(size=(2, 8, 8)))
        w1 = rng.normal(size=(4, 2, 3, 3))
        w2 = rng.normal(size=(1, 4, 3, 3))

        def f_w1(w):
            return nx.mean(nx.conv2d(nx.relu(nx.conv2d(img, w)), Tensor(w2)))

        def f_w2(w):
            return nx.mean(nx.conv2d(nx.relu(nx.conv2d(img, Tensor(w1))), w))

        assert fd_gradcheck(f_w1, w1).max_rel_error < 1e-5
        assert fd_gradcheck(f_w2, w2).max_rel_error < 1e-5

    def test_no_grad_records_nothing(self):
        x = _leaf([1.0])
        with nx.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestShapeOps:
    def test_take_accumulates(self):
        x = _leaf([[1.0, 2.0], [3.0, 4.0]])
        backward(nx.sum_(nx.take(x, [0, 0, 1])))
        np.testing.assert_array_equal(x.grad, [[2, 2], [1, 1]])

    def test_broadcast_to(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(2, 3, 4, 4))
        f = lambda t: nx.sum_(nx.broadcast_to(nx.reshape(t, (2, 3, 1, 1)), (2, 3, 4, 4)) * Tensor(w))  # noqa: E731
        assert fd_gradcheck(f, rng.normal(size=(2, 3))).max_rel_error < 1e-8

    def test_pool_upsample(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(2, 2, 2))
        assert fd_gradcheck(lambda t: nx.sum_(nx.avg_pool2(t) * Tensor(w)), rng.normal(size=(2, 4, 4))).max_rel_error < 1e-8
        w = rng.normal(size=(2, 8, 8))
        assert fd_gradcheck(lambda t: nx.sum_(nx.upsample2(t) * Tensor(w)), rng.normal(size=(2, 4, 4))).max_rel_error < 1e-8

    def test_masked_softmax(self):
        z = np.array([2.0, 1.0, 0.0])
        out = nx.masked_softmax(Tensor(z), np.array([True, True, False])).data
        np.testing.assert_allclose(out, [np.exp(1) / (np.exp(1) + 1), 1 / (np.exp(1) + 1), 0.0], atol=1e-15)
        rng = np.random.default_rng(13)
        w = rng.normal(size=4)
        mask = np.array([True, False, True, True])
        assert fd_gradcheck(lambda t: nx.sum_(nx.masked_softmax(t, mask) * Tensor(w)), rng.normal(size=4)).max_rel_error < 1e-7

    def test_straight_through(self):
        soft = _leaf([0.2, 0.8])
        out = nx.straight_through(np.array([0.0, 1.0]), soft)
        np.testing.assert_array_equal(out.data, [0, 1])
        backward(nx.sum_(out * Tensor([3.0, 5.0])))
        np.testing.assert_array_equal(soft.grad, [3, 5])


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = nx.AdamState(lr=2e-4)
        nx.adam_update(state, {"p": p}, {"p": np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step(self):
        p = Tensor(np.array([0.0]))
        state = nx.AdamState(lr=2e-4)
        nx.adam_update(state, {"p": p}, {"p": np.ones(1)})
        # bias-corrected first step: lr * g / (sqrt(g^2) + eps)
        assert -p.data[0] == pytest.approx(2e-4 / (1.0 + 1e-8), rel=1e-12)
        assert -p.data[0] == pytest.approx(1.99998e-4, rel=1e-4)

    def test_lr_scale_applies_to_named_parameters_only(self):
        p, q = Tensor(np.array([0.0])), Tensor(np.array([0.0]))
        state = nx.AdamState(lr=2e-4)
        nx.adam_update(state, {"p": p, "q": q}, {"p": np.ones(1), "q": np.ones(1)}, lr_scale={"q": 10.0})
        assert q.data[0] == pytest.approx(10.0 * p.data[0], rel=1e-12)
        assert -p.data[0] == pytest.approx(2e-4 / (1.0 + 1e-8), rel=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(14)
        init, grads = rng.normal(size=5), [rng.normal(size=5) for _ in range(10)]
        finals = []
        for _ in range(2):
            p = Tensor(init.copy())
            state = nx.AdamState()
            for g in grads:
                nx.adam_update(state, {"p": p}, {"p": g})
            finals.append(p.data.tobytes())
        assert finals[0] == finals[1]

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.adam_update(nx.AdamState(), {"p": Tensor(np.zeros(2))}, {"p": np.zeros(3)})


class TestGradcheck:
    def test_linear_exact(self):
        w = np.random.default_rng(15).normal(size=6)
        assert fd_gradcheck(lambda t: nx.sum_(t * Tensor(w)), np.ones(6)).max_rel_error < 1e-10

    def test_cubic(self):
        assert fd_gradcheck(lambda t: nx.sum_(nx.power(t, 3)), np.array([2.0])).max_rel_error < 1e-8

    def test_relu_kink_is_skipped(self):
        res = fd_gradcheck(lambda t: nx.sum_(nx.relu(t)), np.array([0.0, 1.0]))
        assert res.skipped == 1 and res.checked == 1
        assert res.max_rel_error < 1e-10

    def test_non_scalar(self):
        with pytest.raises(nx.ShapeError):
            fd_gradcheck(lambda t: t * 2.0, np.ones(2))

    def test_detects_wrong_rule(self):
        # negative control: a deliberately wrong derivative must be caught
        def bad_square(t):
            return nx.tensor._record(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")

        assert fd_gradcheck(lambda t: nx.sum_(bad_square(t)), np.array([1.5, -0.7])).max_rel_error > 0.1

    @pytest.mark.parametrize("op", ["add", "mul", "power", "softmax", "matmul", "conv2d", "l1_mean", "l2_sq_mean"])
    def test_random_points(self, op):
        rng = np.random.default_rng(zlib.crc32(op.encode()))
        for _ in range(100):
            # magnitudes bounded away from 0 keep true gradients above the 1e-8 floor
            x = rng.uniform(0.2, 2.0, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3))
            w = rng.normal(size=(2, 3))
            fns = {
                "add": lambda t: nx.sum_((t + Tensor(w)) * Tensor(w)),
                "mul": lambda t: nx.sum_(t * t * Tensor(w)),
                "power": lambda t: nx.sum_(nx.power(t, 3) * Tensor(w)),
                "softmax": lambda t: nx.sum_(nx.softmax(t) * Tensor(w)),
                "matmul": lambda t: nx.sum_(nx.matmul(t, Tensor(w.T))),
                "conv2d": lambda t: nx.sum_(nx.conv2d(nx.reshape(t, (1, 2, 3)), Tensor(w[:1].reshape(1, 1, 1, 3)))),
                "l1_mean": lambda t: nx.l1_mean(t - Tensor(w)),
                "l2_sq_mean": lambda t: nx.l2_sq_mean(t - Tensor(w)),
            }
            assert fd_gradcheck(fns[op], x).max_rel_error <= 1e-4
