"""Unit tests for the reverse-mode core.

Reference values come from independent scalar-loop implementations written
here in the test module (double precision, no shared code with the package),
or from hand arithmetic for the small worked examples.
"""
import numpy as np
import pytest

from sepattn import diffcore as dc
from sepattn.diffcore import ops


# ---------------------------------------------------------------------------
# independent oracles


def ref_conv2d(x, w, b, stride, padding):
    """Direct six-loop cross-correlation in float64."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, cout, oh, ow), np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[ni, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[ni, co, i, j] = s + (b[co] if b is not None else 0.0)
    return out


def ref_conv_transpose2d(y, w, stride, padding):
    """Direct scatter: each input pixel stamps the kernel into the output."""
    n, cout, hy, wy = y.shape
    _, cin, kh, kw = w.shape
    h = (hy - 1) * stride - 2 * padding + kh
    wd = (wy - 1) * stride - 2 * padding + kw
    full = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(hy):
                for j in range(wy):
                    for ci in range(cin):
                        full[ni, ci, i * stride : i * stride + kh, j * stride : j * stride + kw] += (
                            y[ni, co, i, j] * w[co, ci]
                        )
    if padding:
        return full[:, :, padding:-padding, padding:-padding]
    return full


def t4(arr, requires_grad=False):
    return dc.Tensor4(np.asarray(arr, dtype=np.float32), requires_grad)


def row(vals):
    """A (1, 1, 1, n) tensor from a flat list."""
    return t4(np.asarray(vals, dtype=np.float32).reshape(1, 1, 1, -1))


# ---------------------------------------------------------------------------
# tensor basics


class TestTensor4:
    def test_rejects_non_4d(self):
        with pytest.raises(dc.ShapeError):
            dc.Tensor4(np.zeros((3, 3), np.float32))

    def test_scalar_shape_and_item(self):
        s = dc.Tensor4.scalar(2.5)
        assert s.shape == (1, 1, 1, 1)
        assert s.item() == pytest.approx(2.5)

    def test_item_rejects_non_scalar(self):
        with pytest.raises(dc.ShapeError):
            t4(np.zeros((1, 1, 1, 2))).item()

    def test_detach_shares_values_but_not_graph(self):
        a = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        b = ops.scale(a, 3.0)
        d = b.detach()
        assert d.requires_grad is False and d.is_leaf
        np.testing.assert_array_equal(d.data, b.data)


# ---------------------------------------------------------------------------
# convolution forward


class TestConv2d:
    def test_ones_kernel_counts_taps(self):
        # 3x3 all-ones kernel over a ones image, stride 1, padding 1:
        # interior pixels see 9 taps, corners 4, edges 6
        x = t4(np.ones((1, 1, 5, 5)))
        w = t4(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, None, stride=1, padding=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 6.0

    def test_1x1_kernel_scales_channels(self):
        x = t4(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        w = t4(np.array([[[[2.0]], [[0.0]]]], np.float32))  # picks 2*ch0
        out = ops.conv2d(x, w, None).data
        np.testing.assert_allclose(out[0, 0], 2.0 * x.data[0, 0])

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 4), (1, 1, 3), (2, 0, 2)])
    def test_matches_scalar_loop_reference(self, stride, padding, k):
        rng = np.random.default_rng(11 + stride + padding)
        x = t4(rng.standard_normal((2, 3, 7, 7)))
        w = t4(rng.standard_normal((4, 3, k, k)) * 0.4)
        b = t4(rng.standard_normal((1, 4, 1, 1)))
        got = ops.conv2d(x, w, b, stride=stride, padding=padding).data
        want = ref_conv2d(x.data, w.data, b.data.reshape(-1), stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_channel_mismatch_names_both_shapes(self):
        x = t4(np.zeros((1, 3, 4, 4)))
        w = t4(np.zeros((2, 4, 3, 3)))
        with pytest.raises(dc.ShapeError, match=r"3.*4"):
            ops.conv2d(x, w)

    def test_collapsed_output_rejected(self):
        x = t4(np.zeros((1, 1, 2, 2)))
        w = t4(np.zeros((1, 1, 5, 5)))
        with pytest.raises(dc.ShapeError, match="stay >= 1"):
            ops.conv2d(x, w)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = t4(rng.standard_normal((2, 3, 8, 8)))
        w = t4(rng.standard_normal((4, 3, 4, 4)))
        a = ops.conv2d(x, w, None, stride=2, padding=1).data
        b = ops.conv2d(x, w, None, stride=2, padding=1).data
        assert np.array_equal(a, b)


class TestConvTranspose2d:
    def test_zeros_to_zeros(self):
        y = t4(np.zeros((1, 2, 3, 3)))
        w = t4(np.ones((2, 3, 4, 4)))
        out = ops.conv_transpose2d(y, w, stride=2, padding=1)
        assert out.shape == (1, 3, 6, 6)
        assert not out.data.any()

    def test_single_pixel_stamps_kernel(self):
        y = t4(np.ones((1, 1, 1, 1)))
        w = t4(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        out = ops.conv_transpose2d(y, w).data
        np.testing.assert_array_equal(out[0, 0], w.data[0, 0])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
    def test_matches_scatter_reference(self, stride, padding):
        rng = np.random.default_rng(5 + stride)
        y = t4(rng.standard_normal((2, 4, 3, 3)))
        w = t4(rng.standard_normal((4, 3, 4, 4)) * 0.4)
        got = ops.conv_transpose2d(y, w, stride=stride, padding=padding).data
        want = ref_conv_transpose2d(y.data, w.data, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, seed):
        # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>
        rng = np.random.default_rng(seed)
        x = t4(rng.standard_normal((2, 3, 6, 6)))
        w = t4(rng.standard_normal((4, 3, 4, 4)) * 0.3)
        y = t4(rng.standard_normal((2, 4, 3, 3)))
        cx = ops.conv2d(x, w, None, stride=2, padding=1)
        ty = ops.conv_transpose2d(y, w, stride=2, padding=1)
        lhs = float(np.sum(cx.data.astype(np.float64) * y.data))
        rhs = float(np.sum(x.data.astype(np.float64) * ty.data))
        assert lhs == pytest.approx(rhs, rel=1e-5)

    def test_shape_law(self):
        y = t4(np.zeros((1, 4, 5, 5)))
        w = t4(np.zeros((4, 2, 4, 4)))
        out = ops.conv_transpose2d(y, w, stride=2, padding=1)
        assert out.shape == (1, 2, 10, 10)


# ---------------------------------------------------------------------------
# batch norm


class TestBatchNorm:
    def _gb(self, c, gamma=1.0, beta=0.0):
        g = t4(np.full((1, c, 1, 1), gamma, np.float32))
        b = t4(np.full((1, c, 1, 1), beta, np.float32))
        return g, b

    def test_two_value_channel_normalizes_to_unit(self):
        # channel values [1, 3]: mean 2, biased var 1 -> [-1, 1] (up to eps)
        x = t4(np.array([1.0, 3.0], np.float32).reshape(1, 1, 1, 2))
        g, b = self._gb(1)
        stats = ops.RunningStats.create(1)
        out = ops.batch_norm(x, g, b, stats, training=True).data.reshape(-1)
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_affine_applies_after_normalize(self):
        x = t4(np.array([1.0, 3.0], np.float32).reshape(1, 1, 1, 2))
        g, b = self._gb(1, gamma=2.0, beta=0.5)
        stats = ops.RunningStats.create(1)
        out = ops.batch_norm(x, g, b, stats, training=True).data.reshape(-1)
        np.testing.assert_allclose(out, [-1.5, 2.5], atol=2e-4)

    def test_running_stats_update_rule(self):
        rng = np.random.default_rng(2)
        x = t4(rng.standard_normal((4, 2, 3, 3)) * 2 + 1)
        g, b = self._gb(2)
        stats = ops.RunningStats.create(2, momentum=0.1)
        ops.batch_norm(x, g, b, stats, training=True)
        m = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        v = x.data.var(axis=(0, 2, 3), dtype=np.float64, ddof=1)
        np.testing.assert_allclose(stats.mean, 0.9 * 0.0 + 0.1 * m, rtol=1e-5)
        np.testing.assert_allclose(stats.var, 0.9 * 1.0 + 0.1 * v, rtol=1e-5)

    def test_eval_mode_uses_running_stats_and_ignores_batch(self):
        g, b = self._gb(1, gamma=1.0, beta=0.0)
        stats = ops.RunningStats(
            mean=np.array([2.0], np.float32), var=np.array([4.0], np.float32)
        )
        x = t4(np.array([4.0, 100.0], np.float32).reshape(1, 1, 1, 2))
        out = ops.batch_norm(x, g, b, stats, training=False).data.reshape(-1)
        np.testing.assert_allclose(out, [(4 - 2) / 2.0, (100 - 2) / 2.0], rtol=1e-4)
        # and the buffers were not touched
        assert stats.mean[0] == 2.0 and stats.var[0] == 4.0

    def test_update_stats_override_blocks_buffer_writes(self):
        x = t4(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
        g, b = self._gb(1)
        stats = ops.RunningStats.create(1)
        ops.batch_norm(x, g, b, stats, training=True, update_stats=False)
        assert stats.mean[0] == 0.0 and stats.var[0] == 1.0

    def test_single_value_variance_rejected(self):
        x = t4(np.ones((1, 1, 1, 1)))
        g, b = self._gb(1)
        with pytest.raises(dc.ShapeError, match="variance is undefined"):
            ops.batch_norm(x, g, b, ops.RunningStats.create(1), training=True)

    def test_channel_count_mismatch_rejected(self):
        x = t4(np.ones((1, 3, 2, 2)))
        g, b = self._gb(3)
        with pytest.raises(dc.ShapeError, match="channels"):
            ops.batch_norm(x, g, b, ops.RunningStats.create(2), training=True)


# ---------------------------------------------------------------------------
# pointwise and reductions


class TestPointwise:
    def test_leaky_relu_values(self):
        x = row([-1.0, 0.0, 2.0])
        out = ops.leaky_relu(x, 0.2).data.reshape(-1)
        np.testing.assert_allclose(out, [-0.2, 0.0, 2.0], rtol=1e-6)

    def test_leaky_relu_slope_domain(self):
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValueError):
                ops.leaky_relu(row([1.0]), bad)

    def test_tanh_values(self):
        out = ops.tanh(row([0.0, 1e4])).data.reshape(-1)
        assert out[0] == 0.0
        assert out[1] == pytest.approx(1.0)

    def test_add_sub_mul_values_and_shape_guard(self):
        a, b = row([1.0, 2.0]), row([3.0, 5.0])
        np.testing.assert_allclose(ops.add(a, b).data.reshape(-1), [4.0, 7.0])
        np.testing.assert_allclose(ops.sub(a, b).data.reshape(-1), [-2.0, -3.0])
        np.testing.assert_allclose(ops.mul(a, b).data.reshape(-1), [3.0, 10.0])
        with pytest.raises(dc.ShapeError, match=r"\(1, 1, 1, 2\).*\(1, 1, 1, 3\)"):
            ops.add(a, row([1.0, 2.0, 3.0]))

    def test_scale_and_shift(self):
        a = row([1.0, -2.0])
        np.testing.assert_allclose(ops.scale(a, -3.0).data.reshape(-1), [-3.0, 6.0])
        np.testing.assert_allclose(ops.shift(a, 1.5).data.reshape(-1), [2.5, -0.5])


class TestReductions:
    def test_mean_abs_worked_example(self):
        assert ops.mean_abs(row([1.0, -2.0, 3.0])).item() == pytest.approx(2.0)

    def test_mean_sq_worked_example(self):
        assert ops.mean_sq(row([1.0, -2.0, 3.0])).item() == pytest.approx(14.0 / 3.0)

    def test_reductions_accumulate_in_float64(self):
        # 2**20 copies of 0.1: naive float32 accumulation drifts by ~1e-4;
        # float64 accumulation stays within float32 representation error of 0.1
        x = dc.Tensor4(np.full((1, 1, 1024, 1024), 0.1, np.float32))
        got = ops.mean_abs(x).item()
        assert abs(got - np.float64(np.float32(0.1))) < 1e-9

    def test_mean_softplus_value(self):
        got = ops.mean_softplus(row([0.0, 100.0])).item()
        assert got == pytest.approx((np.log(2.0) + 100.0) / 2.0, rel=1e-6)

    def test_concat_channels_layout_and_guard(self):
        a = t4(np.ones((1, 2, 2, 2)))
        b = t4(np.zeros((1, 3, 2, 2)))
        out = ops.concat_channels(a, b)
        assert out.shape == (1, 5, 2, 2)
        assert out.data[:, :2].all() and not out.data[:, 2:].any()
        with pytest.raises(dc.ShapeError):
            ops.concat_channels(a, t4(np.zeros((1, 3, 3, 2))))


# ---------------------------------------------------------------------------
# backward mechanics


class TestBackward:
    def test_square_via_mul(self):
        x = t4(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        y = ops.mul(x, x)
        dc.backward(y)
        assert x.grad.reshape(-1)[0] == pytest.approx(6.0)

    def test_non_scalar_backward_rejected(self):
        x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(dc.GraphError, match="scalar"):
            dc.backward(ops.scale(x, 2.0))

    def test_sum_of_losses_equals_sum_of_grads(self):
        rng = np.random.default_rng(7)
        make = lambda: t4(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        x = make()
        la = ops.mean_sq(x)
        lb = ops.mean_abs(x)
        dc.backward(ops.add(la, lb))
        combined = x.grad.copy()

        x.zero_grad()
        dc.backward(ops.mean_sq(x))
        dc.backward(ops.mean_abs(x))  # accumulates additively
        np.testing.assert_allclose(x.grad, combined, rtol=1e-6, atol=1e-7)

    def test_diamond_graph_accumulates_both_paths(self):
        x = t4(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        a = ops.scale(x, 3.0)
        b = ops.scale(x, 5.0)
        dc.backward(ops.mul(a, b))  # d/dx 15x^2 = 30x = 60
        assert x.grad.reshape(-1)[0] == pytest.approx(60.0)

    def test_detach_blocks_gradient(self):
        x = t4(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        y = ops.mul(ops.scale(x, 2.0).detach(), x)  # treated as 4*x
        dc.backward(y)
        assert x.grad.reshape(-1)[0] == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# optimizer


class TestAdam:
    def _param(self, value, pid="p"):
        return dc.Parameter(pid, t4(np.full((1, 1, 1, 1), value, np.float32)))

    def test_single_step_hand_value(self):
        # lr 0.01, b1 0.5, b2 0.999, g=1: mhat=1, vhat=1 -> theta = 1 - 0.01
        p = self._param(1.0)
        p.tensor.grad = np.ones((1, 1, 1, 1), np.float32)
        st = dc.AdamState(lr=0.01, beta1=0.5, beta2=0.999, epsilon=1e-8)
        dc.adam_step([p], st)
        assert p.tensor.data.reshape(-1)[0] == pytest.approx(0.99, abs=1e-6)
        assert p.tensor.grad is None  # grads dropped after the step

    def test_zero_grad_fresh_state_no_motion(self):
        p = self._param(1.0)
        p.tensor.grad = np.zeros((1, 1, 1, 1), np.float32)
        dc.adam_step([p], dc.AdamState())
        assert p.tensor.data.reshape(-1)[0] == 1.0

    def test_constant_gradient_step_size_approaches_lr(self):
        p = self._param(0.0)
        st = dc.AdamState(lr=2e-4, beta1=0.5, beta2=0.999)
        prev = 0.0
        for _ in range(50):
            p.tensor.grad = np.full((1, 1, 1, 1), 7.0, np.float32)
            dc.adam_step([p], st)
            step = prev - float(p.tensor.data.reshape(-1)[0])
            prev = float(p.tensor.data.reshape(-1)[0])
        assert step == pytest.approx(2e-4, rel=1e-3)

    def test_missing_grad_names_parameter(self):
        p = self._param(1.0, pid="gen/w")
        with pytest.raises(dc.GraphError, match="gen/w"):
            dc.adam_step([p], dc.AdamState())

    def test_frozen_parameter_rejected(self):
        p = dc.Parameter("frozen", t4(np.ones((1, 1, 1, 1))), trainable=False)
        p.tensor.grad = np.ones((1, 1, 1, 1), np.float32)
        with pytest.raises(ValueError, match="frozen"):
            dc.adam_step([p], dc.AdamState())

    def test_state_is_per_parameter_id(self):
        a, b = self._param(1.0, "a"), self._param(1.0, "b")
        st = dc.AdamState()
        a.tensor.grad = np.ones((1, 1, 1, 1), np.float32)
        b.tensor.grad = -np.ones((1, 1, 1, 1), np.float32)
        dc.adam_step([a, b], st)
        assert set(st.m) == {"a", "b"}
        assert st.m["a"][0, 0, 0, 0] == -st.m["b"][0, 0, 0, 0]


# ---------------------------------------------------------------------------
# finite-difference harness


class TestGradCheck:
    def test_square_function_tight(self):
        x = t4(np.full((1, 1, 1, 1), 3.0, np.float32))
        res = dc.grad_check(lambda t: ops.mul(t, t), [x], name="square")
        assert res.passed and res.max_rel_error < 1e-4

    def test_detects_broken_gradient(self):
        def broken(t):
            out = ops.tanh(t)
            good = out._grad_fn
            out._grad_fn = lambda g: tuple(2.0 * p if p is not None else None for p in good(g))
            return out

        x = t4(np.linspace(-1, 1, 8, dtype=np.float32).reshape(1, 1, 2, 4))
        res = dc.grad_check(broken, [x], name="broken")
        assert not res.passed

    def test_registry_covers_all_ops_and_passes(self):
        res = dc.run_registry(seeds=(0, 1))
        assert all(r.passed for r in res), [r.summary() for r in res if not r.passed]
        names = {r.name.split("[")[0] for r in res}
        for op in (
            "conv2d",
            "conv_transpose2d",
            "batch_norm_train",
            "leaky_relu",
            "tanh",
            "add",
            "sub",
            "mul",
            "mean_abs",
            "mean_sq",
            "concat_channels",
        ):
            assert op in names
