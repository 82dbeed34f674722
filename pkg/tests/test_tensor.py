"""Primitive-level checks for the autodiff engine.

Derived expectations come from central finite differences or from direct
recomputation with plain numpy, never from the engine's own backward pass.
"""

import numpy as np
import pytest

from ebranchformer.gradcheck import check_gradients, finite_difference_grad, relative_error
from ebranchformer import tensor as T
from ebranchformer.tensor import (
    ConfigError,
    MaskError,
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    no_grad,
)


def rand_param(rng, *shape):
    return Parameter(rng.normal(size=shape))


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = Rng(0)
        a = rand_param(rng, 4, 5)
        b = rand_param(rng, 5, 3)
        errs = check_gradients(lambda: T.matmul(a, b).sum(), {"a": a, "b": b})
        assert max(errs.values()) <= 1e-6

    def test_batched_broadcast_gradient(self):
        rng = Rng(1)
        a = rand_param(rng, 2, 3, 4, 5)
        b = rand_param(rng, 5, 3)
        errs = check_gradients(lambda: T.matmul(a, b).sum(), {"a": a, "b": b})
        assert max(errs.values()) <= 1e-6


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        x = Tensor([[5.0, 5.0, 5.0, 5.0]])
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-12)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_already_normalized(self):
        x = Tensor([[1.0, -1.0]])
        out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_row_statistics_recomputed(self):
        rng = Rng(2)
        x = rng.normal(size=(3, 8))
        gain = rng.normal(size=8)
        bias = rng.normal(size=8)
        out = T.layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps=0.0).data
        # direct recomputation, row by row
        for r in range(3):
            xh = (x[r] - x[r].mean()) / x[r].std()
            np.testing.assert_allclose(out[r], xh * gain + bias, atol=1e-10)

    def test_gradients(self):
        rng = Rng(3)
        x = rand_param(rng, 3, 6)
        gain = rand_param(rng, 6)
        bias = rand_param(rng, 6)
        weights = Tensor(rng.normal(size=(3, 6)))
        errs = check_gradients(
            lambda: (T.layer_norm(x, gain, bias) * weights).sum(),
            {"x": x, "gain": gain, "bias": bias},
        )
        assert max(errs.values()) <= 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)
        assert np.isfinite(out.data).all()

    def test_masked_entries_exact_zero_and_rows_sum_to_one(self):
        rng = Rng(4)
        x = Tensor(rng.normal(size=(3, 5)))
        mask = np.array([[True, True, False, True, False]] * 3)
        out = T.softmax(x, mask=mask).data
        assert (out[~mask] == 0.0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_row_raises(self):
        with pytest.raises(MaskError):
            T.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True, True, True], [False, False, False]]))

    def test_gradient(self):
        rng = Rng(5)
        x = rand_param(rng, 7)
        weights = Tensor(rng.normal(size=7))
        errs = check_gradients(lambda: (T.softmax(x) * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6

    def test_masked_gradient(self):
        rng = Rng(6)
        x = rand_param(rng, 2, 6)
        mask = np.array([[True] * 6, [True, False, True, True, False, True]])
        weights = Tensor(rng.normal(size=(2, 6)))
        errs = check_gradients(lambda: (T.softmax(x, mask=mask) * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6


class TestActivations:
    def test_fixed_points(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        assert T.swish(Tensor([0.0])).data[0] == 0.0
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert T.relu(Tensor([-3.0])).data[0] == 0.0

    def test_swish_is_x_times_sigmoid(self):
        grid = np.linspace(-6, 6, 41)
        np.testing.assert_allclose(
            T.swish(Tensor(grid)).data, grid * T.sigmoid(Tensor(grid)).data, atol=1e-15
        )

    def test_gelu_exact_erf_form(self):
        from scipy.special import erf

        grid = np.linspace(-4, 4, 17)
        expected = grid * 0.5 * (1 + erf(grid / np.sqrt(2)))
        np.testing.assert_allclose(T.gelu(Tensor(grid)).data, expected, atol=1e-15)

    @pytest.mark.parametrize("op", [T.gelu, T.swish, T.sigmoid, T.relu])
    def test_gradients_on_random_points(self, op):
        rng = Rng(7)
        x = rand_param(rng, 100)
        weights = Tensor(rng.normal(size=100))
        errs = check_gradients(lambda: (op(x) * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6


class TestDepthwiseConv1d:
    def test_identity_kernel(self):
        rng = Rng(8)
        x = Tensor(rng.normal(size=(6, 3)))
        k = np.zeros((3, 5))
        k[:, 2] = 1.0  # centered delta per channel
        out = T.depthwise_conv1d(x, Tensor(k), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_boundary_arithmetic(self):
        x = Tensor(np.ones((5, 1)))
        out = T.depthwise_conv1d(x, Tensor([[1.0, 1.0, 1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data[:, 0], [2.0, 3.0, 3.0, 3.0, 2.0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.depthwise_conv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))

    def test_channel_permutation_equivariance(self):
        rng = Rng(9)
        x = rng.normal(size=(7, 4))
        k = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        perm = np.array([2, 0, 3, 1])
        out = T.depthwise_conv1d(Tensor(x), Tensor(k), Tensor(b)).data
        out_p = T.depthwise_conv1d(Tensor(x[:, perm]), Tensor(k[perm]), Tensor(b[perm])).data
        np.testing.assert_array_equal(out_p, out[:, perm])

    def test_gradients(self):
        rng = Rng(10)
        x = rand_param(rng, 7, 3)
        k = rand_param(rng, 3, 5)
        b = rand_param(rng, 3)
        weights = Tensor(rng.normal(size=(7, 3)))
        errs = check_gradients(
            lambda: (T.depthwise_conv1d(x, k, b) * weights).sum(), {"x": x, "k": k, "b": b}
        )
        assert max(errs.values()) <= 1e-6

    def test_batched_matches_per_sequence(self):
        rng = Rng(11)
        x = rng.normal(size=(2, 6, 3))
        k = Tensor(rng.normal(size=(3, 5)))
        b = Tensor(rng.normal(size=3))
        batched = T.depthwise_conv1d(Tensor(x), k, b).data
        for i in range(2):
            single = T.depthwise_conv1d(Tensor(x[i]), k, b).data
            np.testing.assert_array_equal(batched[i], single)


class TestConv2d:
    def test_output_geometry(self):
        # 80 -> 39 -> 19 under valid stride-2 3x3 convs
        h = 80
        for expected in (39, 19):
            h = (h - 3) // 2 + 1
            assert h == expected
        x = Tensor(np.zeros((1, 80, 80)))
        k = Tensor(np.zeros((4, 1, 3, 3)))
        out = T.conv2d(x, k, Tensor(np.zeros(4)))
        assert out.data.shape == (4, 39, 39)

    def test_delta_kernel_subsamples_odd_indices(self):
        rng = Rng(12)
        x = rng.normal(size=(1, 9, 9))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
        np.testing.assert_array_equal(out[0], x[0][1::2, 1::2])

    def test_too_small_input_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))

    def test_gradients(self):
        rng = Rng(13)
        x = rand_param(rng, 2, 7, 8)
        k = rand_param(rng, 3, 2, 3, 3)
        b = rand_param(rng, 3)
        out_shape = T.conv2d(x, k, b).data.shape
        weights = Tensor(rng.normal(size=out_shape))
        errs = check_gradients(lambda: (T.conv2d(x, k, b) * weights).sum(), {"x": x, "k": k, "b": b})
        assert max(errs.values()) <= 1e-6

    def test_batched_gradients(self):
        rng = Rng(14)
        x = rand_param(rng, 2, 2, 5, 7)
        k = rand_param(rng, 3, 2, 3, 3)
        b = rand_param(rng, 3)
        errs = check_gradients(lambda: T.conv2d(x, k, b).sum(), {"x": x, "k": k, "b": b})
        assert max(errs.values()) <= 1e-6


class TestDropout:
    def test_eval_is_bitwise_identity(self):
        x = Tensor(Rng(15).normal(size=(4, 4)))
        out = T.dropout(x, 0.5, train=False)
        assert out is x

    def test_zero_rate_is_identity(self):
        x = Tensor(Rng(16).normal(size=(4, 4)))
        out = T.dropout(x, 0.0, train=True, rng=Rng(0))
        assert out is x

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            T.dropout(Tensor(np.ones(3)), 1.0, train=True, rng=Rng(0))

    def test_survivor_scaling_mean(self):
        n = 100_000
        out = T.dropout(Tensor(np.ones(n)), 0.5, train=True, rng=Rng(17)).data
        # mean of inverted dropout is 1 with sigma = 1/sqrt(n) per element
        assert abs(out.mean() - 1.0) < 3.0 / np.sqrt(n)

    def test_same_seed_same_mask(self):
        x = Tensor(Rng(18).normal(size=(10, 10)))
        a = T.dropout(x, 0.3, train=True, rng=Rng(5)).data
        b = T.dropout(x, 0.3, train=True, rng=Rng(5)).data
        np.testing.assert_array_equal(a, b)


class TestReduceMeanTime:
    def test_single_valid_row(self):
        x = Tensor(np.array([[1.0, 2.0], [9.0, 9.0]]))
        out = T.reduce_mean_time(x, np.array([True, False]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_hand_arithmetic(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 7.0]]))
        out = T.reduce_mean_time(x, np.array([True, True]))
        np.testing.assert_array_equal(out.data, [2.0, 6.0])

    def test_masked_junk_ignored(self):
        rng = Rng(19)
        valid = rng.normal(size=(4, 3))
        junk = rng.normal(size=(2, 3)) * 1e6
        x = np.concatenate([valid, junk])
        mask = np.array([True] * 4 + [False] * 2)
        out = T.reduce_mean_time(Tensor(x), mask).data
        np.testing.assert_array_equal(out, valid.mean(axis=0))

    def test_empty_mask_raises(self):
        with pytest.raises(MaskError):
            T.reduce_mean_time(Tensor(np.zeros((3, 2))), np.zeros(3, dtype=bool))

    def test_gradient(self):
        rng = Rng(20)
        x = rand_param(rng, 2, 5, 3)
        mask = np.array([[True, True, True, False, False], [True] * 5])
        weights = Tensor(rng.normal(size=(2, 3)))
        errs = check_gradients(lambda: (T.reduce_mean_time(x, mask) * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6


class TestBackward:
    def test_linear_case(self):
        x = np.array([1.0, 2.0, 3.0])
        w = Parameter(np.ones((2, 3)))
        loss = (w * Tensor(x)).sum()
        loss.backward()
        np.testing.assert_array_equal(w.grad, np.broadcast_to(x, (2, 3)))

    def test_reuse_accumulates(self):
        p = Parameter(np.array([2.0]))
        loss = (p * 3.0 + p * 4.0).sum()
        loss.backward()
        np.testing.assert_array_equal(p.grad, [7.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_no_grad_suppresses_graph(self):
        p = Parameter(np.ones(3))
        with no_grad():
            out = (p * 2.0).sum()
        assert not out.requires_grad
        assert out._parents == ()

    def test_composite_chain(self):
        rng = Rng(21)
        a = rand_param(rng, 3, 4)
        b = rand_param(rng, 4, 2)
        c = rand_param(rng, 2)
        weights = Tensor(Rng(121).normal(size=(3, 2)))

        def forward():
            h = T.gelu(T.matmul(a, b) + c)
            return (T.softmax(h, axis=-1) * weights).sum()

        errs = check_gradients(forward, {"a": a, "b": b, "c": c})
        assert max(errs.values()) <= 1e-6


class TestShapeOps:
    def test_getitem_advanced_gradient(self):
        rng = Rng(22)
        x = rand_param(rng, 5, 3)
        idx = np.array([0, 2, 2, 4])
        weights = Tensor(rng.normal(size=(4, 3)))
        errs = check_gradients(lambda: (x[idx] * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6

    def test_concat_pad_slice_gradients(self):
        rng = Rng(23)
        a = rand_param(rng, 2, 3)
        b = rand_param(rng, 2, 4)

        def forward():
            h = T.concat([a, b], axis=-1)
            h = T.pad(h, [(0, 0), (1, 2)])
            return (h[:, 1:4] * Tensor(np.arange(6.0).reshape(2, 3))).sum()

        errs = check_gradients(forward, {"a": a, "b": b})
        assert max(errs.values()) <= 1e-6

    def test_transpose_reshape_roundtrip_gradient(self):
        rng = Rng(24)
        x = rand_param(rng, 2, 3, 4)
        weights = Tensor(rng.normal(size=(4, 6)))
        errs = check_gradients(
            lambda: (x.transpose(2, 0, 1).reshape(4, 6) * weights).sum(), {"x": x}
        )
        assert errs["x"] <= 1e-6


class TestDeterminism:
    def test_rng_replay(self):
        a = Rng(42).normal(size=(100,))
        b = Rng(42).normal(size=(100,))
        np.testing.assert_array_equal(a, b)

    def test_child_streams_differ(self):
        root = Rng(42)
        assert root.child(0).seed != root.child(1).seed

    def test_forward_and_grad_bitwise_replay(self):
        def run():
            rng = Rng(99)
            x = Parameter(rng.normal(size=(4, 4)))
            w = Parameter(rng.normal(size=(4, 4)))
            loss = (T.gelu(T.matmul(x, w))).sum()
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_finite_forward_on_finite_inputs(self):
        rng = Rng(25)
        x = Tensor(rng.normal(size=(5, 8)) * 100)
        ops = [
            T.gelu(x),
            T.swish(x),
            T.sigmoid(x),
            T.relu(x),
            T.softmax(x),
            T.log_softmax(x),
            T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))),
        ]
        for out in ops:
            assert np.isfinite(out.data).all()


class TestLogSoftmax:
    def test_normalization(self):
        rng = Rng(26)
        out = T.log_softmax(Tensor(rng.normal(size=(3, 9)))).data
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient(self):
        rng = Rng(27)
        x = rand_param(rng, 2, 5)
        weights = Tensor(rng.normal(size=(2, 5)))
        errs = check_gradients(lambda: (T.log_softmax(x) * weights).sum(), {"x": x})
        assert errs["x"] <= 1e-6
