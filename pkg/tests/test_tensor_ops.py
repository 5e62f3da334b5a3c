"""Forward semantics of the tensor operator set, pinned against the
naive oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from segstack import (IGNORE_LABEL, ConvParams, ShapeError, StaleTapeError,
                      Tensor, backward, conv2d, cross_entropy_loss, maxpool2,
                      relu, softmax_channels, sum_all, unpool2)
from segstack.convkernels import conv2d_forward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_conv(w, b=None, pad=(0, 0), stride=1):
    wt = Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
    bt = None if b is None else Tensor(np.asarray(b, dtype=np.float64),
                                       requires_grad=True)
    return ConvParams(wt, bt, pad, stride)


class TestConv2d:
    def test_all_ones_sums_to_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        params = make_conv(np.ones((1, 1, 3, 3)), b=np.zeros(1))
        out = conv2d(x, params)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_identity_kernel_same_padding(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 6, 6)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, make_conv(w, pad=(1, 1)))
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=0)

    def test_matches_naive_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 5, 5))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), make_conv(w, b))
        expect = oracles.naive_conv2d(x, w, b)
        np.testing.assert_allclose(out.data, expect, rtol=1e-6)

    @pytest.mark.parametrize("route", ["direct", "im2col"])
    def test_both_routes_match_oracle(self, rng, route):
        for _ in range(10):
            n, c, oc = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
            k = int(rng.choice([1, 3, 5]))
            h = int(rng.integers(k, 13))
            w = int(rng.integers(k, 13))
            stride = int(rng.choice([1, 2]))
            pad = int(rng.integers(0, 3))
            x = rng.standard_normal((n, c, h, w))
            wt = rng.standard_normal((oc, c, k, k))
            got = conv2d_forward(x, wt, None, (pad, pad), stride, route=route)
            expect = oracles.naive_conv2d(x, wt, None, (pad, pad), stride)
            np.testing.assert_allclose(got, expect, rtol=1e-6, atol=1e-9)

    def test_output_shape_formula(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 11, 9)))
        params = make_conv(rng.standard_normal((3, 2, 3, 3)), pad=(1, 1), stride=2)
        out = conv2d(x, params)
        assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_names_axis(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        params = make_conv(rng.standard_normal((2, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channel"):
            conv2d(x, params)

    def test_kernel_larger_than_padded_input(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        params = make_conv(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="height"):
            conv2d(x, params)


class TestMaxPoolUnpool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out, mask = maxpool2(x)
        assert out.item() == 4.0
        assert mask.indices[0, 0, 0, 0] == 3  # bottom-right slot

    def test_tie_break_first_slot(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0))
        out, mask = maxpool2(x)
        assert out.item() == 7.0
        assert mask.indices[0, 0, 0, 0] == 0

    def test_matches_window_scan(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        out, mask = maxpool2(Tensor(x))
        expect_v, expect_i = oracles.scan_maxpool2(x)
        np.testing.assert_array_equal(out.data, expect_v)
        np.testing.assert_array_equal(mask.indices, expect_i)

    def test_odd_extent_rejected(self, rng):
        with pytest.raises(ShapeError, match="odd"):
            maxpool2(Tensor(rng.standard_normal((1, 1, 5, 4))))

    def test_round_trip_places_maxima(self, rng):
        # distinct per-window values via a shuffled value grid
        vals = (rng.permutation(64) + 1.0).reshape(1, 1, 8, 8)
        x = Tensor(vals)
        pooled, mask = maxpool2(x)
        restored = unpool2(pooled, mask)
        expect = oracles.scatter_unpool2(*oracles.scan_maxpool2(vals))
        np.testing.assert_array_equal(restored.data, expect)
        # every window max survives, everything else is zeroed
        nz = restored.data != 0
        assert nz.sum() == 16
        np.testing.assert_array_equal(np.sort(restored.data[nz]),
                                      np.sort(pooled.data.reshape(-1)))

    def test_unpool_zero_input(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        mask_src, mask = maxpool2(Tensor(np.arange(16.0).reshape(1, 1, 4, 4)))
        out = unpool2(x, mask)
        assert not out.data.any()

    def test_unpool_mass_conservation(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        idx = rng.integers(0, 4, size=(2, 3, 4, 4)).astype(np.uint8)
        from segstack.nnops import PoolMask
        out = unpool2(Tensor(x), PoolMask(x.shape, idx))
        expect = oracles.scatter_unpool2(x, idx)
        np.testing.assert_array_equal(out.data, expect)
        assert out.data.sum() == pytest.approx(x.sum(), rel=1e-12)

    def test_unpool_shape_mismatch(self, rng):
        from segstack.nnops import PoolMask
        idx = np.zeros((1, 1, 2, 2), dtype=np.uint8)
        with pytest.raises(ShapeError, match="mask"):
            unpool2(Tensor(np.zeros((1, 1, 3, 2))), PoolMask((1, 1, 2, 2), idx))


class TestSoftmax:
    def test_uniform_logits(self):
        x = Tensor(np.zeros((1, 5, 2, 2)))
        p = softmax_channels(x)
        np.testing.assert_allclose(p.data, 0.2, rtol=1e-7)

    def test_shift_invariance(self, rng):
        z = rng.standard_normal((2, 4, 3, 3))
        a = softmax_channels(Tensor(z)).data
        b = softmax_channels(Tensor(z + 123.5)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-7)

    def test_matches_direct_oracle(self, rng):
        z = rng.standard_normal((2, 6, 4, 4))
        p = softmax_channels(Tensor(z)).data
        np.testing.assert_allclose(p, oracles.softmax_direct(z), rtol=1e-7)

    @given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, k, seed):
        z = np.random.default_rng(seed).standard_normal((1, k, 3, 3)) * 10
        p = softmax_channels(Tensor(z)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_confident_correct_logits(self, rng):
        labels = rng.integers(0, 4, size=(1, 4, 4))
        z = np.zeros((1, 4, 4, 4))
        for i in range(4):
            for j in range(4):
                z[0, labels[0, i, j], i, j] = 50.0  # +50 margin on true class
        loss = cross_entropy_loss(Tensor(z), labels)
        assert loss.item() < 1e-6

    def test_uniform_logits_give_log_k(self):
        k = 7
        z = Tensor(np.zeros((2, k, 3, 3)))
        labels = np.zeros((2, 3, 3), dtype=np.int64)
        loss = cross_entropy_loss(z, labels)
        assert loss.item() == pytest.approx(np.log(k), rel=1e-9)

    def test_matches_per_pixel_oracle(self, rng):
        z = rng.standard_normal((2, 5, 4, 4))
        labels = rng.integers(0, 5, size=(2, 4, 4))
        labels[0, 0, :2] = IGNORE_LABEL
        loss = cross_entropy_loss(Tensor(z), labels)
        expect = oracles.cross_entropy_direct(z, labels)
        assert loss.item() == pytest.approx(expect, rel=1e-6)

    def test_invalid_label_reports_pixel(self, rng):
        z = Tensor(rng.standard_normal((1, 3, 2, 2)))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        labels[0, 1, 0] = 9
        with pytest.raises(ShapeError, match=r"label 9.*y=1, x=0"):
            cross_entropy_loss(z, labels)

    def test_ignored_pixels_excluded_from_normalizer(self, rng):
        z = rng.standard_normal((1, 3, 2, 2))
        labels = np.full((1, 2, 2), IGNORE_LABEL, dtype=np.int64)
        labels[0, 0, 0] = 1
        loss = cross_entropy_loss(Tensor(z), labels)
        p = oracles.softmax_direct(z)
        assert loss.item() == pytest.approx(-np.log(p[0, 1, 0, 0]), rel=1e-6)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_detached_tensor_receives_no_grad(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=False)
        y = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        from segstack import add
        backward(sum_all(add(x, y)))
        assert x.grad is None
        assert y.grad is not None

    def test_backward_twice_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        loss = sum_all(x)
        backward(loss)
        with pytest.raises(StaleTapeError):
            backward(loss)

    def test_backward_needs_scalar(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(relu(x))

    def test_relu_gradient_zero_on_negatives(self):
        x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
        backward(sum_all(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0, 1.0, 1.0])

    def test_forward_backward_stay_finite(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32),
                   requires_grad=True)
        params = ConvParams(
            Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.5,
                   requires_grad=True),
            Tensor(np.zeros(4, dtype=np.float32), requires_grad=True),
            (1, 1))
        out = relu(conv2d(x, params))
        labels = rng.integers(0, 4, size=(2, 8, 8))
        loss = cross_entropy_loss(out, labels)
        backward(loss)
        assert np.isfinite(out.data).all()
        assert np.isfinite(loss.data).all()
        assert np.isfinite(x.grad).all()
        assert np.isfinite(params.weight.grad).all()


class TestConvOracleProperty:
    def test_random_shapes_up_to_16(self, rng):
        # shapes up to 2x4x16x16 with random kernels, both routes
        for case in range(40):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 5))
            oc = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3, 5, 7]))
            h = int(rng.integers(k, 17))
            w = int(rng.integers(k, 17))
            x = rng.standard_normal((n, c, h, w))
            wt = rng.standard_normal((oc, c, k, k))
            b = rng.standard_normal(oc)
            got = conv2d(Tensor(x), make_conv(wt, b)).data
            expect = oracles.naive_conv2d(x, wt, b)
            np.testing.assert_allclose(got, expect, rtol=1e-6, atol=1e-9)
