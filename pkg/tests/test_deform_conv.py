"""Bilinear sampling, deformable convolution, and its degeneracies."""

import numpy as np
import pytest

from deformscan import deform_conv as D
from deformscan import tensor as T
from deformscan.deform_conv import DeformConv2d, bilinear_sample, dcn_apply
from deformscan.tensor import Tensor, grad_check


def dcn_loops(x, w, b, offsets, modulation):
    """Per-pixel loop oracle calling bilinear_sample for every tap."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((bsz, cout, h, wd), dtype=np.float64)
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for k in range(9):
                    dy, dx = D.BASE_OFFSETS[k]
                    sy = i + dy + offsets[n, 2 * k, i, j]
                    sx = j + dx + offsets[n, 2 * k + 1, i, j]
                    val = bilinear_sample(x[n], sx, sy) * modulation[n, k, i, j]
                    kh, kw = int(dy + 1), int(dx + 1)
                    for o in range(cout):
                        out[n, o, i, j] += np.dot(w[o, :, kh, kw], val)
    return out + b[None, :, None, None]


class TestBilinearSample:
    def test_integer_location(self):
        feat = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(bilinear_sample(feat, 1.0, 0.0), [2.0])

    def test_center_average(self):
        feat = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(bilinear_sample(feat, 0.5, 0.5), [2.5])

    def test_far_outside_is_zero(self):
        feat = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(bilinear_sample(feat, -5.0, -5.0), [0.0])

    def test_edge_partial_coverage(self):
        feat = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        # halfway off the top edge: only the bottom pair contributes
        np.testing.assert_allclose(bilinear_sample(feat, 0.0, -0.5), [0.5])


class TestDcnForward:
    def test_zero_offsets_unit_modulation_equals_conv(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            x = Tensor(rng.normal(size=(1, cin, h, w)))
            wt = Tensor(rng.normal(size=(cout, cin, 3, 3)))
            bias = Tensor(rng.normal(size=cout))
            offs = Tensor(np.zeros((1, 18, h, w)))
            mods = Tensor(np.ones((1, 9, h, w)))
            out = dcn_apply(x, wt, bias, offs, mods)
            ref = T.conv2d(x, wt, bias, padding=1)
            assert np.max(np.abs(out.data - ref.data)) < 1e-6

    def test_zero_modulation_gives_bias(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)))
        wt = Tensor(rng.normal(size=(2, 3, 3, 3)))
        bias = Tensor(np.array([0.5, -1.5]))
        offs = Tensor(rng.normal(size=(2, 18, 4, 5)))
        mods = Tensor(np.zeros((2, 9, 4, 5)))
        out = dcn_apply(x, wt, bias, offs, mods)
        np.testing.assert_allclose(out.data, np.broadcast_to(bias.data[None, :, None, None], out.shape), atol=1e-7)

    def test_random_offsets_match_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 5, 6))
        wt = rng.normal(size=(2, 3, 3, 3))
        bias = rng.normal(size=2)
        offs = rng.normal(scale=1.5, size=(2, 18, 5, 6))
        mods = rng.uniform(0.1, 0.9, size=(2, 9, 5, 6))
        out = dcn_apply(Tensor(x), Tensor(wt), Tensor(bias), Tensor(offs), Tensor(mods))
        expected = dcn_loops(x, wt, bias, offs, mods)
        assert np.max(np.abs(out.data - expected)) < 1e-6

    def test_channel_count_validation(self):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        wt = Tensor(np.zeros((1, 2, 3, 3)))
        with pytest.raises(ValueError):
            dcn_apply(x, wt, None, Tensor(np.zeros((1, 17, 3, 3))), Tensor(np.zeros((1, 9, 3, 3))))
        with pytest.raises(ValueError):
            dcn_apply(x, Tensor(np.zeros((1, 3, 3, 3))), None,
                      Tensor(np.zeros((1, 18, 3, 3))), Tensor(np.zeros((1, 9, 3, 3))))

    def test_piecewise_linear_in_single_offset(self):
        # within one unit cell the output is linear in any one offset coordinate
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        wt = Tensor(rng.normal(size=(1, 2, 3, 3)))
        bias = Tensor(np.zeros(1))
        mods = Tensor(np.ones((1, 9, 4, 4)))

        def out_at(off_val):
            offs = np.zeros((1, 18, 4, 4))
            offs[0, 6] = off_val  # tap k=3, y coordinate
            return dcn_apply(x, wt, bias, Tensor(offs), mods).data[0, 0, 2, 2]

        f0, fm, f1 = out_at(0.1), out_at(0.3), out_at(0.5)
        assert abs(fm - 0.5 * (f0 + f1)) < 1e-8


class TestPredictOffsets:
    def test_fresh_block_predicts_identity(self):
        rng = np.random.default_rng(4)
        block = DeformConv2d(3, 4, rng=rng)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        offs, mods = block.predict_offsets(x)
        np.testing.assert_array_equal(offs.data, 0.0)
        np.testing.assert_allclose(mods.data, 0.5)

    def test_offset_channel_count(self):
        block = DeformConv2d(2, 2, rng=np.random.default_rng(5))
        assert block.predictor.out_ch == 27  # 3K for K = 9

    def test_fresh_block_is_half_conv(self):
        rng = np.random.default_rng(6)
        block = DeformConv2d(2, 3, rng=rng)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
        ref = T.conv2d(x, block.weight * 0.5, block.bias, padding=1)
        np.testing.assert_allclose(block(x).data, ref.data, atol=1e-6)

    def test_gradients_reach_predictor(self):
        rng = np.random.default_rng(7)
        block = DeformConv2d(2, 2, rng=rng, dtype=np.float64)
        # move predictor off the zero init so offsets are in general position
        block.predictor.weight.data += rng.normal(scale=0.05, size=block.predictor.weight.shape)
        block.predictor.bias.data += rng.normal(scale=0.2, size=block.predictor.bias.shape)
        x = Tensor(rng.normal(size=(1, 2, 3, 4)), dtype=np.float64, requires_grad=True)
        params = block.parameters()

        def fn(x, *ps):
            out = block(x)
            return (out * T.sigmoid(out)).sum()

        err = grad_check(fn, [x] + params, max_coords_per_input=20)
        assert err < 1e-4

    def test_raw_modulation_flag(self):
        rng = np.random.default_rng(8)
        block = DeformConv2d(2, 2, sigmoid_modulation=False, rng=rng)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)).astype(np.float32))
        _, mods = block.predict_offsets(x)
        np.testing.assert_array_equal(mods.data, 0.0)  # zero-init raw scalars
