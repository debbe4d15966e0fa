"""Pixel shuffle, fusion blocks, decoder shape chain, and the head."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformscan import tensor as T
from deformscan.backbone import FeaturePyramid
from deformscan.dmf_decoder import (
    Decoder,
    DecoderConfig,
    DMFBlock,
    SegHead,
    pixel_shuffle,
    pixel_unshuffle,
)
from deformscan.tensor import Tensor, grad_check

MICRO = dict(channels=(8, 16, 32, 64), num_classes=6, d_state=8)


def micro_cfg(**overrides):
    kw = dict(MICRO)
    kw.update(overrides)
    return DecoderConfig(**kw)


def make_pyramid(rng, channels, h, w, dtype=np.float32):
    feats = []
    for lvl, c in enumerate(channels):
        s = 4 * (2**lvl)
        feats.append(Tensor(rng.normal(size=(1, c, h // s, w // s)).astype(dtype)))
    return FeaturePyramid(*feats)


class TestPixelShuffle:
    def test_shape_contract(self):
        x = Tensor(np.zeros((2, 16, 3, 5)))
        assert pixel_shuffle(x).shape == (2, 4, 6, 10)

    def test_index_formula(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = pixel_shuffle(x)
        np.testing.assert_array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_index_formula_general(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 8, 2, 3))
        out = pixel_shuffle(Tensor(x)).data
        for c in range(2):
            for i in range(2):
                for j in range(3):
                    for di in range(2):
                        for dj in range(2):
                            assert out[0, c, 2 * i + di, 2 * j + dj] == x[0, 4 * c + 2 * di + dj, i, j]

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 12, 4, 6)))
        np.testing.assert_array_equal(pixel_unshuffle(pixel_shuffle(x)).data, x.data)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_bijection_preserves_multiset(self, b, c4, h, w):
        rng = np.random.default_rng(b * 1000 + c4 * 100 + h * 10 + w)
        x = rng.normal(size=(b, 4 * c4, h, w))
        out = pixel_shuffle(Tensor(x)).data
        np.testing.assert_array_equal(np.sort(out.reshape(-1)), np.sort(x.reshape(-1)))

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ValueError):
            pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))))


class TestDMFBlock:
    def test_stage1_shapes_full_schedule(self):
        rng = np.random.default_rng(2)
        cfg = DecoderConfig(channels=(96, 192, 384, 768))
        block = DMFBlock(768, 384, cfg, last=False, rng=rng)
        e4 = Tensor(rng.normal(size=(1, 768, 8, 8)).astype(np.float32))
        out = block(e4, e4)
        assert out.shape == (1, 384, 16, 16)

    def test_final_stage_keeps_resolution(self):
        rng = np.random.default_rng(3)
        cfg = micro_cfg()
        block = DMFBlock(8, 8, cfg, last=True, rng=rng)
        x = Tensor(rng.normal(size=(1, 8, 16, 16)).astype(np.float32))
        out = block(x, x)
        assert out.shape == (1, 8, 16, 16)

    def test_deformable_off_same_shapes(self):
        rng = np.random.default_rng(4)
        cfg = micro_cfg(deformable=False)
        block = DMFBlock(16, 8, cfg, last=False, rng=rng)
        x = Tensor(rng.normal(size=(1, 16, 4, 4)).astype(np.float32))
        assert block(x, x).shape == (1, 8, 8, 8)

    @pytest.mark.parametrize("kind", ["bilinear", "bicubic"])
    def test_interp_upsample_variants(self, kind):
        rng = np.random.default_rng(5)
        cfg = micro_cfg(upsample=kind)
        block = DMFBlock(16, 8, cfg, last=False, rng=rng)
        x = Tensor(rng.normal(size=(1, 16, 4, 4)).astype(np.float32))
        assert block(x, x).shape == (1, 8, 8, 8)

    def test_mismatched_inputs_rejected(self):
        rng = np.random.default_rng(6)
        block = DMFBlock(8, 8, micro_cfg(), last=True, rng=rng)
        a = Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32))
        b = Tensor(np.zeros((1, 8, 4, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            block(a, b)


class TestDecoder:
    def test_shape_chain_default_schedule(self):
        rng = np.random.default_rng(7)
        cfg = DecoderConfig(channels=(96, 192, 384, 768))
        dec = Decoder(cfg, rng=rng)
        pyr = make_pyramid(rng, cfg.channels, 256, 256)
        out = dec(pyr)
        assert out.shape == (1, 96, 64, 64)

    def test_resnet_style_schedule_consistent(self):
        rng = np.random.default_rng(8)
        cfg = DecoderConfig(channels=(64, 128, 256, 512))
        dec = Decoder(cfg, rng=rng)
        pyr = make_pyramid(rng, cfg.channels, 64, 64)
        out = dec(pyr)
        assert out.shape == (1, 64, 16, 16)

    @pytest.mark.parametrize("hw", [32, 64, 128])
    def test_shape_chain_exhaustive_micro(self, hw):
        rng = np.random.default_rng(hw)
        cfg = micro_cfg()
        dec = Decoder(cfg, rng=rng)
        pyr = make_pyramid(rng, cfg.channels, hw, hw)
        out = dec(pyr)
        assert out.shape == (1, 8, hw // 4, hw // 4)
        state = dec._last_state
        assert state.stages[0] is pyr.e4

    def test_degenerate_paths_stay_finite(self):
        rng = np.random.default_rng(9)
        cfg = micro_cfg(deformable=False)
        dec = Decoder(cfg, rng=rng)
        # zero every scan gate input projection half so the gate closes
        for block in dec.blocks:
            w = block.scan_block.in_proj.weight.data
            w[block.scan_block.d_inner :] = 0.0
        pyr = make_pyramid(rng, cfg.channels, 32, 32)
        out = dec(pyr)
        assert np.all(np.isfinite(out.data))

    def test_wrong_arity_rejected(self):
        rng = np.random.default_rng(10)
        dec = Decoder(micro_cfg(), rng=rng)
        with pytest.raises(ValueError):
            dec([Tensor(np.zeros((1, 8, 8, 8)))] * 3)

    def test_gradcheck_micro_decoder(self):
        from conftest import nudge_offsets

        rng = np.random.default_rng(11)
        cfg = DecoderConfig(channels=(8, 16, 32, 64), num_classes=6, d_state=2, fusion_depth=1)
        dec = Decoder(cfg, rng=rng, dtype=np.float64)
        nudge_offsets(dec, rng)
        pyr = make_pyramid(rng, cfg.channels, 32, 32, dtype=np.float64)
        feats = list(pyr.as_tuple())
        for f in feats:
            f.requires_grad = True
        params = dec.parameters()

        def fn(*args):
            out = dec(FeaturePyramid(*args[:4]))
            return (out * T.sigmoid(out * 0.5)).sum()

        err = grad_check(fn, feats + params, max_coords_per_input=4)
        assert err < 1e-4


class TestSegHead:
    def test_output_shape(self):
        rng = np.random.default_rng(12)
        head = SegHead(8, 6, rng=rng)
        feats = Tensor(rng.normal(size=(2, 8, 16, 32)).astype(np.float32))
        logits = head(feats)
        assert logits.shape == (2, 6, 64, 128)

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(13)
        head = SegHead(4, 5, rng=rng)
        logits = head(Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            SegHead(8, 1, rng=np.random.default_rng(14))
