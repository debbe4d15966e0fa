"""Encoder pyramid contract for both backbone kinds."""

import numpy as np
import pytest

from deformscan.backbone import Encoder, Stem, stem
from deformscan.dmf_decoder import Decoder, DecoderConfig
from deformscan.tensor import Tensor

MICRO = (8, 16, 32, 64)


class TestStem:
    def test_quarter_resolution(self):
        rng = np.random.default_rng(0)
        s = Stem(8, rng=rng)
        out = stem(Tensor(rng.normal(size=(1, 3, 256, 256)).astype(np.float32)), s)
        assert out.shape == (1, 8, 64, 64)

    def test_rectangular(self):
        rng = np.random.default_rng(1)
        s = Stem(8, rng=rng)
        out = stem(Tensor(rng.normal(size=(1, 3, 64, 128)).astype(np.float32)), s)
        assert out.shape == (1, 8, 16, 32)

    def test_constant_image_gives_constant_map(self):
        rng = np.random.default_rng(2)
        s = Stem(4, rng=rng)
        out = stem(Tensor(np.full((1, 3, 64, 64), 0.37, dtype=np.float32)), s)
        interior = out.data[:, :, 2:-2, 2:-2]
        spread = interior.max(axis=(2, 3)) - interior.min(axis=(2, 3))
        assert np.all(spread < 1e-5)

    def test_indivisible_input_rejected(self):
        s = Stem(4, rng=np.random.default_rng(3))
        with pytest.raises(ValueError):
            stem(Tensor(np.zeros((1, 3, 50, 64), dtype=np.float32)), s)


class TestEncoder:
    @pytest.mark.parametrize("kind", ["conv", "ss2d"])
    def test_pyramid_resolutions(self, kind):
        rng = np.random.default_rng(4)
        enc = Encoder(channels=MICRO, depths=(1, 1, 1, 1), kind=kind, d_state=4, rng=rng)
        pyr = enc(Tensor(rng.normal(size=(1, 3, 64, 128)).astype(np.float32)))
        shapes = [f.shape for f in pyr.as_tuple()]
        assert shapes == [(1, 8, 16, 32), (1, 16, 8, 16), (1, 32, 4, 8), (1, 64, 2, 4)]

    def test_both_kinds_same_shapes(self):
        rng = np.random.default_rng(5)
        a = Encoder(channels=MICRO, depths=(1, 1, 2, 1), kind="conv", rng=np.random.default_rng(0))
        b = Encoder(channels=MICRO, depths=(1, 1, 2, 1), kind="ss2d", d_state=4, rng=np.random.default_rng(0))
        x = Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32))
        sa = [f.shape for f in a(x).as_tuple()]
        sb = [f.shape for f in b(x).as_tuple()]
        assert sa == sb

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            Encoder(kind="transformer", rng=np.random.default_rng(6))

    @pytest.mark.parametrize("kind", ["conv", "ss2d"])
    def test_decoder_accepts_both_kinds(self, kind):
        rng = np.random.default_rng(7)
        enc = Encoder(channels=MICRO, depths=(1, 1, 1, 1), kind=kind, d_state=4, rng=rng)
        dec = Decoder(DecoderConfig(channels=MICRO, num_classes=6, d_state=4), rng=rng)
        x = Tensor(rng.normal(size=(1, 3, 32, 64)).astype(np.float32))
        out = dec(enc(x))
        assert out.shape == (1, 8, 8, 16)
        assert np.all(np.isfinite(out.data))

    def test_full_schedule_channels(self):
        rng = np.random.default_rng(8)
        enc = Encoder(channels=(96, 192, 384, 768), depths=(1, 1, 1, 1), rng=rng)
        assert enc.channels == (96, 192, 384, 768)
        pyr = enc(Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32)))
        assert [f.shape[1] for f in pyr.as_tuple()] == [96, 192, 384, 768]
