"""Parameter tallies, FLOP formulas, scaling laws, and the efficiency report."""

import numpy as np
import pytest

from deformscan import cost_model as C
from deformscan.backbone import Encoder
from deformscan.dmf_decoder import Decoder, DecoderConfig, SegHead
from deformscan.nn import Conv2d, Linear, count_tensor_params


class TestCountParams:
    def test_conv_hand_count(self):
        conv = Conv2d(16, 32, 3, bias=True, rng=np.random.default_rng(0))
        assert C.count_params(conv) == 3 * 3 * 16 * 32 + 32 == 4640

    def test_linear_hand_count(self):
        lin = Linear(768, 13, rng=np.random.default_rng(1))
        assert C.count_params(lin) == 768 * 13 + 13 == 9997

    def test_matches_brute_force_walk(self):
        dec = Decoder(DecoderConfig(channels=(8, 16, 32, 64), num_classes=6, d_state=4),
                      rng=np.random.default_rng(2))
        assert C.count_params(dec) == count_tensor_params(dec)

    def test_analytic_formula_matches_walk(self):
        for kwargs in (
            dict(channels=(8, 16, 32, 64), num_classes=6, d_state=4),
            dict(channels=(96, 192, 384, 768), num_classes=13),
            dict(channels=(8, 16, 32, 64), num_classes=6, deformable=False),
            dict(channels=(8, 16, 32, 64), num_classes=6, upsample="bilinear"),
        ):
            cfg = DecoderConfig(**kwargs)
            dec = Decoder(cfg, rng=np.random.default_rng(3))
            assert C.analytic_decoder_params(cfg) == C.count_params(dec), kwargs

    def test_head_analytic_count(self):
        head = SegHead(96, 13, rng=np.random.default_rng(4))
        assert C.count_params(head) == C.analytic_head_params(96, 13)


class TestCountFlops:
    def test_pointwise_conv_hand_count(self):
        conv = Conv2d(8, 8, 1, rng=np.random.default_rng(5))
        assert C.conv_flops(conv, 4, 4) == 8 * 8 * 16 == 1024

    def test_conv_only_graph_scales_4x(self):
        enc = Encoder(channels=(8, 16, 32, 64), depths=(1, 1, 1, 1), rng=np.random.default_rng(6))
        assert C.encoder_flops(enc, 128, 128) == 4 * C.encoder_flops(enc, 64, 64)

    def test_decoder_flops_scale_4x(self):
        cfg = DecoderConfig(channels=(8, 16, 32, 64), num_classes=6, d_state=4)
        dec = Decoder(cfg, rng=np.random.default_rng(7))
        small = sum(r.flops for r in C.decoder_flops(dec, 64, 64))
        big = sum(r.flops for r in C.decoder_flops(dec, 128, 128))
        assert big == 4 * small

    def test_params_independent_of_resolution(self):
        cfg = DecoderConfig(channels=(8, 16, 32, 64), num_classes=6, d_state=4)
        a = C.decoder_cost_report(cfg, resolution=64)
        b = C.decoder_cost_report(cfg, resolution=128)
        assert a.total_params == b.total_params
        assert a.total_flops != b.total_flops

    def test_deformable_off_strictly_cheaper(self):
        base = dict(channels=(8, 16, 32, 64), num_classes=6, d_state=4)
        on = C.decoder_cost_report(DecoderConfig(**base), resolution=64)
        off = C.decoder_cost_report(DecoderConfig(**base, deformable=False), resolution=64)
        assert off.total_params < on.total_params
        assert off.total_flops < on.total_flops

    def test_resolution_must_divide_32(self):
        dec = Decoder(DecoderConfig(channels=(8, 16, 32, 64), num_classes=6), rng=np.random.default_rng(8))
        with pytest.raises(ValueError):
            C.decoder_flops(dec, 100, 100)


class TestTargets:
    def test_params_within_10pct_of_both_schedules(self):
        for schedule in ((96, 192, 384, 768), (256, 512, 1024, 2048)):
            rep = C.decoder_cost_report(DecoderConfig(channels=schedule, num_classes=13))
            assert abs(rep.deltas()["params"]) < 0.10, schedule

    def test_reduction_recomputation_finds_headlines(self):
        recs = C.recompute_reductions()
        matched = {r["metric"] for r in recs if r["matches_headline"]}
        assert matched == {"params", "flops"}
        # the advertised 97% FLOP drop comes from the UperHead comparison
        flops_match = [r for r in recs if r["matches_headline"] and r["metric"] == "flops"]
        assert any(r["head"] == "uperhead" for r in flops_match)

    def test_report_renders(self):
        cfg = DecoderConfig(channels=(96, 192, 384, 768), num_classes=13)
        text = C.efficiency_report(cfg)
        assert "total" in text and "delta" in text and "reproduces headline" in text
        kv = C.decoder_cost_report(cfg).render_kv()
        assert "params.total=" in kv and "flops.total=" in kv
