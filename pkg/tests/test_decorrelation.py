"""Correlation-unit and filter-unit tests, including the frozen closed-form
anchor values and the statistical dropout checks."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decorrelab.decorrelation import (CorrelationRecord, DecorreConfig, DecorreLayer,
                                      correlation_unit, decorre_backward, decorre_forward,
                                      dropout_keep_prob, filter_factor, filter_sigmoid,
                                      pearson_corr, pearson_corr_columns)
from decorrelab.engine import seeded_rng

from conftest import pearson_oracle


class TestDecorreConfig:
    def test_defaults_valid(self):
        DecorreConfig()

    @pytest.mark.parametrize("kwargs", [
        {"mode": "nope"},
        {"low_factor": 1.5},
        {"threshold": 1.0},
        {"floor": -0.1},
        {"steepness": 0.0},
        {"guarantee": 0.0},
        {"guarantee": 1.5},
        {"eps": 0.0},
    ])
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            DecorreConfig(**kwargs)


class TestPearsonCorr:
    def test_self_correlation(self):
        assert pearson_corr([1, 2, 3], [1, 2, 3]) == 1.0

    def test_sign_flip(self):
        assert pearson_corr([1, 2, 3], [-1, -2, -3]) == -1.0

    def test_known_value(self):
        # direct formula: 6.5 / sqrt(43.75)
        assert pearson_corr([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(
            6.5 / np.sqrt(43.75), abs=1e-12)

    def test_constant_input_returns_zero(self):
        assert pearson_corr([2, 2, 2], [1, 5, 9]) == 0.0
        assert pearson_corr([1, 5, 9], [3, 3, 3]) == 0.0

    def test_too_short_raises(self):
        with pytest.raises(ValueError, match="at least 2"):
            pearson_corr([1.0], [1.0])

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            pearson_corr([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_matches_float64_oracle(self):
        rng = seeded_rng(77)
        for _ in range(200):
            n = int(rng.integers(2, 65))
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            assert pearson_corr(x, y) == pytest.approx(pearson_oracle(x, y), abs=1e-9)

    @given(a=st.floats(0.1, 50), b=st.floats(-20, 20), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_positive_affine(self, a, b, seed):
        rng = seeded_rng(seed)
        x = rng.standard_normal(24)
        y = rng.standard_normal(24)
        base = pearson_corr(x, y)
        assert pearson_corr(a * x + b, y) == pytest.approx(base, abs=1e-7)
        assert pearson_corr(-a * x + b, y) == pytest.approx(-base, abs=1e-7)

    def test_column_version_matches_scalar(self):
        rng = seeded_rng(5)
        x = rng.standard_normal((16, 7))
        y = rng.standard_normal((16, 7))
        cols = pearson_corr_columns(x, y)
        for f in range(7):
            assert cols[f] == pytest.approx(pearson_corr(x[:, f], y[:, f]), abs=1e-12)


class TestCorrelationUnit:
    def test_identical_streams_give_one(self):
        rng = seeded_rng(3)
        x = rng.standard_normal((8, 5))
        rec = correlation_unit(x, x.copy(), DecorreConfig())
        np.testing.assert_allclose(rec.correlations, np.ones(5), atol=1e-12)

    def test_independent_noise_concentrates_near_zero(self):
        rng = seeded_rng(4)
        roi = rng.standard_normal((256, 12))
        cr = rng.standard_normal((256, 12))
        rec = correlation_unit(roi, cr, DecorreConfig())
        assert abs(rec.correlations.mean()) < 0.1

    def test_hand_built_correlated_and_anticorrelated_columns(self):
        roi = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
        cr = np.array([[10.0, -1.0], [20.0, -2.0], [30.0, -3.0], [40.0, -4.0]])
        rec = correlation_unit(roi, cr, DecorreConfig())
        np.testing.assert_allclose(rec.correlations, [1.0, -1.0], atol=1e-12)

    def test_spatial_input_pools_channels_first(self):
        rng = seeded_rng(6)
        roi = rng.standard_normal((8, 3, 4, 4))
        cr = rng.standard_normal((8, 3, 4, 4))
        rec = correlation_unit(roi, cr, DecorreConfig())
        assert rec.correlations.shape == (3,)
        expected = pearson_corr_columns(roi.mean(axis=(2, 3)), cr.mean(axis=(2, 3)))
        np.testing.assert_allclose(rec.correlations, expected, atol=1e-12)

    def test_shape_mismatch_raises(self):
        rng = seeded_rng(7)
        with pytest.raises(ValueError, match="shape"):
            correlation_unit(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)),
                             DecorreConfig())

    def test_all_outputs_in_unit_interval(self):
        rng = seeded_rng(8)
        roi = rng.standard_normal((16, 40))
        cr = roi * 0.5 + rng.standard_normal((16, 40))
        rec = correlation_unit(roi, cr, DecorreConfig())
        assert (rec.correlations >= -1).all() and (rec.correlations <= 1).all()


class TestFilterFactor:
    def test_above_threshold(self):
        assert filter_factor(0.5, 0.3, 0.01) == 0.01

    def test_below_threshold(self):
        assert filter_factor(0.2, 0.3, 0.01) == 1.0

    def test_boundary_triggers_filtering(self):
        assert filter_factor(0.3, 0.3, 0.01) == 0.01

    @given(d=st.floats(-1, 1), t=st.floats(-0.99, 0.99), c=st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_output_is_c_or_one(self, d, t, c):
        out = filter_factor(d, t, c)
        assert out in (c, 1.0)


class TestFilterSigmoid:
    def test_midpoint(self):
        assert filter_sigmoid(0.3, 0.3, 0.01, 50.0) == pytest.approx(0.505, abs=1e-12)

    def test_asymptotes(self):
        assert filter_sigmoid(-1e6, 0.3, 0.01, 50.0) == pytest.approx(1.0, abs=1e-12)
        assert filter_sigmoid(1e6, 0.3, 0.01, 50.0) == pytest.approx(0.01, abs=1e-12)

    def test_known_value(self):
        # 0.99 / (1 + e^5) + 0.01
        expected = 0.99 / (1.0 + np.exp(5.0)) + 0.01
        assert filter_sigmoid(0.4, 0.3, 0.01, 50.0) == pytest.approx(expected, abs=1e-12)

    @given(st.floats(-1, 1), st.floats(-1, 1))
    @settings(max_examples=100, deadline=None)
    def test_decreasing_and_bounded(self, d1, d2):
        # strictly decreasing mathematically; float64 saturates to the
        # bounds far from the midpoint, so the bound check is inclusive
        lo, hi = min(d1, d2), max(d1, d2)
        f = lambda d: filter_sigmoid(d, 0.3, 0.01, 50.0)
        assert f(lo) >= f(hi)
        if hi - lo > 1e-6 and abs(lo - 0.3) < 0.5 and abs(hi - 0.3) < 0.5:
            assert f(lo) > f(hi)
        assert 0.01 <= f(d1) <= 1.0


class TestDropoutKeepProb:
    def test_negative_correlation_never_dropped(self):
        assert dropout_keep_prob(-0.2, 0.3) == 1.0

    def test_linear_ramp_midpoint(self):
        assert dropout_keep_prob(0.15, 0.3) == pytest.approx(0.5, abs=1e-12)

    def test_guaranteed_dropout(self):
        assert dropout_keep_prob(0.45, 0.3) == 0.0
        assert dropout_keep_prob(0.3, 0.3) == 0.0

    def test_piecewise_affine_shape(self):
        g = 0.3
        for d in np.linspace(-1, 1, 101):
            p = dropout_keep_prob(d, g)
            if d <= 0:
                assert p == 1.0
            elif d >= g:
                assert p == 0.0
            else:
                assert p == pytest.approx(1.0 - d / g, abs=1e-12)

    def test_empirical_keep_frequency(self):
        # 10,000 draws within 4 binomial standard deviations
        rng = seeded_rng(99)
        n = 10_000
        g = 0.3
        for d in (-0.2, 0.15, 0.29, 0.45):
            p = dropout_keep_prob(d, g)
            kept = int((rng.random(n) < p).sum())
            sd = np.sqrt(n * p * (1 - p))
            assert abs(kept - n * p) <= max(4 * sd, 1e-9)


def _nondegenerate_pair(rng, shape):
    roi = rng.standard_normal(shape)
    cr = 0.8 * roi + 0.2 * rng.standard_normal(shape)
    return roi.astype(np.float32), cr.astype(np.float32)


class TestDecorreForward:
    def test_inference_is_bit_exact_identity(self):
        rng = seeded_rng(11)
        roi, cr = _nondegenerate_pair(rng, (8, 5))
        out, rec = decorre_forward(roi, cr, DecorreConfig(), None, training=False)
        assert out is roi
        assert len(rec) == 0

    def test_dropout_zeroes_fully_correlated_feature(self):
        rng = seeded_rng(12)
        roi = rng.standard_normal((16, 3)).astype(np.float32)
        cr = roi.copy()
        cfg = DecorreConfig(mode="dropout", guarantee=0.3)
        out, rec = decorre_forward(roi, cr, cfg, seeded_rng(1), training=True)
        np.testing.assert_allclose(rec.correlations, np.ones(3), atol=1e-6)
        np.testing.assert_array_equal(out, np.zeros_like(roi))

    def test_factor_mode_scales_correlated_column_only(self):
        base = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
        indep = np.array([1.0, -2.0, 3.0, -4.0], dtype=np.float32)
        roi = np.column_stack([base, indep])
        cr = np.column_stack([base * 2 + 1, np.array([4.0, 3.0, -5.0, -2.0])]).astype(np.float32)
        cfg = DecorreConfig(mode="factor", threshold=0.3, low_factor=0.01)
        out, rec = decorre_forward(roi, cr, cfg, None, training=True)
        assert rec.correlations[0] == pytest.approx(1.0, abs=1e-9)
        assert abs(rec.correlations[1]) < 0.3
        np.testing.assert_allclose(out[:, 0], roi[:, 0] * 0.01, rtol=1e-6)
        np.testing.assert_array_equal(out[:, 1], roi[:, 1])

    def test_spatial_dropout_zeroes_whole_channel_map(self):
        rng = seeded_rng(13)
        roi = np.abs(rng.standard_normal((8, 2, 4, 4))).astype(np.float32) + 0.5
        cr = roi.copy()
        cfg = DecorreConfig(mode="dropout", guarantee=0.3)
        out, _ = decorre_forward(roi, cr, cfg, seeded_rng(2), training=True)
        np.testing.assert_array_equal(out, np.zeros_like(roi))

    def test_no_inverted_rescaling(self):
        # E[out] = x * keep_prob, not x
        rng = seeded_rng(14)
        roi = np.ones((2, 1), dtype=np.float32)
        cr = rng.standard_normal((2, 1)).astype(np.float32)
        cfg = DecorreConfig(mode="dropout", guarantee=0.3)
        draw_rng = seeded_rng(3)
        outs = []
        for _ in range(4000):
            out, rec = decorre_forward(roi, cr, cfg, draw_rng, training=True)
            outs.append(out.mean())
        p = dropout_keep_prob(float(rec.correlations[0]), 0.3)
        assert np.mean(outs) == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / (8000)) + 1e-9)

    def test_dropout_mask_is_per_sample(self):
        rng = seeded_rng(15)
        cr = rng.standard_normal((64, 1)).astype(np.float32)
        roi = (0.5 * cr + rng.standard_normal((64, 1)) + 3.0).astype(np.float32)
        out, rec = decorre_forward(roi, cr, DecorreConfig(mode="dropout", guarantee=0.9),
                                   seeded_rng(4), training=True)
        assert 0.0 < dropout_keep_prob(float(rec.correlations[0]), 0.9) < 1.0
        kept = out != 0
        assert 0 < kept.sum() < kept.size  # some samples kept, some dropped

    def test_batch_of_one_raises_in_training(self):
        cfg = DecorreConfig()
        with pytest.raises(ValueError, match="batch size"):
            decorre_forward(np.ones((1, 3), dtype=np.float32),
                            np.ones((1, 3), dtype=np.float32), cfg, None, training=True)

    def test_monitoring_mode_records_without_filtering(self):
        rng = seeded_rng(16)
        roi, cr = _nondegenerate_pair(rng, (8, 4))
        out, rec = decorre_forward(roi, cr, DecorreConfig(mode="dropout"), seeded_rng(5),
                                   training=True, filter_enabled=False)
        assert out is roi
        assert len(rec) == 4


class TestDecorreBackward:
    def test_identity_bit_exact(self):
        rng = seeded_rng(17)
        g = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
        out = decorre_backward(g)
        assert out is g

    def test_zero_upstream(self):
        z = np.zeros((3, 3))
        np.testing.assert_array_equal(decorre_backward(z), z)


class TestDecorreLayer:
    def test_plain_forward_is_identity(self):
        rng = seeded_rng(18)
        layer = DecorreLayer(DecorreConfig(), "pre_fc1")
        x = rng.standard_normal((4, 6))
        assert layer.forward(x) is x
        assert layer.backward(x, None) is x

    def test_filter_returns_record_with_layer_id_and_epoch(self):
        rng = seeded_rng(19)
        layer = DecorreLayer(DecorreConfig(mode="factor"), "pre_fc2")
        roi, cr = _nondegenerate_pair(rng, (8, 4))
        _, cr_out, rec = layer.filter(roi, cr, None, epoch=7)
        assert rec.layer_id == "pre_fc2"
        assert rec.epoch == 7
        assert cr_out is cr  # control stream passes through unfiltered by default

    def test_filter_cr_switch_filters_control_stream(self):
        rng = seeded_rng(20)
        roi = rng.standard_normal((8, 3)).astype(np.float32)
        cr = roi.copy()
        layer = DecorreLayer(DecorreConfig(mode="factor", filter_cr=True), "pre_fc1")
        _, cr_out, _ = layer.filter(roi, cr, None)
        np.testing.assert_allclose(cr_out, cr * 0.01, rtol=1e-6)


class TestFilterUnitInvariants:
    @given(st.floats(-1, 1))
    @settings(max_examples=100, deadline=None)
    def test_factor_and_sigmoid_are_nonincreasing_and_bounded(self, d):
        f1 = filter_factor(d, 0.3, 0.01)
        f2 = filter_sigmoid(d, 0.3, 0.01, 50.0)
        assert 0.01 <= f1 <= 1.0
        assert 0.01 <= f2 <= 1.0
        eps = 1e-3
        assert filter_factor(d + eps, 0.3, 0.01) <= f1
        assert filter_sigmoid(d + eps, 0.3, 0.01, 50.0) <= f2
