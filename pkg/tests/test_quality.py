import pytest
from hypothesis import given
from hypothesis import strategies as st

from polypcascade.quality import (
    QualityFactors,
    QualityWeights,
    ThresholdController,
    ThresholdPolicy,
    quality_score,
    select_threshold_binary,
    select_threshold_interpolated,
)

unit = st.floats(0.0, 1.0)


class TestQualityScore:
    def test_all_ones(self):
        f = QualityFactors(1.0, 1.0, 1.0)
        assert quality_score(f, QualityWeights(0.5, 0.3, 0.2)) == pytest.approx(1.0)

    def test_all_zeros(self):
        f = QualityFactors(0.0, 0.0, 0.0)
        assert quality_score(f, QualityWeights()) == 0.0

    def test_weighted_combination(self):
        # 0.5*0.5 + 0.3*0.8 + 0.2*0.2 = 0.25 + 0.24 + 0.04
        f = QualityFactors(0.5, 0.8, 0.2)
        assert quality_score(f, QualityWeights(0.5, 0.3, 0.2)) == pytest.approx(0.53)

    def test_rejects_weights_not_summing_to_one(self):
        with pytest.raises(ValueError):
            QualityWeights(0.5, 0.5, 0.5)

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            QualityWeights(-0.2, 0.6, 0.6)

    def test_rejects_out_of_range_factor(self):
        with pytest.raises(ValueError):
            QualityFactors(1.2, 0.0, 0.0)

    @given(unit, unit, unit)
    def test_score_in_unit_interval(self, a, b, c):
        q = quality_score(QualityFactors(a, b, c), QualityWeights())
        assert -1e-12 <= q <= 1.0 + 1e-12


class TestBinarySelection:
    def test_adverse_uses_low(self):
        assert select_threshold_binary(True, ThresholdPolicy()) == 0.2

    def test_clean_uses_high(self):
        assert select_threshold_binary(False, ThresholdPolicy()) == 0.5

    def test_degenerate_policy_rejected(self):
        with pytest.raises(ValueError):
            ThresholdPolicy(tau_low=0.4, tau_high=0.4)


class TestInterpolatedSelection:
    def policy(self, **kw):
        return ThresholdPolicy(mode="interpolated", **kw)

    def test_endpoints(self):
        p = self.policy(q_min=0.1, q_max=0.9)
        assert select_threshold_interpolated(0.1, p) == pytest.approx(p.tau_low)
        assert select_threshold_interpolated(0.9, p) == pytest.approx(p.tau_high)

    def test_midpoint(self):
        p = self.policy(tau_low=0.2, tau_high=0.5)
        assert select_threshold_interpolated(0.5, p) == pytest.approx(0.35)

    def test_clamping_makes_map_total(self):
        p = self.policy(q_min=0.2, q_max=0.8)
        assert select_threshold_interpolated(-5.0, p) == pytest.approx(p.tau_low)
        assert select_threshold_interpolated(7.0, p) == pytest.approx(p.tau_high)

    @given(st.floats(-2, 3), st.floats(-2, 3))
    def test_monotone_and_in_range(self, q1, q2):
        p = self.policy(q_min=0.1, q_max=0.7)
        t1 = select_threshold_interpolated(q1, p)
        t2 = select_threshold_interpolated(q2, p)
        if q1 <= q2:
            assert t1 <= t2 + 1e-12
        assert p.tau_low - 1e-12 <= t1 <= p.tau_high + 1e-12

    def test_binary_consistency_below_q_min(self):
        interp = self.policy(q_min=0.3, q_max=0.9)
        binary = ThresholdPolicy()
        assert select_threshold_interpolated(0.1, interp) == pytest.approx(
            select_threshold_binary(True, binary)
        )


class TestThresholdController:
    def test_backend_source(self):
        c = ThresholdController(ThresholdPolicy())
        assert c.select(True, None) == 0.2
        assert c.select(False, None) == 0.5

    def test_quality_source_cutoff(self):
        c = ThresholdController(ThresholdPolicy(), adverse_source="quality")
        dim = QualityFactors(0.1, 0.2, 0.3)
        crisp = QualityFactors(0.9, 0.9, 0.9)
        assert c.select(None, dim) == 0.2
        assert c.select(None, crisp) == 0.5

    def test_missing_signal_defaults_clean(self):
        c = ThresholdController(ThresholdPolicy(), adverse_source="quality")
        assert c.select(None, None) == 0.5

    def test_interpolated_mode_uses_quality(self):
        c = ThresholdController(ThresholdPolicy(mode="interpolated"))
        mid = QualityFactors(0.5, 0.5, 0.5)
        assert c.select(None, mid) == pytest.approx(0.35)

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError):
            ThresholdController(ThresholdPolicy(), adverse_source="vibes")
