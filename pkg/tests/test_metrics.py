"""Confusion metrics and log-loss with hand-computed oracle values."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lungpipe.metrics import (
    ScoredSet,
    confusion,
    log_loss,
    metric_report,
    sensitivity_specificity_f1,
)


class TestConfusion:
    def test_hand_worked_example(self):
        # threshold 0.25: preds (1, 0, 1, 1, 0) vs labels (1, 0, 0, 1, 1)
        s = ScoredSet(np.array([0.9, 0.1, 0.3, 0.8, 0.2]), np.array([1, 0, 0, 1, 1]), 0.25)
        assert confusion(s) == (2, 1, 1, 1)
        sens, spec, f1 = sensitivity_specificity_f1(confusion(s))
        assert sens == pytest.approx(2 / 3)
        assert spec == pytest.approx(1 / 2)
        assert f1 == pytest.approx(4 / 6)

    def test_strictly_above_threshold(self):
        s = ScoredSet(np.array([0.25]), np.array([1]), 0.25)
        assert confusion(s) == (0, 0, 0, 1)  # 0.25 is not > 0.25

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            confusion(ScoredSet(np.array([]), np.array([])))

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            ScoredSet(np.array([0.5]), np.array([1]), threshold=1.0)

    def test_degenerate_denominators_are_none(self):
        s = ScoredSet(np.array([0.9, 0.8]), np.array([1, 1]), 0.5)
        sens, spec, f1 = sensitivity_specificity_f1(confusion(s))
        assert sens == 1.0 and spec is None and f1 == 1.0
        s = ScoredSet(np.array([0.1, 0.2]), np.array([0, 0]), 0.5)
        sens, spec, f1 = sensitivity_specificity_f1(confusion(s))
        assert sens is None and spec == 1.0 and f1 is None


class TestLogLoss:
    def test_uniform_half_is_log_two(self):
        # constant 0.5 prediction scores exactly ln 2 = 0.693147...
        s = ScoredSet(np.full(10, 0.5), np.array([0, 1] * 5))
        assert log_loss(s) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_worked_example(self):
        s = ScoredSet(np.array([0.8, 0.4]), np.array([1, 0]))
        expect = (-math.log(0.8) - math.log(0.6)) / 2
        assert log_loss(s) == pytest.approx(expect, rel=1e-12)

    def test_clip_prevents_infinity(self):
        s = ScoredSet(np.array([0.0, 1.0]), np.array([1, 0]))
        assert math.isfinite(log_loss(s))

    def test_clipped_predictions_bound_per_patient_loss(self):
        # predictions clipped at the patient stage can lose at most the
        # documented per-patient bound, on both sides
        from lungpipe.patient import MAX_PATIENT_LOG_LOSS, PROB_CLIP

        worst_pos = ScoredSet(np.array([PROB_CLIP[0]]), np.array([1]))
        worst_neg = ScoredSet(np.array([PROB_CLIP[1]]), np.array([0]))
        assert log_loss(worst_pos) <= MAX_PATIENT_LOG_LOSS + 1e-9
        assert log_loss(worst_neg) <= MAX_PATIENT_LOG_LOSS + 1e-9
        assert log_loss(worst_pos) == pytest.approx(MAX_PATIENT_LOG_LOSS, rel=1e-9)

    @given(
        st.lists(st.floats(min_value=0.001, max_value=0.999), min_size=1, max_size=20),
        st.integers(min_value=0, max_value=2**20),
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_oracle(self, probs, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=len(probs))
        s = ScoredSet(np.array(probs), labels)
        expect = np.mean(
            [-math.log(p if y else 1 - p) for p, y in zip(probs, labels)]
        )
        assert log_loss(s) == pytest.approx(expect, rel=1e-9)
        assert log_loss(s) >= 0


class TestReport:
    def test_keys_and_values(self):
        s = ScoredSet(np.array([0.9, 0.1]), np.array([1, 0]), 0.25)
        r = metric_report(s)
        assert set(r) == {"sensitivity", "specificity", "f1", "log_loss", "threshold", "n"}
        assert r["n"] == 2 and r["threshold"] == 0.25
        assert r["sensitivity"] == 1.0 and r["specificity"] == 1.0 and r["f1"] == 1.0
