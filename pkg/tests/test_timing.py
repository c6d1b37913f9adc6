import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from armcache.timing import PRESETS, CalibrationFailed, Histogram, Threshold, TimerModel, calibrate, classify, timer


def test_register_timer_is_identity():
    t = timer("register")
    x = np.array([0, 4, 44, 520])
    assert t.observe(x).tolist() == x.tolist()
    assert t.observe(17) == 17


def test_clock_ticks_are_granular():
    t = timer("clock")
    ticks = t.observe(np.arange(1000), np.random.default_rng(0))
    assert np.all(ticks % t.granularity == 0)


def test_jittery_timer_needs_generator():
    with pytest.raises(ValueError):
        timer("syscall").observe(10)


def test_unknown_preset_and_kind():
    with pytest.raises(ValueError):
        timer("sundial")
    with pytest.raises(ValueError):
        TimerModel("hourglass")


def test_negative_cycles_rejected():
    with pytest.raises(ValueError):
        timer("register").observe(-1)


@settings(max_examples=50, deadline=None)
@given(a=st.integers(0, 10_000), b=st.integers(0, 10_000), name=st.sampled_from(sorted(PRESETS)))
def test_jitter_free_observation_is_monotone(a, b, name):
    base = PRESETS[name]
    t = TimerModel(base.kind, base.scale, base.granularity, base.overhead, 0.0)
    lo, hi = sorted((a, b))
    assert t.observe(lo) <= t.observe(hi)


def test_calibrate_separable_classes_is_exact():
    thr = calibrate([40, 41, 44, 50], [500, 520, 530])
    assert thr.error_rate == 0 and 50 < thr.value < 500
    assert classify(thr, 45) == "hit" and classify(thr, 600) == "miss"


def test_calibrate_overlap_minimises_errors():
    # brute force over every integer cut as the independent check
    rng = np.random.default_rng(3)
    hits, misses = rng.normal(100, 20, 500).round(), rng.normal(150, 20, 500).round()
    thr = calibrate(hits, misses)
    best = min(((hits >= c).sum() + (misses < c).sum()) for c in np.arange(0, 300, 0.5))
    assert thr.error_rate * 1000 == pytest.approx(best)


def test_calibrate_fails_on_indistinguishable_classes():
    rng = np.random.default_rng(0)
    with pytest.raises(CalibrationFailed):
        calibrate(rng.normal(0, 1, 1000), rng.normal(0, 1, 1000))


def test_threshold_classify_vectorised():
    t = Threshold(100)
    assert t.classify(np.array([99, 100, 101])).tolist() == [True, False, False]


def test_histogram_counts_everything():
    s = np.random.default_rng(1).integers(0, 700, 5000)
    h = Histogram.of(s, 10)
    assert h.total == 5000 and h.counts.size == h.edges.size - 1
    assert Histogram.of([3, 3, 3, 20], 5).mode() == 2.5
