import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loadid.errors import EmptyInputError, NoCrossingError, ParameterError
from loadid.syncsim import (NodeClock, SyncConfig, SyncTrial, TimestampJitter, cdf_to_csv, detect_zero_crossings,
                          error_cdf, simulate, summary, with_jitter)

IDEAL = NodeClock(0.0, 0.0, TimestampJitter())
CLEAN = SyncConfig(voltage_noise_rel=0.0)


def sine(n_cycles, delay=0.0, noise=0.0, seed=0):
    k = np.arange(320 * n_cycles + 1)
    v = np.sin(2 * np.pi * (k - delay) / 320)
    return v + np.random.default_rng(seed).normal(0, noise, len(k)) if noise else v


def test_crossings_of_pure_sine():
    np.testing.assert_allclose(detect_zero_crossings(sine(3)), [0, 320, 640], atol=1e-9)


def test_crossings_half_sample_delay():
    z = detect_zero_crossings(sine(3, delay=0.5))
    np.testing.assert_allclose(z, [0.5, 320.5, 640.5], atol=1e-9)
    coarse = detect_zero_crossings(sine(3, delay=0.5), refine=False)
    np.testing.assert_allclose(coarse, z, atol=1e-3)


def test_crossings_under_one_percent_noise():
    z = detect_zero_crossings(sine(1000, delay=0.3, noise=0.01, seed=3))
    # the crossing at 0.3 has no sample before it
    truth = 0.3 + 320 * np.arange(1, 1001)
    assert len(z) == 1000
    assert np.abs(z - truth).max() < 0.2


def test_no_crossing_errors():
    with pytest.raises(NoCrossingError):
        detect_zero_crossings(np.ones(640))
    with pytest.raises(NoCrossingError):
        detect_zero_crossings(np.zeros(640))


def test_identical_ideal_clocks_give_zero_error():
    res = simulate(20, IDEAL, IDEAL, CLEAN, seed=1)
    assert max(t.abs_error_us for t in res.spt) < 1e-6
    assert max(t.abs_error_us for t in res.tsf) == 0.0
    assert res.flagged == 0


@settings(max_examples=25)
@given(st.floats(-5e4, 5e4), st.floats(-500, 500), st.floats(-5e4, 5e4), st.floats(-500, 500),
       st.integers(0, 2**31))
def test_spt_error_bounded_by_sampling_interval(off_a, drift_a, off_b, drift_b, seed):
    a = NodeClock(off_a, drift_a, TimestampJitter())
    b = NodeClock(off_b, drift_b, TimestampJitter())
    res = simulate(30, a, b, CLEAN, seed=seed)
    # one sampling interval of the slower clock
    bound = CLEAN.sample_interval_us / (1 + min(drift_a, drift_b) * 1e-6)
    assert res.flagged == 0
    assert max(t.abs_error_us for t in res.spt) <= bound + 1e-6


def test_default_regime_statistics():
    res = simulate(1000, seed=2)
    s_spt, s_tsf = summary(res.spt), summary(res.tsf)
    assert s_spt["max_us"] <= 62.5
    assert 10 <= s_spt["mean_us"] <= 35
    assert s_tsf["mean_us"] > s_spt["mean_us"]
    assert all(t.abs_error_us == abs(t.node_a_estimate_us - t.node_b_estimate_us) for t in res.spt)


def test_tsf_outliers_follow_configured_rate():
    jitter = TimestampJitter(std=5.0, outlier_prob=0.05, outlier_shift_us=1000.0)
    a, b = NodeClock(0, 0, jitter), NodeClock(0, 0, TimestampJitter())
    res = simulate(2000, a, b, CLEAN, seed=4)
    frac = np.mean([t.abs_error_us > 500 for t in res.tsf])
    se = math.sqrt(0.05 * 0.95 / 2000)
    assert abs(frac - 0.05) < 4 * se


def test_beacon_errors_are_flagged_and_excluded():
    cfg = SyncConfig(beacon_error_prob=0.3, beacon_error_ms=15.0)
    res = simulate(300, config=cfg, seed=5)
    assert 0 < res.flagged < 300
    assert all(t.abs_error_us >= 10_000 for t in res.spt if t.flagged)
    kept = [t for t in res.spt if not t.flagged]
    assert error_cdf(res.spt)[-1] == (max(t.abs_error_us for t in kept), 1.0)


def test_error_cdf_examples():
    assert error_cdf([SyncTrial(0, 0, 7, 7.0)]) == [(7.0, 1.0)]
    assert error_cdf([SyncTrial(0, 0, 30, 30.0), SyncTrial(0, 0, 10, 10.0)]) == [(10.0, 0.5), (30.0, 1.0)]
    with pytest.raises(EmptyInputError):
        error_cdf([])
    with pytest.raises(EmptyInputError):
        error_cdf([SyncTrial(0, 0, 1, 1.0, True)])


def test_spt_cdf_monotone_and_bounded():
    rows = error_cdf(simulate(300, seed=6).spt)
    e, c = np.array(rows).T
    assert np.all(np.diff(e) > 0) and np.all(np.diff(c) > 0)
    assert c[-1] == 1.0 and e[-1] <= 62.5
    text = cdf_to_csv(rows)
    assert text.splitlines()[0] == "error_us,cum_frac"
    assert len(text.splitlines()) == len(rows) + 1


def test_parameter_checks():
    with pytest.raises(ParameterError):
        simulate(0)
    with pytest.raises(ParameterError):
        TimestampJitter(outlier_prob=1.5)
    with pytest.raises(ParameterError):
        with_jitter(IDEAL, "nope")
    assert with_jitter(IDEAL, "tsf_default").timestamp_jitter_us.outlier_prob > 0
    assert NodeClock.from_dict(NodeClock(3.0, 4.0).to_dict()) == NodeClock(3.0, 4.0)


def test_simulation_is_deterministic():
    assert simulate(50, seed=9) == simulate(50, seed=9)
