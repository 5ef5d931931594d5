import numpy as np
import pytest
from hypothesis import given, strategies as st

from loadid.errors import FormatError, ParameterError
from loadid.schedule import Action, Event, EventSchedule, ScheduleParams, generate_schedule
from loadid.simulate import (ApplianceSpec, GridSpec, Ramp, Surge, Transient, build_default_catalog,
                           execute_schedule, load_catalog, resample_imbalanced, save_catalog,
                           synth_appliance_cycle, trace_from_bytes, trace_to_bytes)

from conftest import sine_spec, toy_catalog


def rms(x):
    return np.sqrt(np.mean(np.square(x), axis=-1))


def test_grid_defaults():
    g = GridSpec()
    assert g.cycle_len == 320
    assert GridSpec.from_dict(g.to_dict()) == g


def test_synth_cycle_states():
    rng = np.random.default_rng(0)
    s = sine_spec()
    assert not synth_appliance_cycle(s, "off", rng).any()
    on = synth_appliance_cycle(s, "on", rng)
    assert rms(on) == pytest.approx(1 / np.sqrt(2))
    surge = ApplianceSpec(0, "s", 100, [(1, 1.0, 0.0)], transient_cycles=5, transient_shape=Surge(5.0, 0.5))
    x = synth_appliance_cycle(surge, Transient(0), rng)
    fund = np.abs(np.fft.rfft(x)[1]) * 2 / 320
    assert fund == pytest.approx(5.0, rel=0.05)
    ramp = ApplianceSpec(0, "r", 100, [(1, 1.0, 0.0)], transient_cycles=4, transient_shape=Ramp())
    assert Ramp().envelope(2, 4) == 0.5
    assert synth_appliance_cycle(ramp, Transient(2), rng).shape == (320,)


def test_empty_schedule_zero_noise(quiet_grid):
    tr = execute_schedule(EventSchedule([], 2, 50), [sine_spec(0), sine_spec(1)], quiet_grid)
    assert len(tr) == 50
    assert not tr.aggregate.any()
    assert not tr.labels.any()


def test_single_switch_on():
    grid = GridSpec(noise_std_a=0.01)
    spec = sine_spec(amp=2.0, transient_cycles=3)
    tr = execute_schedule(EventSchedule([Event(10, 0, Action.ON)], 1, 40), [spec], grid, seed=1)
    r = rms(tr.aggregate)
    assert r[:10].max() < 0.02
    assert np.allclose(r[13:], np.sqrt(2), rtol=0.01)
    assert tr.labels[9] == 0 and tr.labels[10] == 1


def test_power_fidelity_pair():
    cat = {s.name: s for s in build_default_catalog()}
    specs = [cat["Humidifier"], cat["ElectricKettle"]]
    specs = [ApplianceSpec.from_dict({**s.to_dict(), "id": i, "power_jitter_rel": 0.0}) for i, s in enumerate(specs)]
    sched = EventSchedule([Event(1, 0, Action.ON), Event(2, 1, Action.ON)], 2, 200)
    tr = execute_schedule(sched, specs, GridSpec(noise_std_a=0.0), n_cycles=150)
    p = np.mean(tr.voltage[40:140] * tr.aggregate[40:140])
    assert p == pytest.approx(1540.0, rel=0.02)


@pytest.mark.parametrize("spec", build_default_catalog(), ids=lambda s: s.name)
def test_catalog_power_fidelity(spec):
    g = GridSpec()
    v = g.voltage_peak * np.sin(2 * np.pi * np.arange(320) / 320)
    assert np.mean(v * spec.steady_waveform(320)) == pytest.approx(spec.rated_power_w, rel=0.02)


def test_catalog_file_matches_builder(tmp_path):
    assert [s.to_dict() for s in load_catalog()] == [s.to_dict() for s in build_default_catalog()]
    save_catalog(toy_catalog(), tmp_path / "c.json")
    assert [s.name for s in load_catalog(tmp_path / "c.json")] == [s.name for s in toy_catalog()]
    (tmp_path / "bad.json").write_text("{\"appliances\": [{}]}")
    with pytest.raises(FormatError):
        load_catalog(tmp_path / "bad.json")


def test_catalog_transients_shorter_than_default_interval():
    assert max(s.transient_cycles for s in load_catalog()) < 30


def test_events_beyond_horizon():
    sched = EventSchedule([Event(100, 0, Action.ON)], 1, 10)
    with pytest.raises(ParameterError):
        execute_schedule(sched, [sine_spec()], GridSpec(), n_cycles=50)


def test_catalog_size_mismatch():
    with pytest.raises(ParameterError):
        execute_schedule(EventSchedule([], 2, 10), [sine_spec()], GridSpec())


@given(st.integers(0, 2**31), st.integers(2, 4))
def test_kirchhoff_and_labels(seed, n):
    specs = toy_catalog()[:n]
    sched = generate_schedule(ScheduleParams(n, 2, 1, rounds=1, dwell_cycles=20, rng_seed=seed))
    tr = execute_schedule(sched, specs, GridSpec(noise_std_a=0.0), seed=seed, keep_individual=True)
    assert np.abs(tr.aggregate - tr.individual.sum(axis=1)).max() <= 1e-9
    # label bits change exactly at scheduled cycles
    assert [(c, a, act) for c, a, act in tr.events()] == [(e.time_cycle, e.appliance_id, e.action) for e in sched.events]


def test_determinism_and_roundtrip():
    specs = toy_catalog()
    sched = generate_schedule(ScheduleParams(4, 2, 2, rounds=1, dwell_cycles=30, rng_seed=5))
    a = execute_schedule(sched, specs, GridSpec(), seed=9, keep_individual=True)
    b = execute_schedule(sched, specs, GridSpec(), seed=9, keep_individual=True)
    data = trace_to_bytes(a)
    assert data == trace_to_bytes(b)
    back = trace_from_bytes(data, specs)
    assert trace_to_bytes(back) == data
    assert back.grid.cycle_len == 320 and back.n_appliances == 4
    np.testing.assert_array_equal(back.labels, a.labels)


def test_trace_corruption():
    tr = execute_schedule(EventSchedule([Event(5, 0, Action.ON)], 1, 10), [sine_spec()], GridSpec())
    data = trace_to_bytes(tr)
    for bad in (b"XXXX" + data[4:], data[:-7], data[:10],
                data[:4] + (9).to_bytes(4, "little") + data[8:]):
        with pytest.raises(FormatError):
            trace_from_bytes(bad)
    # a frame with a skipped cycle id
    size = (len(data) - 25) // len(tr)
    frames = bytearray(data)
    frames[25 + size: 25 + size + 8] = (7).to_bytes(8, "little")
    with pytest.raises(FormatError):
        trace_from_bytes(bytes(frames))


def test_resample_imbalanced():
    events = [(i * 10, 2 * (i % 4)) for i in range(40)]
    uni = resample_imbalanced(events, {a: 1.0 for a in range(4)}, seed=0)
    assert sorted(uni) == sorted(events)
    single = resample_imbalanced(events, {2: 1.0}, seed=0)
    assert len(single) == 40 and {c // 2 for _, c in single} == {2}
    skew = {0: 8.0, 1: 4.0, 2: 2.0, 3: 1.0}
    out = resample_imbalanced(events, skew, seed=1)
    counts = np.bincount([c // 2 for _, c in out], minlength=4)
    assert counts.sum() == 40
    assert counts.min() / counts.max() == pytest.approx(1 / 8, abs=0.05)
    with pytest.raises(ParameterError):
        resample_imbalanced(events, {0: 0.0})
