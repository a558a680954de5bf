import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apictwin.actuation import TimeTrace
from apictwin.calibration import CalibrationTable, UncalibratedChannelError, calibrate_tree, sps_id
from apictwin.device import DeviceConfig, VirtualDevice, leakage_matrix
from apictwin.pulses import (
    AnalysisError,
    PulseSequence,
    Segment,
    amplitude_to_voltage,
    compile_sequence,
    crosstalk_experiment,
    demo_sequences,
    device_with_sps_noise,
    frequency_response,
    measure_rise_fall,
    play,
    pulse_area_stats,
    pulse_areas,
)

QUIET = DeviceConfig(detector_noise_floor=0.0)


@pytest.fixture(scope="module")
def table():
    return calibrate_tree(VirtualDevice(QUIET))


def static_fraction(table, ch, a):
    """Static read at the compiled voltage, as a fraction of the cross-state read."""
    dev = VirtualDevice(QUIET)
    for sid, v in table.operating_voltages().items():
        dev.set_voltage(sid, v)
    dev.set_voltage(sps_id(ch), 0.0)
    p0 = dev.read_power(ch)
    dev.set_voltage(sps_id(ch), table[sps_id(ch)].v_cross[0])
    p1 = dev.read_power(ch)
    dev.set_voltage(sps_id(ch), float(amplitude_to_voltage(table, ch, a)))
    return (dev.read_power(ch) - p0) / (p1 - p0)


# -- compilation ---------------------------------------------------------------------


def test_amplitude_endpoints(table):
    for ch in range(4):
        assert amplitude_to_voltage(table, ch, 0.0) == 0.0
        assert amplitude_to_voltage(table, ch, 1.0) == table[sps_id(ch)].v_cross[0]


def test_half_amplitude_static_read(table):
    assert abs(static_fraction(table, 1, 0.5) - 0.5) <= 0.01 * 0.5


@settings(max_examples=9, deadline=None)
@given(st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]), st.integers(0, 3))
def test_amplitude_fraction_property(table, a, ch):
    assert abs(static_fraction(table, ch, a) / a - 1) <= 0.01


def test_uncalibrated_channel():
    with pytest.raises(UncalibratedChannelError):
        amplitude_to_voltage(CalibrationTable(), 0, 0.5)


def test_compile_bar_outside_pulses(table):
    tr = compile_sequence(PulseSequence(2, (Segment(10, 20, amplitude=0.5),)), table, 50)
    x = tr.samples
    assert x.size == 50 and np.all(x[:10] == 0) and np.all(x[30:] == 0)
    assert np.allclose(x[10:30], amplitude_to_voltage(table, 2, 0.5))


def test_sequence_validation():
    with pytest.raises(ValueError):
        PulseSequence(0, (Segment(0, 100), Segment(50, 100)))
    with pytest.raises(ValueError):
        PulseSequence(4)
    with pytest.raises(ValueError):
        Segment(0, 10, amplitude=1.5)
    with pytest.raises(ValueError):
        Segment(0, 10, shape="triangle")
    seq = PulseSequence(0, (Segment(300, 10), Segment(0, 10)))
    assert [s.start for s in seq.segments] == [0, 300] and seq.end == 310


def test_demo_sequences_compile(table):
    traces = play(VirtualDevice(QUIET), table, demo_sequences(), 1000.0)
    assert set(traces) == set(range(8))
    assert all(np.all(np.isfinite(t.samples)) for t in traces.values())


# -- rise / fall -----------------------------------------------------------------------


def test_rise_of_analytic_exponential():
    dt = 0.05
    t = np.arange(0, 3000, dt)
    x = np.where(t < 100, 0.0, 1 - np.exp(-(t - 100) / 10.0))
    rise, fall = measure_rise_fall(TimeTrace(x, dt))
    assert abs(rise - math.log(9) * 10.0) < 0.1
    assert fall is None


def test_rise_of_square_trace():
    x = np.r_[np.zeros(100), np.ones(200), np.zeros(100)]
    rise, fall = measure_rise_fall(TimeTrace(x, 1.0))
    assert rise <= 2.0 and fall <= 2.0


def test_flat_trace_has_no_plateau_pair():
    with pytest.raises(AnalysisError):
        measure_rise_fall(TimeTrace(np.full(100, 0.3), 1.0))


# -- frequency response ----------------------------------------------------------------


def test_frequency_response_default(table):
    fr = frequency_response(VirtualDevice(QUIET), table, freqs=np.arange(1.0, 111.0, 1.0), min_window=2000.0)
    assert fr.response_db[0] == 0.0
    assert abs(fr.f3db - 34.0) <= 2.0
    assert fr.at(100.0) <= -6.0


def test_frequency_response_without_filter(table):
    acts = {sid: (a.with_(f3db=None, slew_limit=None) if a.kind == "SPS" else a) for sid, a in QUIET.actuators.items()}
    fr = frequency_response(VirtualDevice(QUIET.with_(actuators=acts)), table, freqs=[1.0, 30.0, 100.0, 150.0], min_window=2000.0)
    assert fr.f3db is None and "unbounded_f3db" in fr.flags
    assert np.all(np.abs(fr.response_db) < 0.05)


# -- pulse-area statistics -------------------------------------------------------------


def test_pulse_area_zero_noise(table):
    assert pulse_area_stats(device_with_sps_noise(QUIET, 0.0), table, n=50).rel_sigma <= 1e-9


def test_pulse_area_noise_linear(table):
    cfg = QUIET.with_(seed=4)
    s1 = pulse_area_stats(device_with_sps_noise(cfg, 0.05), table, n=300).rel_sigma
    s2 = pulse_area_stats(device_with_sps_noise(cfg, 0.10), table, n=300).rel_sigma
    assert abs(s2 / s1 - 2.0) < 0.2


def test_pulse_area_needs_two(table):
    with pytest.raises(ValueError):
        pulse_area_stats(VirtualDevice(QUIET), table, n=1)


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 300))
def test_pulse_areas_time_shift_invariant(table, shift):
    base = PulseSequence.train(0, 5, start=200.0)
    ref = pulse_areas(play(VirtualDevice(QUIET), table, [base], 2400.0)[0], 5, 400.0, 200.0)
    moved = play(VirtualDevice(QUIET), table, [base.shifted(shift)], 2400.0 + shift)[0]
    assert np.allclose(pulse_areas(moved, 5, 400.0, 200.0 + shift), ref, rtol=1e-12, atol=1e-12)


def test_short_trace_rejected():
    with pytest.raises(AnalysisError):
        pulse_areas(TimeTrace(np.zeros(100), 1.0), 5, 400.0)


@pytest.mark.parametrize("duration,sigma", [(300.0, None), (200.0, 20.0), (120.0, 40.0)])
def test_gaussian_area_matches_square(duration, sigma):
    square = Segment(0.0, 100.0, amplitude=0.1)
    g = Segment(0.0, duration, "gaussian", 1.0, sigma)
    scaled = Segment(0.0, duration, "gaussian", square.area() / g.area(), sigma)
    dt = 0.01
    t = np.arange(0.0, 300.0, dt) + dt / 2
    assert abs(np.sum(scaled.envelope(t)) * dt - np.sum(square.envelope(t)) * dt) <= 1e-6 * square.area()


# -- crosstalk -------------------------------------------------------------------------


def test_crosstalk_default_passes(table):
    for ch in range(4):
        assert crosstalk_experiment(VirtualDevice(DeviceConfig()), table, ch).passed


def test_crosstalk_leak_detected(table):
    leaky = VirtualDevice(DeviceConfig(crosstalk=leakage_matrix(0.01)))
    for ch in range(4):
        r = crosstalk_experiment(leaky, table, ch)
        assert not r.passed and r.magnitude >= r.floor


def test_crosstalk_single_channel_trivial(table):
    r = crosstalk_experiment(VirtualDevice(QUIET), table, 3, channels=(3,))
    assert r.others_delta == 0.0 and r.passed
    assert set(r.to_dict()) >= {"passed", "floor", "magnitude"}


def test_optical_rise_matches_first_order_sin2_oracle():
    # optical 10/90 % points sit at drive fractions (2/pi) asin(sqrt(p)) of the
    # first-order electrical edge, so rise = tau ln((1 - a10) / (1 - a90))
    tau = 1 / (2 * math.pi * 34e-3)
    a = lambda p: 2 / math.pi * math.asin(math.sqrt(p))
    oracle = tau * math.log((1 - a(0.1)) / (1 - a(0.9)))
    acts = {sid: (x.with_(slew_limit=None) if x.kind == "SPS" else x) for sid, x in QUIET.actuators.items()}
    cfg = QUIET.with_(actuators=acts)
    table = calibrate_tree(VirtualDevice(cfg))
    dt = 0.1
    tr = play(VirtualDevice(cfg), table, [PulseSequence(0, (Segment(100, 200),), dt)], 500, dt)[0]
    rise, fall = measure_rise_fall(tr)
    assert abs(rise - oracle) < 0.01 and abs(fall - oracle) < 0.01
