import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from apictwin.emitter import (
    AnalysisError,
    DetectionChain,
    EmitterModel,
    HBTConfig,
    PhotonStream,
    SamplingError,
    boltzmann_lower_occupancy,
    collection_budget,
    g2_histogram,
    gate_train,
    pi_pulse_length,
    ple_grid,
    ple_profile,
    pulsed_emission_trace,
    rabi_population,
    read_time_tags,
    simulate_hbt,
    simulate_ple_scan,
    simulate_pulsed_lifetime,
    simulate_rabi,
    write_time_tags,
)
from apictwin.fitting import ExponentialRegressor, fit_voigt

H, KB = 6.62607015e-34, 1.380649e-23  # exact SI values


def rng(seed=0):
    return np.random.default_rng(seed)


# -- populations and budget ----------------------------------------------------------


@pytest.mark.parametrize("ghz,expected", [(50.0, 0.618), (48.0, 0.613)])
def test_boltzmann_examples(ghz, expected):
    x = H * ghz * 1e9 / (KB * 5.0)
    assert abs(boltzmann_lower_occupancy(ghz, 5.0) - 1 / (1 + math.exp(-x))) < 1e-12
    assert abs(boltzmann_lower_occupancy(ghz, 5.0) - expected) < 5e-4


def test_boltzmann_high_temperature_limit():
    assert abs(boltzmann_lower_occupancy(50.0, 1e9) - 0.5) < 1e-9
    with pytest.raises(ValueError):
        boltzmann_lower_occupancy(50.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 500.0), st.floats(0.1, 300.0), st.floats(1.01, 10.0))
def test_boltzmann_sum_and_monotone(ghz, t, factor):
    lower = boltzmann_lower_occupancy(ghz, t)
    assert lower + (1 - lower) == 1.0 and 0.5 <= lower <= 1.0
    assert boltzmann_lower_occupancy(ghz, t * factor) <= lower


def test_budget_examples():
    eff = collection_budget(3.8e-4, DetectionChain(), 0.05, occupancy=0.62)
    assert abs(eff - 3.8e-4 / (0.15 * 0.62 * 0.55 * 0.05)) < 1e-15
    assert abs(eff - 0.149) < 1e-3
    assert collection_budget(0.37, DetectionChain.unit(), 1.0) == 0.37


def test_budget_inverse_proportional_to_apd():
    a = collection_budget(1e-4, DetectionChain(apd_efficiency=0.3), 0.05, occupancy=0.62)
    b = collection_budget(1e-4, DetectionChain(apd_efficiency=0.6), 0.05, occupancy=0.62)
    assert abs(a / b - 2.0) < 1e-12


def test_budget_zero_factor():
    with pytest.raises(ValueError):
        collection_budget(1e-4, DetectionChain(), 0.0, occupancy=0.62)
    with pytest.raises(ValueError):
        DetectionChain(apd_efficiency=0.0)
    with pytest.raises(ValueError):
        collection_budget(-1.0, DetectionChain.unit(), 1.0)


# -- Rabi --------------------------------------------------------------------------------


def test_rabi_examples():
    m = EmitterModel()
    assert abs(pi_pulse_length(m) * 1e3 - 390.625) < 0.05
    assert rabi_population(m, 0.0) == 0.0
    undamped = m.with_(rabi_damping=1e15)
    assert abs(rabi_population(undamped, pi_pulse_length(undamped)) - 1.0) < 1e-12


def test_rabi_sampling_guard():
    with pytest.raises(SamplingError):
        simulate_rabi(EmitterModel(), dt=0.01)
    t, p = simulate_rabi(EmitterModel())
    assert t[0] == 0.0 and abs(t[-1] - 20.0) < 1e-12 and np.all((p >= 0) & (p <= 1))


# -- pulsed lifetime -----------------------------------------------------------------------


BRIGHT = EmitterModel(quantum_efficiency=1.0, charge_init_prob=1.0)


def test_lifetime_unit_chain_raw_is_one():
    run = simulate_pulsed_lifetime(BRIGHT, DetectionChain.unit(), 10_000, rng(1))
    assert run.raw_per_pulse == 1.0


def test_lifetime_ks_and_fit():
    run = simulate_pulsed_lifetime(BRIGHT, DetectionChain.unit(), 1_000_000, rng(2))
    assert stats.kstest(run.delays, "expon", args=(0, 1.76)).pvalue > 0.01
    est = ExponentialRegressor().fit(run.bin_centers, run.counts)
    assert abs(est.lifetime_ / 1.76 - 1) < 0.02


def test_lifetime_overlap_warning():
    with pytest.warns(UserWarning, match="overlaps"):
        simulate_pulsed_lifetime(BRIGHT, DetectionChain.unit(), 100, rng(), period=10.0)


def test_forward_efficiency_default_chain():
    m = EmitterModel()
    p = DetectionChain().efficiency(m, include_charge=False)
    assert abs(p / 3.8e-4 - 1) < 0.01
    assert abs(DetectionChain().efficiency(m) / p - m.charge_init_prob) < 1e-15


@pytest.mark.slow
def test_budget_roundtrip_from_simulation():
    m = EmitterModel()
    run = simulate_pulsed_lifetime(m, DetectionChain(), 100_000_000, rng(3))
    eff = collection_budget(run.raw_per_pulse, DetectionChain(), m.quantum_efficiency,
                            occupancy=m.lower_occupancy, charge_state_prob=m.charge_init_prob)
    assert abs(eff / 0.149 - 1) < 0.02


# -- PLE ---------------------------------------------------------------------------------


def test_ple_lorentzian_recovered():
    m = EmitterModel(zpl_lorentzian_fwhm=150.0, spectral_diffusion_sigma=0.0)
    x = ple_grid(m)
    est = fit_voigt(x, simulate_ple_scan(m, x, rng(4)))
    assert abs(est.fwhm_ / 150.0 - 1) < 0.05


def test_ple_peak_at_center():
    m = EmitterModel()
    x = np.linspace(-1000, 1000, 401)
    assert x[np.argmax(ple_profile(m, x))] == 0.0 and ple_profile(m, np.array([0.0]))[0] == 1.0
    counts = simulate_ple_scan(m, x, rng(5), peak_counts=1e6, center=120.0)
    assert abs(fit_voigt(x, counts).center_ - 120.0) < 2.0


def test_ple_pure_gaussian():
    m = EmitterModel(zpl_lorentzian_fwhm=1e-3, spectral_diffusion_sigma=60.0)
    x = ple_grid(m)
    est = fit_voigt(x, simulate_ple_scan(m, x, rng(6), peak_counts=1e5))
    assert est.lorentz_fwhm_ < 0.02 * est.fwhm_


def test_ple_empty_grid():
    with pytest.raises(ValueError):
        simulate_ple_scan(EmitterModel(), [], rng())


# -- HBT ---------------------------------------------------------------------------------


def test_poisson_g2_is_flat():
    a, b = simulate_hbt(None, HBTConfig(duration=4e7, background_rate=0.05), rng(7))
    h = g2_histogram(a, b)
    assert np.max(np.abs(h.g2 - 1)) <= 0.05
    z = (h.g2 - 1) / h.g2_err
    # 801 bins: a 3-sigma excursion occurs on ~0.27 % of them by chance
    assert np.mean(np.abs(z) > 3) < 0.01 and np.max(np.abs(z)) < 5


def test_streams_strictly_increasing_and_gated():
    cfg = HBTConfig(duration=2e6, background_rate=0.05, repump_period=4e5, repump_length=1e4)
    for s in simulate_hbt(EmitterModel(), cfg, rng(8)):
        assert np.all(np.diff(s.timestamps) > 0)
        phase = np.mod(s.timestamps, 4e5)
        assert np.all(phase >= 1e4)
    with pytest.raises(ValueError):
        PhotonStream("A", np.array([1.0, 1.0]), np.zeros((0, 2)))


def _zero_g2(h, half_width=0.5):
    sel = np.abs(h.tau) < half_width
    n, e = h.coincidences[sel].sum(), h.expected[sel].sum()
    return n / e, math.sqrt(n) / e


@pytest.mark.slow
def test_thinning_invariance():
    cfg = HBTConfig(duration=1e9, blinking=False)
    ref = None
    for p in (1.0, 0.3, 0.1):
        a, b = simulate_hbt(EmitterModel(), HBTConfig(duration=cfg.duration, blinking=False, detection_efficiency=p), rng(9))
        g0, err = _zero_g2(g2_histogram(a, b))
        if ref is None:
            ref = (g0, err)
        assert abs(g0 - ref[0]) <= 3 * math.hypot(err, ref[1])


def test_empty_stream():
    a = PhotonStream("A", np.zeros(0), np.array([[0.0, 1.0]]))
    b = PhotonStream("B", np.array([0.5]), np.array([[0.0, 1.0]]))
    with pytest.raises(AnalysisError):
        g2_histogram(a, b)


# -- pulsed emission ---------------------------------------------------------------------


def test_emission_decays_between_pulses():
    dt, bg = 0.1, 0.01
    m = EmitterModel()
    gate = gate_train(100.0, 250.0, 4, dt)
    expected, _ = pulsed_emission_trace(m, gate, dt, background_rate=bg)
    t = np.arange(gate.size) * dt
    for k in range(4):
        after = (t >= k * 250 + 100 + 5 * m.t1) & (t < (k + 1) * 250)
        assert np.all(expected[after] - bg * dt <= math.exp(-5) * dt + 1e-12)


def test_duty_halving_halves_counts():
    dt = 0.1
    m = EmitterModel()
    full = gate_train(100.0, 250.0, 4, dt)
    half = gate_train(50.0, 250.0, 4, dt)
    e_full, c_full = pulsed_emission_trace(m, full, dt, rng(10), repetitions=1000)
    e_half, c_half = pulsed_emission_trace(m, half, dt, rng(11), repetitions=1000)
    assert abs(e_half.sum() / e_full.sum() - 0.5) < 1e-6
    n_full, n_half = c_full.sum(), c_half.sum()
    assert abs(n_half - 0.5 * n_full) <= 3 * math.sqrt(n_half + 0.25 * n_full)


def test_zero_gate_is_background_only():
    expected, counts = pulsed_emission_trace(EmitterModel(), np.zeros(500), 0.1, rng(12), background_rate=0.2)
    assert np.allclose(expected, 0.02)
    assert counts.shape == (500,)


def test_time_tags_roundtrip(tmp_path):
    a, b = simulate_hbt(EmitterModel(), HBTConfig(duration=1e6, background_rate=0.01), rng(13))
    write_time_tags(tmp_path / "tags.txt", [a, b])
    back = read_time_tags(tmp_path / "tags.txt")
    assert np.array_equal(back["A"], a.timestamps) and np.array_equal(back["B"], b.timestamps)


def test_time_tags_bad_line(tmp_path):
    (tmp_path / "bad.txt").write_text("A 1.0\nB\n")
    with pytest.raises(ValueError, match=":2:"):
        read_time_tags(tmp_path / "bad.txt")
