import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apictwin.actuation import TraceFormatError
from apictwin.calibration import calibrate_tree, sps_id
from apictwin.device import DeviceConfig, UnknownIdError, VirtualDevice, leakage_matrix, sweep_readings
from apictwin.mesh import LossBudget, MeshNetlist, port_powers
from apictwin.pulses import PulseSequence, Segment, compile_sequence


@pytest.fixture(scope="module")
def table():
    return calibrate_tree(VirtualDevice())


def test_ideal_zero_volts_sums_to_one():
    dev = VirtualDevice(DeviceConfig(detector_noise_floor=0.0))
    assert abs(sum(dev.read_power(p) for p in range(8)) - 1.0) < 1e-12


def test_reads_match_mesh_model():
    net = MeshNetlist.random(np.random.default_rng(4), offset_sigma=0.5)
    dev = VirtualDevice(DeviceConfig(netlist=net, detector_noise_floor=0.0))
    dev.set_voltage("PS21", 7.0)
    ph = {sid: 0.0 for sid in net.shifter_ids}
    ph["PS21"] = np.pi * 7.0 / 30.0
    assert np.allclose([dev.read_power(p) for p in range(8)], port_powers(net, ph), atol=1e-15)


def test_routing_bar_darkens_ports(table):
    dev = VirtualDevice()
    dev.set_voltage("PS00", table["PS00"].v_bar[0])
    floor = dev.config.detector_noise_floor
    assert dev.read_power(2) <= floor + 1e-9 and dev.read_power(3) <= floor + 1e-9


def test_dark_port_reading_bounded_by_noise():
    dev = VirtualDevice(DeviceConfig(detector_noise_floor=1e-6))
    dev.set_voltage("PS00", 15.0)
    for _ in range(200):
        r = dev.read_power(6)
        assert 0.0 <= r <= 5e-6


def test_unknown_id_and_port():
    dev = VirtualDevice()
    with pytest.raises(UnknownIdError):
        dev.set_voltage("PS99", 1.0)
    with pytest.raises(UnknownIdError):
        dev.read_power(9)
    with pytest.raises(UnknownIdError):
        dev.load_waveform("PS99", [0.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_power_conservation_with_noise_and_loss(seed, lossy):
    loss = LossBudget() if lossy else None
    floor = 1e-6
    dev = VirtualDevice(DeviceConfig(netlist=MeshNetlist.random(np.random.default_rng(seed)), loss=loss, seed=seed))
    rng = np.random.default_rng(seed + 1)
    for sid in dev.shifter_ids:
        dev.set_voltage(sid, float(rng.uniform(-12, 12)))
    total = sum(dev.read_power(p) for p in range(8))
    factor = loss.power_factor if loss else 1.0
    assert abs(total - factor) <= 2 * 8 * floor


def test_same_seed_same_readings():
    def run(seed):
        dev = VirtualDevice(DeviceConfig(seed=seed))
        out = []
        for v in np.linspace(-10, 10, 11):
            dev.set_voltage("PS10", v)
            out.append(dev.read_power(1))
        return out

    assert run(5) == run(5)
    assert run(5) != run(6)


def test_constant_trace_equals_static_read():
    dev = VirtualDevice(DeviceConfig(detector_noise_floor=0.0))
    dev.set_voltage("PS00", 3.0)
    tr = dev.run_trace(50.0, 1.0)
    for p in range(8):
        assert np.all(tr[p].samples == dev.read_power(p))


def test_square_pulse_reaches_cross_others_unchanged(table):
    dev = VirtualDevice(DeviceConfig(detector_noise_floor=0.0))
    for sid, v in table.operating_voltages().items():
        dev.set_voltage(sid, v)
    static = [dev.read_power(p) for p in range(4)]
    dev.set_voltage(sps_id(0), table[sps_id(0)].v_cross[0])
    cross = dev.read_power(0)
    dev.set_voltage(sps_id(0), 0.0)
    wave = compile_sequence(PulseSequence(0, (Segment(50, 200),)), table, 400.0)
    dev.load_waveform(sps_id(0), wave.samples)
    tr = dev.run_trace(400.0, 1.0)
    assert abs(tr[0].window(200, 250).mean() - cross) < 1e-6
    for p in (1, 2, 3):
        assert np.allclose(tr[p].samples, static[p], atol=1e-15)


def test_two_channels_superpose(table):
    def run(channels):
        dev = VirtualDevice(DeviceConfig(detector_noise_floor=0.0))
        for sid, v in table.operating_voltages().items():
            dev.set_voltage(sid, v)
        for ch in channels:
            w = compile_sequence(PulseSequence(ch, (Segment(30 + 40 * ch, 150),)), table, 300.0)
            dev.load_waveform(sps_id(ch), w.samples)
        return dev.run_trace(300.0, 1.0)

    both = run([0, 2])
    for ch in (0, 2):
        assert np.max(np.abs(both[ch].samples - run([ch])[ch].samples)) < 1e-12


def test_waveform_length_mismatch():
    dev = VirtualDevice()
    dev.load_waveform("PS40", np.zeros(10))
    with pytest.raises(TraceFormatError):
        dev.run_trace(20.0, 1.0)


def test_leakage_matrix_shape():
    m = leakage_matrix(0.01)
    assert m.shape == (4, 4) and np.all(np.diag(m) == 0) and m[0, 1] == 0.01


def test_sweep_matches_point_reads():
    cfg = DeviceConfig(netlist=MeshNetlist.random(np.random.default_rng(8)), detector_noise_floor=0.0)
    vs = np.linspace(-5, 5, 9)
    grid = sweep_readings(VirtualDevice(cfg), {"PS11": vs}, (3, 7))
    dev = VirtualDevice(cfg)
    for i, v in enumerate(vs):
        dev.set_voltage("PS11", v)
        assert np.allclose(grid[i], [dev.read_power(3), dev.read_power(7)], atol=1e-15)
