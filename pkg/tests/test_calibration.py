import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apictwin.actuation import ActuatorModel
from apictwin.calibration import (
    CalibrationAborted,
    CalibrationInconsistency,
    CalibrationPlan,
    CalibrationTable,
    SweepSpec,
    TreeCalibrator,
    calibrate_routing_mzi,
    calibrate_sps,
    calibrate_switching_pair,
    calibrate_tree,
    pair_ids,
    route_to_channel,
    sps_id,
)
from apictwin.device import DeviceConfig, VirtualDevice, default_actuators
from apictwin.mesh import MeshNetlist

BOTTOM = (2, 3, 6, 7)
TOP = (0, 1, 4, 5)


def quiet(**kw):
    return VirtualDevice(DeviceConfig(detector_noise_floor=0.0, **kw))


def routed(dev, table, ch):
    for sid, v in route_to_channel(table, ch).items():
        dev.set_voltage(sid, v)
    return dev


@pytest.fixture(scope="module")
def ideal_table():
    return calibrate_tree(quiet())


# -- sweep spec --------------------------------------------------------------------


def test_sweep_spec_grid():
    assert SweepSpec().voltages().size == 501
    assert SweepSpec(step=0.25).voltages()[[0, -1]].tolist() == [-25.0, 25.0]
    with pytest.raises(ValueError):
        SweepSpec(1.0, -1.0)
    with pytest.raises(ValueError):
        SweepSpec(step=0.0)


# -- routing -------------------------------------------------------------------------


def test_routing_ideal_matches_analytic():
    # bottom branch carries cos^2(theta/2), theta = pi v / 30 + pi/2
    e = calibrate_routing_mzi(quiet(), "PS00", BOTTOM)
    assert abs(e.v_bar[0] - 15.0) <= 0.1
    assert abs(e.v_cross[0] + 15.0) <= 0.1
    assert abs(e.fit["period"] - 60.0) < 0.5
    assert e.extinction_db <= 0 and e.v_cross != e.v_bar


def test_routing_phase_offset_shifts_voltages():
    net = MeshNetlist.ideal()
    acts = dict(default_actuators(net))
    acts["PS00"] = replace(ActuatorModel.cps(), phase_offset=math.pi / 3)
    base = calibrate_routing_mzi(quiet(), "PS00", BOTTOM)
    shifted = calibrate_routing_mzi(quiet(actuators=acts), "PS00", BOTTOM)
    assert abs((shifted.v_bar[0] - base.v_bar[0]) - (-(math.pi / 3) / math.pi * 30.0)) < 1e-6


def test_routing_swapped_port_exchanges_states():
    a = calibrate_routing_mzi(quiet(), "PS00", BOTTOM)
    b = calibrate_routing_mzi(quiet(), "PS00", TOP)
    assert abs(a.v_cross[0] - b.v_bar[0]) < 1e-6
    assert abs(a.v_bar[0] - b.v_cross[0]) < 1e-6


def test_routing_mismatched_couplers_extinction_band():
    # the single-shifter null is limited by the mismatch between its two couplers
    net = MeshNetlist.build(etas=[0.45] + [0.5] * 17)
    e = calibrate_routing_mzi(quiet(netlist=net), "PS00", BOTTOM)
    assert -35.0 <= e.extinction_db <= -20.0


# -- switching pair ------------------------------------------------------------------


def test_switching_ideal_numerics_limited(ideal_table):
    for ch in range(4):
        assert ideal_table["+".join(pair_ids(ch))].extinction_db <= -60.0


def test_switching_imbalanced_exceeds_40db():
    table = calibrate_tree(quiet(netlist=MeshNetlist.build(etas=[0.45] * 18)))
    for ch in range(4):
        assert table["+".join(pair_ids(ch))].extinction_db <= -40.0


def test_switching_quarter_grid_flags_boundary(ideal_table):
    dev = routed(quiet(), ideal_table, 0)
    a, b = pair_ids(0)
    # ideal nulls sit at (-15, -15) and (15, 15); a 12.5 V window between them
    e = calibrate_switching_pair(dev, a, b, (0,), SweepSpec(-5.0, 7.5, 0.25))
    assert "bar_on_grid_boundary" in e.flags
    assert e.extinction_db > -20.0


def test_refinement_never_worse(ideal_table):
    for ch in range(4):
        m = ideal_table["+".join(pair_ids(ch))].metrics
        assert m["refined_bar_power"] <= m["grid_min_power"]
        assert m["refined_cross_power"] >= m["grid_max_power"]


@settings(max_examples=20, deadline=None)
@given(st.floats(-1.0, 1.0))
def test_bar_invariant_to_phi_psi_transfer(ideal_table, delta):
    dev = routed(quiet(), ideal_table, 1)
    a, b = pair_ids(1)
    va, vb = ideal_table[f"{a}+{b}"].v_bar
    for sid, v in ((a, va), (b, vb), (sps_id(1), 0.0)):
        dev.set_voltage(sid, v)
    p0 = dev.read_power(1)
    dev.set_voltage(b, vb + delta * 30.0 / math.pi)
    dev.set_voltage(sps_id(1), -delta * 10.0 / math.pi)
    assert abs(dev.read_power(1) - p0) < 1e-12


# -- SPS -------------------------------------------------------------------------------


def test_sps_ideal(ideal_table):
    for ch in range(4):
        e = ideal_table[sps_id(ch)]
        assert abs(e.metrics["bar_offset_v"]) <= 0.1
        assert abs(abs(e.v_cross[0]) - 10.0) <= 0.2
        assert e.v_bar == (0.0,) and not e.flags


def test_sps_pair_mis_set_to_cross(ideal_table):
    dev = routed(quiet(), ideal_table, 2)
    a, b = pair_ids(2)
    for sid, v in zip((a, b), ideal_table[f"{a}+{b}"].v_cross):
        dev.set_voltage(sid, v)
    with pytest.warns(CalibrationInconsistency):
        e = calibrate_sps(dev, sps_id(2), (2,))
    assert "bar_not_at_zero" in e.flags
    assert abs(e.v_cross[0]) <= 0.1


# -- tree ------------------------------------------------------------------------------


def test_tree_coverage(ideal_table):
    assert len(ideal_table) == 11 and ideal_table.shifter_count == 15
    assert ideal_table.status == "calibrated"


def test_tree_deterministic():
    def run():
        net = MeshNetlist.random(np.random.default_rng(21), offset_sigma=0.4)
        return calibrate_tree(VirtualDevice(DeviceConfig(netlist=net, seed=3))).to_dict()

    assert run() == run()


def test_channel_independence():
    net = MeshNetlist.random(np.random.default_rng(8), offset_sigma=0.3)
    full = calibrate_tree(quiet(netlist=net))
    only = calibrate_tree(quiet(netlist=net), CalibrationPlan(channels=(2,)))
    for key in ("+".join(pair_ids(2)), sps_id(2)):
        assert only[key].to_dict() == full[key].to_dict()
    assert "+".join(pair_ids(0)) not in only


def test_operating_state_routes_nothing_to_outputs(ideal_table):
    dev = quiet()
    TreeCalibrator().fit(dev)
    assert max(dev.read_power(p) for p in range(4)) < 1e-6


def test_table_yaml_roundtrip(ideal_table, tmp_path):
    ideal_table.save(tmp_path / "t.yaml")
    back = CalibrationTable.load(tmp_path / "t.yaml")
    assert back.to_dict() == ideal_table.to_dict()
    assert CalibrationTable.loads(ideal_table.dumps()).to_dict() == ideal_table.to_dict()


def test_abort_keeps_partial_table():
    class Broken(VirtualDevice):
        def set_voltage(self, sid, v):
            if sid == "PS21" and v != 0.0:
                raise RuntimeError("driver fault")
            super().set_voltage(sid, v)

    with pytest.raises(CalibrationAborted) as info:
        calibrate_tree(Broken(DeviceConfig(detector_noise_floor=0.0)))
    err = info.value
    assert err.stage == "PS21+PS31"
    assert set(err.table.entries) == {"PS00", "PS10", "PS11", "PS20+PS30", "PS40"}
    assert err.table.status != "calibrated"


def test_tree_calibrator_estimator():
    est = TreeCalibrator(step_2d=0.5)
    assert est.get_params()["step_2d"] == 0.5
    dev = quiet()
    est.fit(dev)
    other = quiet()
    est.transform(other)
    assert all(other.read_power(p) == dev.read_power(p) for p in range(8))
