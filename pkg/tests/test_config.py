import numpy as np
import pytest

from apictwin import config as cfgmod
from apictwin.config import ConfigError, ExperimentConfig, config_hash, dumps, loads


def test_empty_config_is_default():
    assert loads("") == ExperimentConfig()
    assert loads("seed: 0\n") == ExperimentConfig()


@pytest.mark.parametrize(
    "text,anchor,needle",
    [
        ("seed: 1\noutput_dir: x\nbogus: 2\n", "<config>:3:", "unknown key 'bogus'"),
        ("seed: abc\n", "<config>:1:", "seed must be an integer"),
        ("device:\n  cps:\n    vpi: 3\n", "<config>:3:", "device.cps.vpi"),
        ("pulse:\n  dt: true\n", "<config>:2:", "pulse.dt must be a number"),
        ("seed: 1\nseed: 2\n", "<config>:2:", "duplicate key"),
        ("seed: 1\nemitter:\n  model:\n    t1: -1.0\n", "<config>:2:", "t1 must be positive"),
        ("device: [1, 2]\n", "<config>:1:", "must be a mapping"),
        ("seed: [\n", "<config>:", ""),
    ],
)
def test_line_anchored_errors(text, anchor, needle):
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert str(info.value).startswith(anchor) and needle in str(info.value)


def test_file_source_in_anchor(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 3\ncalibration:\n  step_1d: x\n")
    with pytest.raises(ConfigError, match=r"bad\.yaml:3:"):
        cfgmod.load(p)


def test_dump_roundtrip_and_hash():
    cfg = loads("seed: 7\ndevice:\n  eta_range: [0.45, 0.55]\n  offsets: {PS00: 0.1}\n")
    assert loads(dumps(cfg)) == cfg
    assert config_hash(loads(dumps(cfg))) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(cfg.with_seed(8))
    assert len(config_hash(cfg)) == 16


def test_builders():
    cfg = loads("seed: 4\ndevice:\n  eta_range: [0.43, 0.57]\n  crosstalk: 0.01\n")
    dc = cfgmod.build_device(cfg)
    assert np.allclose(dc.crosstalk, 0.01 * (1 - np.eye(4)))
    assert dc.actuators["PS40"].noise_sigma == cfgmod.SPS_NOISE_SIGMA
    etas = [c.eta for c in dc.netlist.couplers]
    assert all(0.43 <= e <= 0.57 for e in etas)
    assert cfgmod.build_device(cfg).netlist == dc.netlist
    assert cfgmod.build_device(cfg.with_seed(5)).netlist != dc.netlist


def test_explicit_sequences():
    cfg = loads(
        "pulse:\n  sequences:\n    - channel: 2\n      segments:\n"
        "        - {start: 10, duration: 50, shape: gaussian, amplitude: 0.5}\n"
    )
    (seq,) = cfgmod.pulse_sequences(cfg)
    assert seq.channel == 2 and seq.segments[0].shape == "gaussian"
    with pytest.raises(ConfigError, match="<config>:1: pulse"):
        loads("pulse:\n  sequences:\n    - channel: 9\n      segments: []\n")
