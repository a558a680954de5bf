"""Acceptance checks shared by the test suite and ``apictwin selftest``.

Each check returns a :class:`Criterion` with the measured numbers, so a
failure reports what was observed rather than just that it failed.
"""

from __future__ import annotations

import contextlib
import filecmp
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, stats

from . import config as cfgmod
from .calibration import CalibrationPlan, SweepSpec, calibrate_tree, pair_ids
from .device import DeviceConfig, VirtualDevice, leakage_matrix
from .emitter import (
    DetectionChain,
    EmitterModel,
    HBTConfig,
    boltzmann_lower_occupancy,
    collection_budget,
    g2_histogram,
    pi_pulse_length,
    ple_grid,
    simulate_hbt,
    simulate_ple_scan,
    simulate_pulsed_lifetime,
    simulate_rabi,
)
from .fitting import (
    DampedSineRegressor,
    ExponentialRegressor,
    G2LorentzianRegressor,
    G2ThreeLevelRegressor,
    VoigtRegressor,
    voigt_fwhm,
)
from .mesh import MeshNetlist
from .pulses import (
    PulseSequence,
    Segment,
    crosstalk_experiment,
    device_with_sps_noise,
    frequency_response,
    measure_rise_fall,
    play,
    pulse_area_stats,
    tune_drive_noise,
)


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {shown}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _default_setup(seed: int = 0):
    cfg = cfgmod.ExperimentConfig(seed=seed)
    dc = cfgmod.build_device(cfg)
    table = calibrate_tree(VirtualDevice(dc), cfgmod.calibration_plan(cfg))
    return cfg, dc, table


# 1 ------------------------------------------------------------------------


def routing_floor_numeric(mzi) -> float:
    """Minimum bar-port power of a routing MZI over theta (bounded scalar search)."""
    f = lambda th: abs(mzi.transfer(th)[0, 0]) ** 2
    best = min((optimize.minimize_scalar(f, bounds=(c - 1.0, c + 1.0), method="bounded",
                                         options={"xatol": 1e-12}) for c in np.linspace(-math.pi, math.pi, 7)),
               key=lambda r: r.fun)
    return float(best.fun)


def _contrast_seed(seed: int) -> tuple[list[float], list[float], float]:
    net = MeshNetlist.random(np.random.default_rng(seed), eta_range=(0.43, 0.57))
    table = calibrate_tree(VirtualDevice(DeviceConfig(netlist=net, seed=seed)))
    routing = [table[s].extinction_db for s in ("PS00", "PS10", "PS11")]
    switching = [table["+".join(pair_ids(i))].extinction_db for i in range(4)]
    err = 0.0
    for mzi in (net.stage1, *net.stage2):
        t1, k1 = mzi.coupler_in.t, mzi.coupler_in.k
        t2, k2 = mzi.coupler_out.t, mzi.coupler_out.k
        err = max(err, abs(routing_floor_numeric(mzi) - (t1 * t2 - k1 * k2) ** 2))
    return routing, switching, err


def c01_extinction_contrast(n_seeds: int = 100, workers: int | None = None) -> Criterion:
    # seeds are independent, so a process pool changes nothing but wall time
    workers = workers or min(8, os.cpu_count() or 1)
    if workers == 1:
        parts = [_contrast_seed(s) for s in range(n_seeds)]
    else:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_contrast_seed, range(n_seeds)))
    routing = [x for r, _, _ in parts for x in r]
    switching = [x for _, s, _ in parts for x in s]
    floor_err = max(e for _, _, e in parts)
    r = np.asarray(routing)
    q25, med, q75 = np.percentile(r, [25, 50, 75])
    ok = -35 <= q25 and q75 <= -20 and max(switching) <= -40 and floor_err <= 1e-9
    return Criterion(1, "extinction contrast", bool(ok), {
        "routing_median_db": float(med), "routing_iqr_db": [round(float(q25), 3), round(float(q75), 3)],
        "routing_in_band": float(np.mean((r >= -35) & (r <= -20))),
        "switching_worst_db": float(max(switching)), "floor_abs_err": floor_err,
    })


# 2 ------------------------------------------------------------------------


def c02_vpi_recovery() -> Criterion:
    _, _, table = _default_setup()
    periods = [table[s].fit["period"] for s in ("PS00", "PS10", "PS11")]
    worst = max(abs(p - 60.0) for p in periods)
    return Criterion(2, "V_pi recovery", worst <= 0.5, {"periods_v": [round(p, 4) for p in periods], "max_dev_v": worst})


# 3 ------------------------------------------------------------------------


def c03_frequency_response() -> Criterion:
    _, dc, table = _default_setup()
    fr = frequency_response(VirtualDevice(dc), table, 0)
    ok = fr.f3db is not None and abs(fr.f3db - 34.0) <= 2.0 and fr.at(100.0) <= -6.0
    return Criterion(3, "frequency response", bool(ok), {"f3db_mhz": fr.f3db, "resp_100mhz_db": fr.at(100.0)})


# 4 ------------------------------------------------------------------------


def c04_rise_time() -> Criterion:
    _, dc, table = _default_setup()
    trace = play(VirtualDevice(dc), table, [PulseSequence(0, (Segment(100.0, 200.0),))], 500.0)[0]
    rise, fall = measure_rise_fall(trace)
    return Criterion(4, "optical rise time", 10.0 <= rise <= 25.0, {"rise_ns": rise, "fall_ns": fall})


# 5 ------------------------------------------------------------------------


def c05_pulse_area(target: float = 6.8e-4) -> Criterion:
    cfg, dc, table = _default_setup()
    quiet = device_with_sps_noise(dc.with_(detector_noise_floor=0.0), 0.0)
    zero = pulse_area_stats(quiet, table, 0).rel_sigma
    sigma, _ = tune_drive_noise(lambda s: device_with_sps_noise(dc, s), table, target, lo=0.01, hi=1.0, rtol=0.01)
    # independent repeat at the bisected level with a different seed
    check = pulse_area_stats(device_with_sps_noise(dc.with_(seed=dc.seed + 1), sigma), table, 0).rel_sigma
    default = pulse_area_stats(VirtualDevice(dc), table, 0).rel_sigma
    ok = zero <= 1e-9 and abs(check / target - 1) <= 0.2 and abs(default / target - 1) <= 0.2
    return Criterion(5, "pulse-area stability", bool(ok), {
        "zero_noise_rel_sigma": zero, "bisected_sigma_v": sigma, "rel_sigma": check,
        "config_default_rel_sigma": default,
    })


# 6 ------------------------------------------------------------------------


def c06_crosstalk() -> Criterion:
    _, dc, table = _default_setup()
    quiet = DeviceConfig()
    clean = [crosstalk_experiment(VirtualDevice(quiet), table, ch) for ch in range(4)]
    leaky = [crosstalk_experiment(VirtualDevice(quiet.with_(crosstalk=leakage_matrix(0.01))), table, ch)
             for ch in range(4)]
    noisy = [crosstalk_experiment(VirtualDevice(dc), table, ch) for ch in range(4)]
    ok = (
        all(r.passed for r in clean + noisy)
        and not any(r.passed for r in leaky)
        and all(r.magnitude >= r.floor for r in leaky)
    )
    return Criterion(6, "crosstalk", bool(ok), {
        "default_max_dev": max(r.magnitude for r in clean),
        "drive_noise_max_dev": max(r.magnitude for r in noisy),
        "leaky_min_magnitude": min(r.magnitude for r in leaky),
    })


# 7-8 ----------------------------------------------------------------------


def c07_boltzmann() -> Criterion:
    p = boltzmann_lower_occupancy(50.0, 5.0)
    return Criterion(7, "Boltzmann occupancy", abs(p - 0.618) <= 0.005, {"occupancy": p})


def c08_collection_budget() -> Criterion:
    eff = collection_budget(3.8e-4, DetectionChain(), 0.05, occupancy=0.62)
    return Criterion(8, "collection budget", abs(eff - 0.149) <= 0.005, {"efficiency": eff})


# 9 ------------------------------------------------------------------------


def c09_lifetime(n_pulses: int = 10_000_000) -> Criterion:
    model = EmitterModel(quantum_efficiency=1.0)
    run = simulate_pulsed_lifetime(model, DetectionChain.unit(), n_pulses, np.random.default_rng(9))
    fit = ExponentialRegressor().fit(run.bin_centers, run.counts)
    ks = stats.kstest(run.delays[:1_000_000], "expon", args=(0.0, model.t1))
    ok = abs(fit.lifetime_ / model.t1 - 1) <= 0.02 and ks.pvalue > 0.01
    return Criterion(9, "lifetime closure", bool(ok), {
        "t1_fit_ns": fit.lifetime_, "detections": run.n_detected, "ks_p": float(ks.pvalue),
    })


# 10 -----------------------------------------------------------------------


def c10_rabi() -> Criterion:
    model = EmitterModel()
    t, p = simulate_rabi(model, counts=1000, rng=np.random.default_rng(10))
    fit = DampedSineRegressor().fit(t, p)
    f = fit.omega_ / (2 * math.pi)
    pi_ps = pi_pulse_length(model) * 1e3
    ok = abs(f / 1.28 - 1) <= 0.03 and abs(pi_ps - 390.6) <= 0.05
    return Criterion(10, "Rabi closure", bool(ok), {"rabi_ghz": f, "pi_pulse_ps": pi_ps})


# 11 -----------------------------------------------------------------------


def c11_g2() -> Criterion:
    cfg = cfgmod.ExperimentConfig()
    model, hbt = cfgmod.emitter_model(cfg), cfgmod.hbt_config(cfg)
    a, b = simulate_hbt(None, replace(hbt, background_rate=0.05), np.random.default_rng(110))
    poisson = g2_histogram(a, b)
    poisson_dev = float(np.max(np.abs(poisson.g2 - 1)))

    a, b = simulate_hbt(model, hbt, np.random.default_rng(111))
    h = g2_histogram(a, b)
    lor = G2LorentzianRegressor().fit(h.tau, h.g2).g2_zero_
    three = G2ThreeLevelRegressor().fit(h.tau, h.g2).g2_zero_

    pair = [model.with_(charge_init_prob=1.0)] * 2
    a, b = simulate_hbt(pair, replace(hbt, background_rate=0.0), np.random.default_rng(112))
    h2 = g2_histogram(a, b)
    zero = G2LorentzianRegressor().fit(h2.tau, h2.g2).g2_zero_
    raw = float(h2.g2[np.argmin(np.abs(h2.tau))])

    ok = poisson_dev <= 0.05 and 0.06 <= lor <= 0.14 and abs(zero - 0.5) <= 0.05 and abs(lor - three) <= 0.02
    return Criterion(11, "g2 suite", bool(ok), {
        "poisson_max_dev": poisson_dev, "g2_0_lorentzian": lor, "g2_0_three_level": three,
        "two_emitter_g2_0": zero, "two_emitter_zero_bin": raw,
    })


# 12 -----------------------------------------------------------------------


def c12_voigt(linewidths=(150.0, 200.0, 250.0, 290.0), gauss_sigma: float = 30.0) -> Criterion:
    errs = {}
    for i, lw in enumerate(linewidths):
        model = EmitterModel(zpl_lorentzian_fwhm=lw, spectral_diffusion_sigma=gauss_sigma)
        x = ple_grid(model)
        y = simulate_ple_scan(model, x, np.random.default_rng(120 + i), peak_counts=400.0)
        fit = VoigtRegressor().fit(x, y)
        errs[lw] = fit.fwhm_ / voigt_fwhm(lw, gauss_sigma) - 1
    worst = max(abs(e) for e in errs.values())
    return Criterion(12, "Voigt/PLE closure", worst <= 0.05, {"max_rel_fwhm_err": worst})


# 13 -----------------------------------------------------------------------


def random_messages(n: int, rng: np.random.Generator):
    from .wire import WireCommand, WireReply

    ids = ["PS00", "PS10", "PS11"] + [f"PS{a}{b}" for a in (2, 3, 4) for b in range(4)]
    out = []
    for _ in range(n):
        k = int(rng.integers(0, 9))
        x = float(rng.normal(0, 10) * 10.0 ** int(rng.integers(-8, 8)))
        if k == 0:
            out.append(WireCommand("SETV", (ids[int(rng.integers(len(ids)))], x)))
        elif k == 1:
            out.append(WireCommand("GETP", (int(rng.integers(0, 64)),)))
        elif k == 2:
            out.append(WireCommand("LOADW", (ids[int(rng.integers(len(ids)))],),
                                   tuple(rng.normal(0, 5, size=int(rng.integers(0, 6))).tolist())))
        elif k == 3:
            out.append(WireCommand("RUNTRACE", (abs(x) + 1.0, float(rng.uniform(0.1, 2)))))
        elif k == 4:
            out.append(WireCommand("SEED", (int(rng.integers(0, 2**63)) * 2 + int(rng.integers(0, 2)),)))
        elif k == 5:
            out.append(WireCommand(["HELLO", "BYE"][int(rng.integers(2))]))
        elif k == 6:
            out.append(WireReply(True, repr(x)))
        elif k == 7:
            out.append(WireReply(True))
        else:
            out.append(WireReply(False, f"message {int(rng.integers(1000))}", int(rng.choice([400, 404, 503]))))
    return out


def roundtrip_ok(msg) -> bool:
    from .wire import WireCommand, parse_message, parse_reply

    if isinstance(msg, WireCommand):
        return parse_message(msg.encode().decode("ascii")) == msg
    return parse_reply(msg.encode().decode("ascii")[:-1]) == msg


def c13_wire(n_messages: int = 10_000, step_2d: float = 1.0) -> Criterion:
    from .wire import RemoteBackend, serving

    net = MeshNetlist.random(np.random.default_rng(13), eta_range=(0.43, 0.57), offset_sigma=0.3)
    dc = DeviceConfig(netlist=net, seed=13)
    plan = CalibrationPlan(sweep_2d=SweepSpec(step=step_2d))
    local = calibrate_tree(VirtualDevice(dc), plan)
    with serving(VirtualDevice(dc)) as srv, RemoteBackend(srv.endpoint) as remote:
        wired = calibrate_tree(remote, plan)
    diff = max(
        abs(x - y)
        for k in local.entries
        for x, y in zip(local[k].v_cross + local[k].v_bar, wired[k].v_cross + wired[k].v_bar)
    )
    msgs = random_messages(n_messages, np.random.default_rng(130))
    bad = sum(not roundtrip_ok(m) for m in msgs)
    return Criterion(13, "wire loopback", diff <= 1e-9 and bad == 0, {
        "max_voltage_diff": diff, "messages": len(msgs), "roundtrip_failures": bad,
    })


# 14 -----------------------------------------------------------------------

FAST_CONFIG = """\
seed: 5
calibration:
  step_2d: 1.0
pulse:
  n_pulses: 50
  freq_min: 1.0
  freq_max: 100.0
  freq_step: 3.0
emitter:
  hbt_duration: 5.0e+7
  lifetime_pulses: 200000
  ple_points: 101
"""

DETERMINISTIC_COMMANDS = (
    "calibrate", "pulse-demo", "freq-response", "stability", "crosstalk",
    "rabi", "lifetime", "ple", "g2", "budget",
)


def c14_determinism(commands=DETERMINISTIC_COMMANDS) -> Criterion:
    from .cli import main

    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "fast.yaml").write_text(FAST_CONFIG)
        for cmd in commands:
            dirs = []
            for rep in ("a", "b"):
                d = tmp / rep / cmd
                with contextlib.redirect_stdout(io.StringIO()):
                    main([cmd, "--config", str(tmp / "fast.yaml"), "--out", str(d), "--quiet"])
                dirs.append(d)
            files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
            files = [f for f in files if f.name != "manifest.yaml"]
            if not files or any(not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False) for f in files):
                mismatched.append(cmd)
    return Criterion(14, "CLI determinism", not mismatched, {"commands": len(commands), "mismatched": mismatched})


CHECKS: dict[int, Callable[[], Criterion]] = {
    1: c01_extinction_contrast,
    2: c02_vpi_recovery,
    3: c03_frequency_response,
    4: c04_rise_time,
    5: c05_pulse_area,
    6: c06_crosstalk,
    7: c07_boltzmann,
    8: c08_collection_budget,
    9: c09_lifetime,
    10: c10_rabi,
    11: c11_g2,
    12: c12_voigt,
    13: c13_wire,
    14: c14_determinism,
}


def run_all(numbers=None, echo=print) -> list[Criterion]:
    out = []
    for n in numbers or CHECKS:
        c = CHECKS[n]()
        if echo:
            echo(c.line())
        out.append(c)
    return out
