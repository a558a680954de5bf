"""``apictwin`` command line: one subcommand per experiment.

Every run writes its data files, a ``report.yaml`` with the measured numbers
and checks, and a ``manifest.yaml``.  Exit status is 0 when every check
passes, 1 when one fails and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import config as cfgmod
from . import io
from .calibration import CalibrationTable, calibrate_tree, pair_ids, sps_id
from .device import VirtualDevice
from .emitter import (
    DetectionChain,
    boltzmann_lower_occupancy,
    collection_budget,
    g2_histogram,
    pi_pulse_length,
    ple_grid,
    simulate_hbt,
    simulate_ple_scan,
    simulate_pulsed_lifetime,
    simulate_rabi,
    write_time_tags,
)
from .fitting import (
    DampedSineRegressor,
    ExponentialRegressor,
    G2LorentzianRegressor,
    G2ThreeLevelRegressor,
    VoigtRegressor,
    voigt_fwhm,
)
from .pulses import (
    crosstalk_experiment,
    demo_sequences,
    frequency_response,
    play,
    pulse_area_stats,
)
from .wire import RemoteBackend, serve

log = logging.getLogger("apictwin")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class Run:
    """Output directory, collected files and checks of one command."""

    def __init__(self, command: str, cfg: cfgmod.ExperimentConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.hash = cfgmod.config_hash(cfg)
        self.files: list[Path] = []
        self.checks: list[dict] = []
        self.results: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name, header, columns) -> None:
        self.files.append(io.write_csv(self.out / name, header, columns))

    def check(self, name: str, passed: bool, value, expected: str) -> None:
        self.checks.append({"name": name, "passed": bool(passed), "value": value, "expected": expected})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def finish(self) -> int:
        report = {
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "results": self.results,
            "checks": self.checks,
        }
        self.files.append(io.write_yaml(self.out / "report.yaml", report))
        self.files.append(io.write_yaml(self.out / "config.yaml", self.cfg.to_dict()))
        status = "pass" if self.passed else "fail"
        io.write_manifest(self.out, self.command, self.hash, self.cfg.seed, self.files, status)
        return EXIT_OK if self.passed else EXIT_FAIL


# -- device helpers ------------------------------------------------------------


@contextlib.contextmanager
def open_backend(spec: str, cfg: cfgmod.ExperimentConfig):
    if spec == "inprocess":
        yield VirtualDevice(cfgmod.build_device(cfg))
    elif spec.startswith("remote:"):
        with RemoteBackend(spec[len("remote:"):]) as dev:
            dev.reseed(cfg.seed)
            yield dev
    else:
        raise cfgmod.ConfigError(f"--backend: expected 'inprocess' or 'remote:<host:port>', got {spec!r}")


def _table(run: Run, dev, table_path) -> CalibrationTable:
    if table_path:
        return CalibrationTable.load(table_path)
    table = calibrate_tree(dev, cfgmod.calibration_plan(run.cfg), config_hash=run.hash)
    path = run.out / "calibration.yaml"
    table.save(path)
    run.files.append(path)
    return table


# -- device commands -------------------------------------------------------------


def cmd_calibrate(run: Run, dev, args) -> None:
    table = _table(run, dev, None)
    for key, e in table.entries.items():
        if e.sweep is not None:
            run.csv(f"sweeps/{key.replace('+', '_')}.csv", e.sweep["columns"], e.sweep["data"].T)
    run.results["stages"] = table.summary()
    run.check("status", table.status == "calibrated", table.status, "calibrated")
    worst = max(table["+".join(pair_ids(i))].extinction_db for i in range(4))
    run.check("switching_extinction_db", worst <= -40.0, worst, "<= -40")


def _static_levels(dev, table, ch) -> tuple[float, float]:
    """Channel output with its SPS held at bar and at cross (operating state)."""
    for sid, v in table.operating_voltages().items():
        dev.set_voltage(sid, v)
    _, sps = table.channel(ch)
    dev.set_voltage(sps_id(ch), sps.v_cross[0])
    p1 = dev.read_power(ch)
    dev.set_voltage(sps_id(ch), 0.0)
    p0 = dev.read_power(ch)
    return p0, p1


def cmd_pulse_demo(run: Run, dev, args) -> None:
    p = run.cfg.pulse
    table = _table(run, dev, args.table)
    seqs = cfgmod.pulse_sequences(run.cfg) or demo_sequences(p.dt)
    duration = max([p.demo_duration] + [s.end + 200.0 for s in seqs])
    levels = {s.channel: _static_levels(dev, table, s.channel) for s in seqs}
    traces = play(dev, table, seqs, duration, p.dt)
    t = traces[0].times
    run.csv("traces.csv", ["time_ns"] + [f"out{c}" for c in range(4)], [t] + [traces[c].samples for c in range(4)])
    segs = []
    worst = 0.0
    for s in seqs:
        lo, hi = levels[s.channel]
        x = traces[s.channel]
        for g in s.segments:
            if g.shape == "square":
                got = float(x.window(g.start + 0.25 * g.duration, g.start + 0.75 * g.duration).mean())
            else:
                got = float(x.window(g.start, g.stop + 50.0).max())
            want = lo + g.amplitude * (hi - lo)
            err = (got - want) / (hi - lo)
            segs.append({"channel": s.channel, "start": g.start, "duration": g.duration, "shape": g.shape,
                         "amplitude": g.amplitude, "level": got, "expected": want, "rel_error": err})
            if g.shape == "square":
                worst = max(worst, abs(err))
    run.results["segments"] = segs
    run.check("square_plateau_rel_error", worst <= 0.02, worst, "<= 0.02")


def cmd_freq_response(run: Run, dev, args) -> None:
    p = run.cfg.pulse
    table = _table(run, dev, args.table)
    freqs = np.arange(p.freq_min, p.freq_max + p.freq_step / 2, p.freq_step)
    fr = frequency_response(dev, table, p.channel, freqs, amplitude=p.freq_amplitude, dt=p.dt)
    run.csv("response.csv", ["freq_mhz", "response_db"], [fr.freqs, fr.response_db])
    run.results.update(f3db_mhz=fr.f3db, bias_v=fr.bias_v, amplitude_v=fr.amplitude_v, flags=list(fr.flags))
    run.check("f3db_mhz", fr.f3db is not None and abs(fr.f3db - 34.0) <= 2.0, fr.f3db, "34 +/- 2")
    if fr.freqs.max() >= 100.0:
        r100 = fr.at(100.0)
        run.results["response_100mhz_db"] = r100
        run.check("response_100mhz_db", r100 <= -6.0, r100, "<= -6")


def cmd_stability(run: Run, dev, args) -> None:
    p = run.cfg.pulse
    table = _table(run, dev, args.table)
    st = pulse_area_stats(dev, table, p.channel, p.n_pulses, p.on, p.off, p.dt)
    run.csv("areas.csv", ["pulse", "area"], [np.arange(st.n_pulses), st.areas])
    run.results.update(n_pulses=st.n_pulses, mean_area=st.mean_area, rel_sigma=st.rel_sigma)
    run.check("rel_sigma", abs(st.rel_sigma / 6.8e-4 - 1) <= 0.2, st.rel_sigma, "6.8e-4 +/- 20%")


def cmd_crosstalk(run: Run, dev, args) -> None:
    table = _table(run, dev, args.table)
    reports = [
        crosstalk_experiment(dev, table, ch, dt=run.cfg.pulse.dt, noise_floor=run.cfg.device.noise_floor)
        for ch in range(4)
    ]
    run.results["channels"] = [r.to_dict() for r in reports]
    for r in reports:
        run.check(f"channel_{r.active_channel}", r.passed, r.magnitude, "within noise floor")


# -- emitter commands --------------------------------------------------------------


def cmd_rabi(run: Run, args) -> None:
    model = cfgmod.emitter_model(run.cfg)
    t, p = simulate_rabi(model, counts=run.cfg.emitter.rabi_counts, rng=np.random.default_rng(run.cfg.seed))
    est = DampedSineRegressor().fit(t, p)
    run.csv("rabi.csv", ["time_ns", "population", "fit"], [t, p, est.predict(t)])
    f = est.omega_ / (2 * np.pi)
    pi_ps = pi_pulse_length(model) * 1e3
    run.results.update(fit=est.fit_result_.to_dict(), rabi_ghz=f, pi_pulse_ps=pi_ps)
    run.check("rabi_frequency", abs(f / model.rabi_over_2pi - 1) <= 0.03, f, f"{model.rabi_over_2pi} GHz +/- 3%")


def cmd_lifetime(run: Run, args) -> None:
    e = run.cfg.emitter
    model = cfgmod.emitter_model(run.cfg)
    chain = DetectionChain.unit() if e.lifetime_unit_chain else cfgmod.detection_chain(run.cfg)
    lr = simulate_pulsed_lifetime(model, chain, e.lifetime_pulses, np.random.default_rng(run.cfg.seed))
    est = ExponentialRegressor().fit(lr.bin_centers, lr.counts)
    run.csv("histogram.csv", ["delay_ns", "counts", "fit"], [lr.bin_centers, lr.counts, est.predict(lr.bin_centers)])
    ks = stats.kstest(lr.delays[:1_000_000], "expon", args=(0.0, model.t1))
    run.results.update(
        fit=est.fit_result_.to_dict(), t1_ns=est.lifetime_, detections=lr.n_detected,
        raw_per_pulse=lr.raw_per_pulse, ks_pvalue=float(ks.pvalue),
    )
    run.check("t1", abs(est.lifetime_ / model.t1 - 1) <= 0.02, est.lifetime_, f"{model.t1} ns +/- 2%")
    run.check("ks_exponential", ks.pvalue > 0.01, float(ks.pvalue), "> 0.01")


def cmd_ple(run: Run, args) -> None:
    e = run.cfg.emitter
    model = cfgmod.emitter_model(run.cfg)
    x = ple_grid(model, e.ple_points)
    y = simulate_ple_scan(model, x, np.random.default_rng(run.cfg.seed), peak_counts=e.ple_peak_counts)
    est = VoigtRegressor().fit(x, y)
    run.csv("ple.csv", ["detuning_mhz", "counts", "fit"], [x, y, est.predict(x)])
    true = voigt_fwhm(model.zpl_lorentzian_fwhm, model.spectral_diffusion_sigma)
    run.results.update(fit=est.fit_result_.to_dict(), fwhm_mhz=est.fwhm_, true_fwhm_mhz=true)
    run.check("fwhm", abs(est.fwhm_ / true - 1) <= 0.05, est.fwhm_, f"{true:.2f} MHz +/- 5%")


def cmd_g2(run: Run, args) -> None:
    e = run.cfg.emitter
    model = cfgmod.emitter_model(run.cfg)
    a, b = simulate_hbt(model, cfgmod.hbt_config(run.cfg), np.random.default_rng(run.cfg.seed))
    path = run.out / "timetags.txt"
    write_time_tags(path, [a, b])
    run.files.append(path)
    h = g2_histogram(a, b, e.g2_bin, e.g2_window)
    lor = G2LorentzianRegressor().fit(h.tau, h.g2)
    three = G2ThreeLevelRegressor().fit(h.tau, h.g2)
    run.csv("g2.csv", ["tau_ns", "g2", "coincidences", "lorentzian", "three_level"],
            [h.tau, h.g2, h.coincidences, lor.predict(h.tau), three.predict(h.tau)])
    run.results.update(
        photons={"A": len(a), "B": len(b)},
        lorentzian=lor.fit_result_.to_dict(), three_level=three.fit_result_.to_dict(),
        g2_zero_lorentzian=lor.g2_zero_, g2_zero_three_level=three.g2_zero_,
    )
    run.check("g2_zero", 0.06 <= lor.g2_zero_ <= 0.14, lor.g2_zero_, "[0.06, 0.14]")
    diff = abs(lor.g2_zero_ - three.g2_zero_)
    run.check("fit_agreement", diff <= 0.02, diff, "<= 0.02")


def cmd_budget(run: Run, args) -> None:
    e = run.cfg.emitter
    model = cfgmod.emitter_model(run.cfg)
    chain = cfgmod.detection_chain(run.cfg)
    occ = boltzmann_lower_occupancy(model.delta_gs, model.temperature)
    eff = collection_budget(e.raw_per_pulse, chain, model.quantum_efficiency, occupancy=e.budget_occupancy)
    run.results.update(boltzmann_occupancy=occ, geometric_efficiency=eff, raw_per_pulse=e.raw_per_pulse)
    run.check("boltzmann_occupancy", abs(occ - 0.618) <= 0.005, occ, "0.618 +/- 0.005")
    pct = 100 * eff
    run.check("collection_efficiency_percent", abs(pct - 15.0) <= 0.5, round(pct, 3), "15 +/- 0.5")


DEVICE_COMMANDS = {
    "calibrate": cmd_calibrate,
    "pulse-demo": cmd_pulse_demo,
    "freq-response": cmd_freq_response,
    "stability": cmd_stability,
    "crosstalk": cmd_crosstalk,
}
EMITTER_COMMANDS = {
    "rabi": cmd_rabi,
    "lifetime": cmd_lifetime,
    "ple": cmd_ple,
    "g2": cmd_g2,
    "budget": cmd_budget,
}


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apictwin", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: <output_dir>/<command>)")
    common.add_argument("--quiet", action="store_true", help="only print failures")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in DEVICE_COMMANDS:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--backend", default="inprocess", help="'inprocess' or 'remote:<host:port>'")
        if name != "calibrate":
            p.add_argument("--table", help="reuse a saved calibration table instead of calibrating")
    for name in EMITTER_COMMANDS:
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("serve", parents=[common], help="serve the virtual device over TCP")
    p.add_argument("--endpoint", help="host:port (default: config endpoint)")
    p = sub.add_parser("selftest", parents=[common], help="run the acceptance checks")
    p.add_argument("--only", type=int, nargs="*", help="criterion numbers to run")
    return ap


def _print_checks(run: Run, quiet: bool) -> None:
    for c in run.checks:
        if not quiet or not c["passed"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {run.command} {c['name']}: {c['value']} (expected {c['expected']})")
    if not quiet:
        print(f"wrote {run.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
        cfg = cfg.with_seed(args.seed)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "serve":
        endpoint = args.endpoint or cfg.endpoint
        srv = serve(VirtualDevice(cfgmod.build_device(cfg)), endpoint)
        print(f"serving on {srv.endpoint}", flush=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            srv.server_close()
        return EXIT_OK

    out = Path(args.out) if args.out else Path(cfg.output_dir) / args.command
    run = Run(args.command, cfg, out)
    if args.command == "selftest":
        from .acceptance import run_all

        results = run_all(args.only or None, echo=None if args.quiet else print)
        for c in results:
            run.check(f"criterion_{c.number}", c.passed, c.details, c.name)
        run.results["criteria"] = [{"number": c.number, "name": c.name, "passed": c.passed} for c in results]
    elif args.command in EMITTER_COMMANDS:
        EMITTER_COMMANDS[args.command](run, args)
    else:
        try:
            with open_backend(args.backend, cfg) as dev:
                DEVICE_COMMANDS[args.command](run, dev, args)
        except cfgmod.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    code = run.finish()
    _print_checks(run, args.quiet or args.command == "selftest")
    return code


if __name__ == "__main__":
    sys.exit(main())
