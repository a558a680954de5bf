"""SiV photophysics: populations, Rabi flopping, photon streams, PLE and HBT.

Times are in ns, frequencies in GHz unless a name says MHz.  Monte-Carlo
routines take an explicit ``numpy.random.Generator`` and draw in fixed-size
chunks so results depend only on the seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import constants
from scipy.signal import lfilter

from .fitting import voigt

CHUNK = 1 << 20


class AnalysisError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class EmitterModel:
    """Two-level optical transition with a shelving state and charge blinking.

    ``excitation_rate`` and the shelving rates drive the continuous-wave HBT
    simulation; the effective bunching amplitude and time follow from them.
    """

    t1: float = 1.76
    rabi_over_2pi: float = 1.28
    rabi_damping: float = 3.0
    zpl_lorentzian_fwhm: float = 200.0
    spectral_diffusion_sigma: float = 50.0
    delta_gs: float = 50.0
    temperature: float = 5.0
    charge_init_prob: float = 0.60
    quantum_efficiency: float = 0.05
    excitation_rate: float = 0.05
    shelving_rate: float = 0.25
    deshelving_rate: float = 0.033

    def __post_init__(self):
        for name in ("t1", "rabi_over_2pi", "rabi_damping", "zpl_lorentzian_fwhm", "temperature",
                     "excitation_rate", "deshelving_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.spectral_diffusion_sigma < 0 or self.shelving_rate < 0 or self.delta_gs < 0:
            raise ValueError("widths and rates must be non-negative")
        for name in ("charge_init_prob", "quantum_efficiency"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def with_(self, **kw) -> "EmitterModel":
        return replace(self, **kw)

    @property
    def omega(self) -> float:
        """Rabi angular frequency (rad/ns)."""
        return 2 * math.pi * self.rabi_over_2pi

    @property
    def lower_occupancy(self) -> float:
        return boltzmann_lower_occupancy(self.delta_gs, self.temperature)

    def g2_parameters(self) -> tuple[float, float, float]:
        """(a, tau1, tau2) of the ideal three-level g2 for the CW rates.

        Rate-equation eigenvalues of ground/excited/shelf populations.
        """
        r, g, k, d = self.excitation_rate, 1 / self.t1, self.shelving_rate, self.deshelving_rate
        m = np.array([[-r, g, d], [r, -(g + k), 0.0], [0.0, k, -d]])
        lam = np.sort(np.linalg.eigvals(m).real)[:2]  # two non-zero, most negative first
        t1, t2 = -1 / lam[0], -1 / lam[1]
        # excited population after an emission (start in ground), normalised
        w, v = np.linalg.eig(m)
        p0 = np.array([1.0, 0.0, 0.0])
        coef = np.linalg.solve(v, p0)
        ss = None
        pe = {}
        for i, wi in enumerate(w):
            term = coef[i] * v[1, i]
            if abs(wi) < 1e-12:
                ss = term.real
            else:
                pe[-1 / wi.real] = term.real
        c1 = pe[min(pe, key=lambda x: abs(x - t1))] / ss
        c2 = pe[min(pe, key=lambda x: abs(x - t2))] / ss
        return float(c2), float(t1), float(t2)


@dataclass(frozen=True)
class DetectionChain:
    sideband_filter_transmission: float = 0.15
    apd_efficiency: float = 0.55
    geometric_efficiency: float = 0.149
    lower_ground_occupancy: float | None = None

    def __post_init__(self):
        for name in ("sideband_filter_transmission", "apd_efficiency", "geometric_efficiency"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")

    def occupancy(self, model: EmitterModel) -> float:
        if self.lower_ground_occupancy is not None:
            return self.lower_ground_occupancy
        return model.lower_occupancy

    @classmethod
    def unit(cls) -> "DetectionChain":
        return cls(1.0, 1.0, 1.0, 1.0)

    def efficiency(self, model: EmitterModel, include_charge: bool = True) -> float:
        """Detection probability per pi-pulse."""
        p = (
            self.geometric_efficiency
            * self.sideband_filter_transmission
            * self.apd_efficiency
            * self.occupancy(model)
            * model.quantum_efficiency
        )
        return p * (model.charge_init_prob if include_charge else 1.0)


# -- populations and budget --------------------------------------------------


def boltzmann_lower_occupancy(delta_gs: float, temperature: float) -> float:
    """Majority ground-branch population 1/(1 + exp(-h delta / kT)).

    The population ratio exp(-h delta / kT) is read as upper/lower so the
    lower branch is the more occupied one (62 % at 50 GHz and 5 K).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    r = math.exp(-constants.h * delta_gs * 1e9 / (constants.k * temperature))
    return 1.0 / (1.0 + r)


def collection_budget(
    raw_per_pulse: float,
    chain: DetectionChain,
    quantum_efficiency: float,
    occupancy: float | None = None,
    charge_state_prob: float = 1.0,
) -> float:
    """Collection efficiency inferred from the raw detection probability per pulse.

    ``raw / (filter * occupancy * apd * qe * charge)``; the charge factor is
    1 unless the caller wants to correct for blinking as well.
    """
    occ = chain.lower_ground_occupancy if occupancy is None else occupancy
    if occ is None:
        raise ValueError("occupancy must be given or set on the chain")
    factors = (chain.sideband_filter_transmission, occ, chain.apd_efficiency, quantum_efficiency, charge_state_prob)
    if any(not 0 < f <= 1 for f in factors):
        raise ValueError("every budget factor must lie in (0, 1]")
    if raw_per_pulse < 0:
        raise ValueError("raw_per_pulse must be non-negative")
    return raw_per_pulse / math.prod(factors)


# -- Rabi --------------------------------------------------------------------


def pi_pulse_length(model: EmitterModel) -> float:
    """pi / Omega in ns."""
    return math.pi / model.omega


def rabi_population(model: EmitterModel, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 0.5 * (1 - np.exp(-t / model.rabi_damping) * np.cos(model.omega * t))


def simulate_rabi(
    model: EmitterModel,
    pulse_len: float = 20.0,
    dt: float = 0.005,
    counts: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Excited population during a resonant pulse.

    With ``counts`` set, returns Poisson-sampled populations
    (``Poisson(counts * P) / counts``) instead of the exact curve.
    """
    if dt > 1 / model.omega / 20:
        raise SamplingError(f"dt={dt} ns too coarse for Omega; need <= {1 / model.omega / 20:.4g} ns")
    t = np.arange(int(round(pulse_len / dt)) + 1) * dt
    p = rabi_population(model, t)
    if counts is not None:
        rng = rng if rng is not None else np.random.default_rng()
        p = rng.poisson(counts * p) / counts
    return t, p


# -- pulsed lifetime ---------------------------------------------------------


@dataclass(frozen=True)
class LifetimeRun:
    delays: np.ndarray
    n_pulses: int
    n_detected: int
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def raw_per_pulse(self) -> float:
        return self.n_detected / self.n_pulses

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


def _epoch_bright(rng, n_epochs, p):
    return rng.random(n_epochs) < p


def simulate_pulsed_lifetime(
    model: EmitterModel,
    chain: DetectionChain,
    n_pulses: int,
    rng: np.random.Generator,
    period: float = 240.0,
    repump_period: float = 400e3,
    repump_length: float = 1e3,
    bin_width: float = 0.1,
    hist_range: float = 30.0,
    dark_per_pulse: float = 0.0,
) -> LifetimeRun:
    """Pi-pulse every ``period`` ns; charge state re-drawn at each repump.

    A pulse is detected with probability ``chain.efficiency(model, False)``
    when the charge state of its epoch is bright.  Detected delays are
    Exp(T1); dark counts are uniform over the period.
    """
    if period < 10 * model.t1:
        warnings.warn("pulse period shorter than 10 T1: emission overlaps the next pulse")
    per_epoch = max(1, int((repump_period - repump_length) // period))
    n_epochs = -(-n_pulses // per_epoch)
    bright = _epoch_bright(rng, n_epochs, model.charge_init_prob)
    p_det = chain.efficiency(model, include_charge=False)
    delays = []
    n_det = 0
    for start in range(0, n_pulses, CHUNK):
        idx = np.arange(start, min(start + CHUNK, n_pulses))
        hit = bright[idx // per_epoch] & (rng.random(idx.size) < p_det)
        k = int(hit.sum())
        d = rng.exponential(model.t1, size=k)
        if dark_per_pulse > 0:
            nd = rng.poisson(dark_per_pulse * idx.size)
            d = np.concatenate([d, rng.uniform(0, period, size=nd)])
        n_det += k
        delays.append(d)
    delays = np.concatenate(delays) if delays else np.zeros(0)
    edges = np.arange(0.0, hist_range + bin_width / 2, bin_width)
    counts, _ = np.histogram(delays, edges)
    return LifetimeRun(delays, n_pulses, n_det, edges, counts)


# -- PLE ---------------------------------------------------------------------


def ple_profile(model: EmitterModel, detunings) -> np.ndarray:
    """Voigt line shape normalised to 1 at line centre (detunings in MHz)."""
    x = np.asarray(detunings, dtype=float)
    v = voigt(x, 0.0, model.zpl_lorentzian_fwhm, model.spectral_diffusion_sigma)
    return v / voigt(np.array([0.0]), 0.0, model.zpl_lorentzian_fwhm, model.spectral_diffusion_sigma)[0]


def simulate_ple_scan(
    model: EmitterModel,
    detunings,
    rng: np.random.Generator,
    peak_counts: float = 400.0,
    background_counts: float = 0.0,
    center: float = 0.0,
) -> np.ndarray:
    """Poisson counts per dwell for a resonant-laser scan (MHz grid).

    ``peak_counts`` = 400 gives SNR 20 at line centre (shot-noise limited).
    """
    x = np.asarray(detunings, dtype=float)
    if x.size == 0:
        raise ValueError("empty detuning grid")
    rate = peak_counts * ple_profile(model, x - center) + background_counts
    return rng.poisson(rate).astype(float)


def ple_grid(model: EmitterModel, n: int = 201, span_linewidths: float = 10.0) -> np.ndarray:
    from .fitting import voigt_fwhm

    w = voigt_fwhm(model.zpl_lorentzian_fwhm, model.spectral_diffusion_sigma)
    return np.linspace(-span_linewidths / 2 * w, span_linewidths / 2 * w, n)


# -- HBT ---------------------------------------------------------------------


@dataclass(frozen=True)
class PhotonStream:
    detector: str
    timestamps: np.ndarray
    windows: np.ndarray  # (n, 2) gated-on intervals

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.timestamps.size


def emission_times(model: EmitterModel, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Photon emission times of one always-bright emitter under CW drive.

    Renewal process: from the ground state, excitation after Exp(r); from the
    excited state, decay (rate 1/T1, emits) or shelving; shelf returns to
    ground after Exp(deshelving).
    """
    r, g, k, d = model.excitation_rate, 1 / model.t1, model.shelving_rate, model.deshelving_rate
    p_shelve = k / (g + k)
    mean = (1 / r + 1 / (g + k)) / (1 - p_shelve) + (p_shelve / (1 - p_shelve)) / d
    out = []
    t0 = 0.0
    while t0 < duration:
        n = min(CHUNK, int((duration - t0) / mean * 1.1) + 100)
        loops = rng.geometric(1 - p_shelve, size=n) - 1  # shelving excursions per emission
        cycles = loops + 1
        dt = rng.gamma(cycles, 1 / r) + rng.gamma(cycles, 1 / (g + k))
        shelf = np.zeros(n)
        has = loops > 0
        shelf[has] = rng.gamma(loops[has], 1 / d)
        t = t0 + np.cumsum(dt + shelf)
        out.append(t[t < duration])
        t0 = float(t[-1])
    return np.concatenate(out) if out else np.zeros(0)


def gating_windows(duration: float, repump_period: float = 400e3, repump_length: float = 1e3) -> np.ndarray:
    starts = np.arange(0.0, duration, repump_period)
    win = np.column_stack([starts + repump_length, np.minimum(starts + repump_period, duration)])
    return win[win[:, 1] > win[:, 0]]


@dataclass(frozen=True)
class HBTConfig:
    duration: float = 1e8
    background_rate: float = 0.0  # photons/ns reaching the splitter
    detection_efficiency: float = 1.0
    jitter_sigma: float = 0.35 / 2.3548  # 350 ps FWHM per detector
    repump_period: float = 400e3
    repump_length: float = 1e3
    blinking: bool = True


def _split(times, rng, jitter, windows, eff):
    keep = rng.random(times.size) < eff if eff < 1 else np.ones(times.size, bool)
    times = times[keep]
    to_a = rng.random(times.size) < 0.5
    streams = []
    for name, sel in (("A", to_a), ("B", ~to_a)):
        t = times[sel]
        if jitter > 0:
            t = t + rng.normal(0.0, jitter, size=t.size)
        t = np.sort(t)
        idx = np.searchsorted(windows[:, 0], t, side="right") - 1
        ok = (idx >= 0) & (t < windows[np.clip(idx, 0, None), 1])
        t = t[ok]
        if t.size > 1:
            t = t[np.concatenate([[True], np.diff(t) > 0])]
        streams.append(PhotonStream(name, t, windows))
    return tuple(streams)


def simulate_hbt(
    models: Sequence[EmitterModel] | EmitterModel | None,
    cfg: HBTConfig,
    rng: np.random.Generator,
) -> tuple[PhotonStream, PhotonStream]:
    """Two gated detector streams behind a 50:50 splitter.

    ``models`` may be ``None`` (background only), one emitter, or several
    independent emitters whose emission is merged before the splitter.
    """
    if models is None:
        models = []
    elif isinstance(models, EmitterModel):
        models = [models]
    windows = gating_windows(cfg.duration, cfg.repump_period, cfg.repump_length)
    parts = []
    for m in models:
        t = emission_times(m, cfg.duration, rng)
        if cfg.blinking:
            n_ep = int(math.ceil(cfg.duration / cfg.repump_period))
            bright = rng.random(n_ep) < m.charge_init_prob
            t = t[bright[(t // cfg.repump_period).astype(int)]]
        parts.append(t)
    if cfg.background_rate > 0:
        nb = rng.poisson(cfg.background_rate * cfg.duration)
        parts.append(rng.uniform(0, cfg.duration, size=nb))
    times = np.sort(np.concatenate(parts)) if parts else np.zeros(0)
    return _split(times, rng, cfg.jitter_sigma, windows, cfg.detection_efficiency)


@dataclass(frozen=True)
class G2Histogram:
    tau: np.ndarray
    g2: np.ndarray
    coincidences: np.ndarray
    expected: np.ndarray

    @property
    def g2_err(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.coincidences, 1)) / self.expected


def g2_histogram(a: PhotonStream, b: PhotonStream, bin_width: float = 0.25, window: float = 100.0) -> G2Histogram:
    """Start-multistop delay histogram ``t_B - t_A`` normalised per gating window.

    The Poisson expectation for each bin is ``sum_w n_A(w) n_B(w) bin / T(w)``
    so charge-state blinking between windows does not raise the plateau.
    """
    ta, tb = a.timestamps, b.timestamps
    if ta.size == 0 or tb.size == 0:
        raise AnalysisError("empty photon stream")
    nb = int(round(window / bin_width))
    edges = (np.arange(-nb, nb + 2) - 0.5) * bin_width
    lo = np.searchsorted(tb, ta + edges[0], side="left")
    hi = np.searchsorted(tb, ta + edges[-1], side="left")
    counts = np.zeros(edges.size - 1)
    width = hi - lo
    for j in range(int(width.max()) if width.size else 0):
        sel = width > j
        d = tb[lo[sel] + j] - ta[sel]
        counts += np.histogram(d, edges)[0]
    windows = a.windows
    wa = np.searchsorted(windows[:, 0], ta, side="right") - 1
    wb = np.searchsorted(windows[:, 0], tb, side="right") - 1
    na = np.bincount(wa, minlength=len(windows))
    nbb = np.bincount(wb, minlength=len(windows))
    lengths = windows[:, 1] - windows[:, 0]
    expected_per_bin = float(np.sum(na * nbb / lengths)) * bin_width
    tau = 0.5 * (edges[1:] + edges[:-1])
    expected = np.full(tau.size, expected_per_bin)
    return G2Histogram(tau, counts / expected_per_bin, counts, expected)


def tune_background(
    model: EmitterModel,
    cfg: HBTConfig,
    seed: int,
    target: float = 0.10,
    fitter=None,
    lo: float = 0.0,
    hi: float | None = None,
    tol: float = 0.005,
    max_iter: int = 30,
) -> tuple[float, float]:
    """Bisection on the background rate so the fitted g2(0) hits ``target``.

    Every evaluation reuses ``seed``.  Returns ``(background_rate, fitted g2(0))``.
    """
    from .fitting import G2LorentzianRegressor

    fitter = fitter or G2LorentzianRegressor()

    def g0(bg):
        a, b = simulate_hbt(model, replace(cfg, background_rate=bg), np.random.default_rng(seed))
        h = g2_histogram(a, b)
        return float(fitter.fit(h.tau, h.g2).g2_zero_)

    if hi is None:
        hi = model.excitation_rate
    f_lo, f_hi = g0(lo), g0(hi)
    if not f_lo < target < f_hi:
        raise ValueError(f"target {target} not bracketed: [{f_lo:.3f}, {f_hi:.3f}]")
    mid, f_mid = lo, f_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = g0(mid)
        if abs(f_mid - target) < tol:
            break
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    return mid, f_mid


# -- pulsed emission ---------------------------------------------------------


def gate_train(pulse: float = 100.0, period: float = 250.0, n_periods: int = 4, dt: float = 0.1, lead: float = 0.0):
    n = int(round((lead + n_periods * period) / dt))
    t = np.arange(n) * dt - lead
    return ((t >= 0) & (np.mod(t, period) < pulse)).astype(float)


def pulsed_emission_trace(
    model: EmitterModel,
    gate: np.ndarray,
    dt: float,
    rng: np.random.Generator | None = None,
    peak_rate: float = 1.0,
    background_rate: float = 0.0,
    repetitions: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Expected fluorescence and (optionally) Poisson counts per bin.

    The fluorescence is the gate convolved with the normalised T1 decay, so
    it reaches ``peak_rate`` (counts/ns) on long pulses.  Returns
    ``(expected_counts, counts)``; ``counts`` is ``None`` without an rng.
    """
    g = np.clip(np.asarray(gate, dtype=float), 0.0, None)
    alpha = 1.0 - math.exp(-dt / model.t1)
    fl = lfilter([alpha], [1.0, alpha - 1.0], g)
    expected = (peak_rate * fl + background_rate) * dt * repetitions
    counts = rng.poisson(expected).astype(float) if rng is not None else None
    return expected, counts


# -- time tags ---------------------------------------------------------------


def write_time_tags(path, streams: Sequence[PhotonStream]) -> None:
    """One ``<detector> <timestamp_ns>`` line per photon, time ordered."""
    rows = sorted((float(t), s.detector) for s in streams for t in s.timestamps)
    with open(path, "w") as fh:
        for t, det in rows:
            fh.write(f"{det} {t!r}\n")


def read_time_tags(path) -> dict[str, np.ndarray]:
    out: dict[str, list[float]] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected '<detector> <timestamp>'")
            out.setdefault(parts[0], []).append(float(parts[1]))
    return {k: np.asarray(v) for k, v in out.items()}
