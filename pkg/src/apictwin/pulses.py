"""Pulse carving on the SPS channels and the dynamic characterisations.

Amplitudes are fractions of the calibrated cross-state transmission.  A
sequence compiles to SPS drive voltages by inverting the fitted SPS sine,
so an amplitude of 0.5 gives half the optical power rather than half the
cross voltage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .actuation import TimeTrace
from .calibration import CalibrationTable, sps_id
from .device import DeviceBackend, DeviceConfig, VirtualDevice


class AnalysisError(ValueError):
    """A trace does not contain the feature an analysis needs."""


# -- sequences ---------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """One pulse.  Gaussian pulses are centred in their window.

    ``sigma`` (ns) defaults to ``duration / 12`` so the window spans +/-6 sigma.
    """

    start: float
    duration: float
    shape: str = "square"
    amplitude: float = 1.0
    sigma: float | None = None

    def __post_init__(self):
        if self.shape not in ("square", "gaussian"):
            raise ValueError(f"unknown pulse shape {self.shape!r}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in [0, 1]")
        if not self.duration >= 0:
            raise ValueError("duration must be non-negative")
        if self.shape == "gaussian" and self.duration > 0 and self.width <= 0:
            raise ValueError("gaussian sigma must be positive")

    @property
    def stop(self) -> float:
        return self.start + self.duration

    @property
    def width(self) -> float:
        return self.sigma if self.sigma is not None else self.duration / 12.0

    def envelope(self, t: np.ndarray) -> np.ndarray:
        inside = (t >= self.start) & (t < self.stop)
        if self.shape == "square":
            return np.where(inside, self.amplitude, 0.0)
        c = self.start + self.duration / 2
        return np.where(inside, self.amplitude * np.exp(-0.5 * ((t - c) / self.width) ** 2), 0.0)

    def area(self) -> float:
        """Analytic envelope area (amplitude x ns)."""
        if self.shape == "square":
            return self.amplitude * self.duration
        s = self.width
        return self.amplitude * s * math.sqrt(2 * math.pi) * math.erf(self.duration / (2 * math.sqrt(2) * s))

    def shifted(self, delta: float) -> "Segment":
        return Segment(self.start + delta, self.duration, self.shape, self.amplitude, self.sigma)


@dataclass(frozen=True)
class PulseSequence:
    channel: int
    segments: tuple[Segment, ...] = ()
    dt: float = 1.0

    def __post_init__(self):
        if self.channel not in range(4):
            raise ValueError("channel must be 0..3")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        segs = tuple(sorted(self.segments, key=lambda s: s.start))
        for a, b in zip(segs, segs[1:]):
            if b.start < a.stop:
                raise ValueError(f"segments overlap at {b.start} ns")
        object.__setattr__(self, "segments", segs)

    @property
    def end(self) -> float:
        return max((s.stop for s in self.segments), default=0.0)

    def envelope(self, n: int) -> np.ndarray:
        t = np.arange(n) * self.dt
        env = np.zeros(n)
        for s in self.segments:
            env += s.envelope(t)
        return env

    def shifted(self, delta: float) -> "PulseSequence":
        return PulseSequence(self.channel, tuple(s.shifted(delta) for s in self.segments), self.dt)

    @classmethod
    def train(cls, channel, n, on=200.0, off=200.0, start=0.0, amplitude=1.0, dt=1.0):
        period = on + off
        segs = tuple(Segment(start + k * period, on, "square", amplitude) for k in range(n))
        return cls(channel, segs, dt)


# -- compilation -------------------------------------------------------------


def _sine(fit: Mapping[str, float], v):
    return fit["amplitude"] * np.sin(2 * np.pi * np.asarray(v) / fit["period"] + fit["phase"]) + fit["offset"]


def amplitude_to_voltage(table: CalibrationTable, channel: int, amplitude) -> np.ndarray:
    """Invert the fitted SPS transmission for amplitude fractions in [0, 1].

    Targets ``T(0) + a * (T(v_cross) - T(0))`` on the fitted curve, so 0 maps
    to 0 V and 1 to ``v_cross`` exactly.  Vectorised bisection on [0, v_cross].
    """
    _, entry = table.channel(channel)
    a = np.asarray(amplitude, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("amplitudes must lie in [0, 1]")
    vc = entry.v_cross[0]
    p0, p1 = _sine(entry.fit, 0.0), _sine(entry.fit, vc)
    target = p0 + a * (p1 - p0)
    lo, hi = np.zeros_like(a), np.ones_like(a)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = (_sine(entry.fit, mid * vc) - target) * (p1 - p0) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    u = 0.5 * (lo + hi)
    u = np.where(a == 0, 0.0, np.where(a == 1, 1.0, u))
    return u * vc


def compile_sequence(seq: PulseSequence, table: CalibrationTable, duration: float | None = None) -> TimeTrace:
    """SPS drive voltage trace for ``seq``; bar (0 V) outside pulses."""
    duration = seq.end if duration is None else duration
    n = int(round(duration / seq.dt))
    env = seq.envelope(n)
    volts = np.zeros(n)
    on = env > 0
    if on.any():
        uniq, inv = np.unique(env[on], return_inverse=True)
        volts[on] = amplitude_to_voltage(table, seq.channel, uniq)[inv]
    return TimeTrace(volts, seq.dt)


def play(
    dev: DeviceBackend,
    table: CalibrationTable,
    sequences: Iterable[PulseSequence],
    duration: float,
    dt: float = 1.0,
) -> dict[int, TimeTrace]:
    """Load compiled sequences (channels without one idle at 0 V) and run."""
    for sid, v in table.operating_voltages().items():
        dev.set_voltage(sid, v)
    n = int(round(duration / dt))
    loaded = {}
    for seq in sequences:
        if seq.dt != dt:
            raise ValueError("sequence dt differs from trace dt")
        loaded[seq.channel] = compile_sequence(seq, table, duration).samples
    for ch in range(4):
        dev.load_waveform(sps_id(ch), loaded.get(ch, np.zeros(n)))
    return dev.run_trace(duration, dt)


# -- edges -------------------------------------------------------------------


def plateau_levels(x: np.ndarray, band: float = 0.05) -> tuple[float, float]:
    """(low, high) plateau levels: medians of the bottom and top ``band`` of the range."""
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if not span > 0:
        raise AnalysisError("trace is flat; no plateau pair")
    low = float(np.median(x[x <= lo + band * span]))
    high = float(np.median(x[x >= hi - band * span]))
    return low, high


def _crossing(t, x, level, start, rising):
    """First crossing of ``level`` at index >= start, linearly interpolated."""
    above = x >= level if rising else x <= level
    idx = np.flatnonzero(above[start:])
    if idx.size == 0:
        return None, None
    k = start + int(idx[0])
    if k == 0:
        return float(t[0]), 0
    x0, x1 = x[k - 1], x[k]
    frac = 0.0 if x1 == x0 else (level - x0) / (x1 - x0)
    return float(t[k - 1] + frac * (t[k] - t[k - 1])), k


def measure_rise_fall(trace: TimeTrace) -> tuple[float, float | None]:
    """10-90 % rise and 90-10 % fall time of the first pulse in ``trace``.

    The fall is ``None`` when the trace ends before the pulse does.
    """
    x, t = trace.samples, trace.times
    low, high = plateau_levels(x)
    l10, l90 = low + 0.1 * (high - low), low + 0.9 * (high - low)
    start = int(np.flatnonzero(x <= l10)[0]) if np.any(x <= l10) else None
    if start is None:
        raise AnalysisError("no low plateau before the rising edge")
    t10, k10 = _crossing(t, x, l10 + 0.0, start, True)
    t90, k90 = _crossing(t, x, l90, k10 or start, True) if t10 is not None else (None, None)
    if t10 is None or t90 is None:
        raise AnalysisError("no rising edge between plateaus")
    f90, j90 = _crossing(t, x, l90, k90, False)
    fall = None
    if f90 is not None:
        f10, _ = _crossing(t, x, l10, j90, False)
        if f10 is not None:
            fall = f10 - f90
    return t90 - t10, fall


# -- small-signal response ---------------------------------------------------


def _window_length(f_mhz: float, dt: float, min_samples: int, max_cycles: int = 10000) -> int:
    """Smallest sample count >= min_samples spanning an integer number of periods."""
    per = 1e3 / (f_mhz * dt)  # samples per period
    best = None
    for k in range(max(1, math.ceil(min_samples / per)), max_cycles):
        n = k * per
        err = abs(n - round(n))
        if err < 1e-6:
            return int(round(n))
        if best is None or err < best[0]:
            best = (err, int(round(n)))
    return best[1]


def demodulate(x: np.ndarray, f_mhz: float, dt: float) -> complex:
    """Single-bin Fourier projection at ``f_mhz`` (peak amplitude, complex)."""
    t = np.arange(x.size) * dt
    return complex(2.0 / x.size * np.sum(x * np.exp(-2j * np.pi * f_mhz * 1e-3 * t)))


@dataclass(frozen=True)
class FrequencyResponse:
    freqs: np.ndarray
    response_db: np.ndarray
    f3db: float | None
    flags: tuple[str, ...] = ()
    bias_v: float = 0.0
    amplitude_v: float = 0.0

    def at(self, f: float) -> float:
        return float(np.interp(f, self.freqs, self.response_db))


DEFAULT_FREQS = np.arange(1.0, 151.0)


def frequency_response(
    dev: DeviceBackend,
    table: CalibrationTable,
    channel: int = 0,
    freqs: Sequence[float] = DEFAULT_FREQS,
    amplitude: float = 1.5,
    dt: float = 1.0,
    settle: float = 200.0,
    min_window: float = 10000.0,
) -> FrequencyResponse:
    """Drive ``bias + amplitude * sin(2 pi f t)`` and demodulate the output.

    ``amplitude`` is the peak drive (1.5 V = 3 V peak-to-peak).  The bias is
    the mid-fringe voltage (half the cross transmission).  Response is
    20 log10 of the fundamental relative to the lowest frequency.
    """
    freqs = np.asarray(sorted(freqs), dtype=float)
    bias = float(amplitude_to_voltage(table, channel, 0.5))
    port = channel
    amps = []
    for f in freqs:
        n_win = _window_length(f, dt, int(round(min_window / dt)))
        n_settle = int(round(settle / dt))
        n = n_settle + n_win
        t = np.arange(n) * dt
        drive = bias + amplitude * np.sin(2 * np.pi * f * 1e-3 * t)
        for sid, v in table.operating_voltages().items():
            dev.set_voltage(sid, v)
        for ch in range(4):
            dev.load_waveform(sps_id(ch), drive if ch == channel else np.zeros(n))
        out = dev.run_trace(n * dt, dt)[port].samples[n_settle:]
        amps.append(abs(demodulate(out, f, dt)))
    amps = np.asarray(amps)
    resp = 20 * np.log10(amps / amps[0])
    resp[0] = 0.0
    flags = []
    below = np.flatnonzero(resp <= -3.0)
    if below.size == 0:
        f3 = None
        flags.append("unbounded_f3db")
    else:
        k = int(below[0])
        r0, r1 = resp[k - 1], resp[k]
        f3 = float(freqs[k - 1] + (-3.0 - r0) / (r1 - r0) * (freqs[k] - freqs[k - 1]))
    return FrequencyResponse(freqs, resp, f3, tuple(flags), bias, amplitude)


# -- pulse-area statistics ---------------------------------------------------


@dataclass(frozen=True)
class PulseStats:
    n_pulses: int
    mean_area: float
    rel_sigma: float
    areas: np.ndarray = field(repr=False)


def pulse_areas(trace: TimeTrace, n: int, period: float, start: float = 0.0) -> np.ndarray:
    """Integrate each pulse over its on-time plus the following off-time."""
    k = int(round(period / trace.dt))
    i0 = int(round(start / trace.dt))
    x = trace.samples[i0 : i0 + n * k]
    if x.size < n * k:
        raise AnalysisError("trace shorter than the pulse train")
    return x.reshape(n, k).sum(axis=1) * trace.dt


def pulse_area_stats(
    dev: DeviceBackend,
    table: CalibrationTable,
    channel: int = 0,
    n: int = 1000,
    on: float = 200.0,
    off: float = 200.0,
    dt: float = 1.0,
) -> PulseStats:
    """Repeated square pulses at 50 % duty cycle; relative 1-sigma pulse area."""
    if n < 2:
        raise ValueError("need at least two pulses")
    # lead-in of one off-time so the first pulse has a real rising edge
    seq = PulseSequence.train(channel, n, on, off, start=off, dt=dt)
    trace = play(dev, table, [seq], off + n * (on + off), dt)[channel]
    areas = pulse_areas(trace, n, on + off, start=off)
    mean = float(areas.mean())
    return PulseStats(n, mean, float(areas.std(ddof=1) / mean), areas)


def tune_drive_noise(
    make_device: Callable[[float], DeviceBackend],
    table: CalibrationTable,
    target: float = 6.8e-4,
    channel: int = 0,
    n: int = 1000,
    lo: float = 1e-4,
    hi: float = 1.0,
    rtol: float = 0.01,
    max_iter: int = 40,
) -> tuple[float, float]:
    """Bisection (in log sigma) for the SPS drive noise giving ``target`` relative sigma.

    ``make_device(sigma)`` must return a fresh, identically seeded device.
    Returns ``(sigma_v, achieved_rel_sigma)``.
    """
    stat = lambda s: pulse_area_stats(make_device(s), table, channel, n).rel_sigma
    f_lo, f_hi = stat(lo), stat(hi)
    if not f_lo < target < f_hi:
        raise ValueError(f"target {target} not bracketed: [{f_lo:.3g}, {f_hi:.3g}]")
    mid, f_mid = lo, f_lo
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        f_mid = stat(mid)
        if abs(f_mid / target - 1) < rtol:
            break
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    return mid, f_mid


def device_with_sps_noise(config: DeviceConfig, sigma: float) -> VirtualDevice:
    acts = {
        sid: (a.with_(noise_sigma=sigma) if a.kind == "SPS" else a) for sid, a in config.actuators.items()
    }
    return VirtualDevice(config.with_(actuators=acts))


# -- crosstalk ---------------------------------------------------------------


@dataclass(frozen=True)
class CrosstalkReport:
    active_channel: int
    noise_floor: float
    baseline: float
    control: float
    others_only: float
    all_on: float
    trace_floor: float = 0.0

    @property
    def floor(self) -> float:
        """Effective noise floor: the larger of the detector floor and the trace noise."""
        return max(self.noise_floor, self.trace_floor)

    @property
    def all_on_delta(self) -> float:
        return abs(self.all_on - self.control)

    @property
    def others_delta(self) -> float:
        return abs(self.others_only - self.baseline)

    @property
    def passed(self) -> bool:
        return self.all_on_delta < 3 * self.floor and self.others_delta <= self.floor

    @property
    def magnitude(self) -> float:
        """Largest observed deviation (relative power)."""
        return max(self.all_on_delta, self.others_delta)

    def to_dict(self) -> dict:
        return {
            "active_channel": self.active_channel,
            "passed": self.passed,
            "noise_floor": self.noise_floor,
            "trace_floor": self.trace_floor,
            "floor": self.floor,
            "baseline": self.baseline,
            "control": self.control,
            "others_only": self.others_only,
            "all_on": self.all_on,
            "all_on_delta": self.all_on_delta,
            "others_delta": self.others_delta,
            "magnitude": self.magnitude,
        }


def crosstalk_experiment(
    dev: DeviceBackend,
    table: CalibrationTable,
    active_channel: int = 0,
    channels: Sequence[int] = (0, 1, 2, 3),
    pulse: float = 200.0,
    gap: float = 200.0,
    dt: float = 1.0,
    noise_floor: float = 1e-6,
) -> CrosstalkReport:
    """Control pulse, then all other channels, then all channels together.

    Mean power at the active output is compared over each pulse window
    (skipping the first and last 20 % to exclude edges).  A quiet window
    before the first pulse gives the baseline.  The trace floor is the
    sample standard deviation over the control window, so drive noise
    raises the floor the way it would on a real detector trace.
    """
    others = [c for c in channels if c != active_channel]
    t1 = gap
    t2 = t1 + pulse + gap
    t3 = t2 + pulse + gap
    duration = t3 + pulse + gap
    seqs = {c: [] for c in channels}
    seqs[active_channel].append(Segment(t1, pulse))
    for c in others:
        seqs[c].append(Segment(t2, pulse))
    for c in channels:
        seqs[c].append(Segment(t3, pulse))
    trace = play(dev, table, [PulseSequence(c, tuple(s), dt) for c, s in seqs.items()], duration, dt)
    x = trace[active_channel]

    def mean(start, length):
        return float(x.window(start + 0.2 * length, start + 0.8 * length).mean())

    return CrosstalkReport(
        active_channel,
        noise_floor,
        baseline=mean(0.0, gap),
        control=mean(t1, pulse),
        others_only=mean(t2, pulse),
        all_on=mean(t3, pulse),
        trace_floor=float(x.window(t1 + 0.2 * pulse, t1 + 0.8 * pulse).std()),
    )


def demo_sequences(dt: float = 1.0) -> list[PulseSequence]:
    """Arbitrary timing, length, shape and amplitude on the four channels."""
    return [
        PulseSequence(0, (Segment(100, 200), Segment(600, 200)), dt),
        PulseSequence(1, (Segment(100, 50), Segment(300, 400)), dt),
        PulseSequence(2, (Segment(100, 300, "gaussian"), Segment(500, 300, "gaussian", 0.5)), dt),
        PulseSequence(3, (Segment(100, 200, amplitude=0.25), Segment(400, 200, amplitude=0.75)), dt),
    ]
