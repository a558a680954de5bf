"""Voltage-to-phase statics and drive-chain dynamics of the phase shifters.

Units: volts, nanoseconds, MHz.  Slew limits are given in V/us as on the
amplifier datasheet and converted internally.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter, lfilter_zi

log = logging.getLogger(__name__)


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TimeTrace:
    """Uniformly sampled signal; ``samples[n]`` is taken at ``t0 + n*dt`` (ns)."""

    samples: np.ndarray
    dt: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise TraceFormatError(f"dt must be positive, got {self.dt!r}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))
        if self.samples.ndim != 1:
            raise TraceFormatError("samples must be one-dimensional")

    def __len__(self):
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def duration(self) -> float:
        return self.samples.size * self.dt

    def window(self, start: float, stop: float) -> np.ndarray:
        t = self.times
        return self.samples[(t >= start - 1e-9) & (t < stop - 1e-9)]

    @classmethod
    def from_times(cls, times, samples) -> "TimeTrace":
        times = np.asarray(times, dtype=float)
        if times.size < 2:
            return cls(samples, 1.0, float(times[0]) if times.size else 0.0)
        steps = np.diff(times)
        dt = float(steps.mean())
        if not np.allclose(steps, dt, rtol=1e-6, atol=1e-9):
            raise TraceFormatError("trace is not uniformly sampled")
        return cls(samples, dt, float(times[0]))


@dataclass(frozen=True)
class ActuatorModel:
    """Electro-mechanical model of one push-pull phase shifter.

    ``v_pi`` is the programmed drive magnitude producing a differential
    phase of pi.  ``f3db=None`` means quasi-static (no filtering);
    ``slew_limit=None`` disables slew limiting.
    """

    kind: str = "CPS"
    v_pi: float = 30.0
    phase_offset: float = 0.0
    drive_range: float = 25.0
    slew_limit: float | None = None
    f3db: float | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("CPS", "SPS"):
            raise ValueError(f"kind must be CPS or SPS, got {self.kind!r}")
        if not self.v_pi > 0:
            raise ValueError("v_pi must be positive")
        if not self.drive_range > 0:
            raise ValueError("drive_range must be positive")
        if self.f3db is not None and not self.f3db > 0:
            raise ValueError("f3db must be positive")
        if self.slew_limit is not None and not self.slew_limit > 0:
            raise ValueError("slew_limit must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @classmethod
    def cps(cls, **kw) -> "ActuatorModel":
        return cls(**{"kind": "CPS", "v_pi": 30.0, "drive_range": 25.0, **kw})

    @classmethod
    def sps(cls, **kw) -> "ActuatorModel":
        kw = {
            "kind": "SPS",
            "v_pi": 10.0,
            "drive_range": 12.5,
            "slew_limit": 8000.0,
            "f3db": 34.0,
            **kw,
        }
        return cls(**kw)

    def with_(self, **kw) -> "ActuatorModel":
        return replace(self, **kw)

    def clamp(self, v, *, label: str = ""):
        v = np.asarray(v, dtype=float)
        lim = self.drive_range
        if np.any(np.abs(v) > lim):
            log.warning("drive %s clamped to +/-%g V", label or self.kind, lim)
            v = np.clip(v, -lim, lim)
        return v

    @property
    def tau(self) -> float | None:
        """Filter time constant in ns."""
        return None if self.f3db is None else 1e3 / (2 * math.pi * self.f3db)


def phase_of_voltage(a: ActuatorModel, v):
    """Differential phase (rad) for drive ``v``; out-of-range drives are clamped."""
    v = a.clamp(v)
    out = math.pi * v / a.v_pi + a.phase_offset
    return float(out) if out.ndim == 0 else out


def voltage_of_phase(a: ActuatorModel, phase):
    return (np.asarray(phase, dtype=float) - a.phase_offset) * a.v_pi / math.pi


def _slew(x: np.ndarray, max_step: float) -> np.ndarray:
    d = np.diff(x)
    if d.size == 0 or np.abs(d).max() <= max_step:
        return x
    y = x.tolist()
    prev = y[0]
    for n in range(1, len(y)):
        step = y[n] - prev
        if step > max_step:
            prev += max_step
        elif step < -max_step:
            prev -= max_step
        else:
            prev = y[n]
        y[n] = prev
    return np.asarray(y)


def apply_dynamics(
    a: ActuatorModel,
    drive,
    dt: float | None = None,
    rng: np.random.Generator | None = None,
) -> TimeTrace:
    """Drive voltage as seen by the waveguide.

    Order: Gaussian drive noise (``noise_sigma`` per sample, needs ``rng``),
    slew-rate limiting, then an exactly discretised single-pole low-pass at
    ``f3db``.  The filter starts in steady state at the first sample.
    """
    if isinstance(drive, TimeTrace):
        trace = drive if dt is None else TimeTrace(drive.samples, dt, drive.t0)
    else:
        if dt is None:
            raise TraceFormatError("dt is required for raw sample arrays")
        trace = TimeTrace(drive, dt)
    x = trace.samples.copy()
    if a.noise_sigma > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_sigma > 0")
        x = x + rng.normal(0.0, a.noise_sigma, size=x.size)
    if a.slew_limit is not None and x.size:
        x = _slew(x, a.slew_limit * 1e-3 * trace.dt)
    if a.f3db is not None and x.size:
        alpha = 1.0 - math.exp(-trace.dt / a.tau)
        b, den = [alpha], [1.0, alpha - 1.0]
        x, _ = lfilter(b, den, x, zi=lfilter_zi(b, den) * x[0])
    return TimeTrace(x, trace.dt, trace.t0)
