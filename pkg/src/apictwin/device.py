"""Simulated instrument: static drives, AWG playback and power readings.

Every experiment in the package talks to hardware only through the small
:class:`DeviceBackend` surface, so the same procedures run against the
in-process :class:`VirtualDevice` or a remote one (see :mod:`apictwin.wire`).
Powers are relative to the injected power (input = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .actuation import ActuatorModel, TimeTrace, TraceFormatError, apply_dynamics, phase_of_voltage
from .mesh import N_CHANNELS, N_PORTS, LossBudget, MeshNetlist, port_powers


class UnknownIdError(KeyError):
    """Unknown phase-shifter id or port number."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


@runtime_checkable
class DeviceBackend(Protocol):
    n_ports: int

    def set_voltage(self, sid: str, v: float) -> None: ...

    def read_power(self, port: int) -> float: ...

    def load_waveform(self, sid: str, samples: Sequence[float]) -> None: ...

    def run_trace(self, duration: float, dt: float) -> dict[int, TimeTrace]: ...


def default_actuators(net: MeshNetlist) -> dict[str, ActuatorModel]:
    return {
        s.id: (ActuatorModel.sps() if s.kind == "SPS" else ActuatorModel.cps())
        for s in net.shifters
    }


def leakage_matrix(fraction: float, n: int = N_CHANNELS) -> np.ndarray:
    """Uniform voltage leakage between switching channels (zero diagonal)."""
    m = np.full((n, n), float(fraction))
    np.fill_diagonal(m, 0.0)
    return m


@dataclass(frozen=True)
class DeviceConfig:
    """Static description of a simulated device.

    ``crosstalk[i, j]`` is the fraction of the drive voltage of SPS ``j``
    that leaks onto SPS ``i``.
    """

    netlist: MeshNetlist = field(default_factory=MeshNetlist.ideal)
    actuators: Mapping[str, ActuatorModel] | None = None
    detector_noise_floor: float = 1e-6
    crosstalk: np.ndarray | None = None
    loss: LossBudget | None = None
    seed: int = 0

    def __post_init__(self):
        acts = dict(self.actuators or default_actuators(self.netlist))
        missing = set(self.netlist.shifter_ids) - set(acts)
        if missing:
            raise ValueError(f"no actuator model for {sorted(missing)}")
        object.__setattr__(self, "actuators", acts)
        if self.detector_noise_floor < 0:
            raise ValueError("detector_noise_floor must be non-negative")
        if self.crosstalk is not None:
            ct = np.asarray(self.crosstalk, dtype=float)
            if ct.shape != (N_CHANNELS, N_CHANNELS):
                raise ValueError("crosstalk must be a 4x4 matrix")
            object.__setattr__(self, "crosstalk", ct)

    def with_(self, **kw) -> "DeviceConfig":
        return replace(self, **kw)


class VirtualDevice:
    """Stateful simulated APIC.  Not thread-safe: one owner per session."""

    n_ports = N_PORTS

    def __init__(self, config: DeviceConfig | None = None, **kw):
        self.config = config if config is not None else DeviceConfig(**kw)
        net = self.config.netlist
        self._ids = net.shifter_ids
        self._sps = [m.sps.id for m in net.stage3]
        self.voltages = {sid: 0.0 for sid in self._ids}
        self.waveforms: dict[str, np.ndarray] = {}
        self.reseed(self.config.seed)

    # -- session -----------------------------------------------------------
    @property
    def shifter_ids(self) -> tuple[str, ...]:
        return self._ids

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(int(seed))

    def clone(self) -> "VirtualDevice":
        dev = VirtualDevice(self.config)
        dev.voltages = dict(self.voltages)
        dev.waveforms = {k: v.copy() for k, v in self.waveforms.items()}
        return dev

    def _check_id(self, sid: str) -> None:
        if sid not in self.voltages:
            raise UnknownIdError(f"unknown shifter {sid}")

    def _check_port(self, port: int) -> int:
        if isinstance(port, bool) or not isinstance(port, (int, np.integer)):
            raise UnknownIdError(f"unknown port {port!r}")
        if not 0 <= port < N_PORTS:
            raise UnknownIdError(f"unknown port {port}")
        return int(port)

    # -- static ------------------------------------------------------------
    def set_voltage(self, sid: str, v: float) -> None:
        self._check_id(sid)
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("voltage must be finite")
        self.voltages[sid] = float(self.config.actuators[sid].clamp(v, label=sid))

    def set_voltages(self, values: Mapping[str, float]) -> None:
        for sid, v in values.items():
            self.set_voltage(sid, v)

    def _effective(self, volts: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        ct = self.config.crosstalk
        if ct is None or not np.any(ct):
            return dict(volts)
        out = dict(volts)
        for i, target in enumerate(self._sps):
            leak = sum(ct[i, j] * np.asarray(volts[src]) for j, src in enumerate(self._sps))
            out[target] = np.asarray(volts[target]) + leak
        return out

    def _phases(self, volts: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        acts = self.config.actuators
        return {sid: phase_of_voltage(acts[sid], v) for sid, v in self._effective(volts).items()}

    def _noise(self, shape) -> np.ndarray | float:
        floor = self.config.detector_noise_floor
        if floor <= 0:
            return np.zeros(shape) if shape else 0.0
        return self._rng.uniform(0.0, floor, size=shape)

    def true_powers(self, volts: Mapping[str, object] | None = None) -> np.ndarray:
        """Noise-free port powers at the given (default: current) voltages."""
        volts = self.voltages if volts is None else {**self.voltages, **volts}
        return port_powers(self.config.netlist, self._phases(volts), self.config.loss)

    def read_power(self, port: int) -> float:
        port = self._check_port(port)
        p = float(self.true_powers()[port])
        return p + float(self._noise(()))

    def sweep(self, assignments: Mapping[str, Sequence[float]], ports: Sequence[int]) -> np.ndarray:
        """Vectorised equivalent of setting each point then reading each port.

        Readings (and noise draws) match the point-by-point loop exactly;
        swept shifters are left at the last point.
        """
        ports = [self._check_port(p) for p in ports]
        cols = {}
        for sid, vals in assignments.items():
            self._check_id(sid)
            cols[sid] = self.config.actuators[sid].clamp(np.asarray(vals, dtype=float), label=sid)
        n = len(next(iter(cols.values())))
        volts = {sid: np.full(n, v) for sid, v in self.voltages.items()}
        volts.update(cols)
        powers = port_powers(self.config.netlist, self._phases(volts), self.config.loss)
        out = powers[:, ports] + self._noise((n, len(ports)))
        for sid, vals in cols.items():
            self.voltages[sid] = float(vals[-1])
        return out

    # -- dynamic -----------------------------------------------------------
    def load_waveform(self, sid: str, samples: Sequence[float]) -> None:
        self._check_id(sid)
        arr = np.asarray(samples, dtype=float)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise TraceFormatError("waveform must be a finite 1-D sample list")
        self.waveforms[sid] = arr

    def clear_waveforms(self) -> None:
        self.waveforms.clear()

    def run_trace(self, duration: float, dt: float) -> dict[int, TimeTrace]:
        """Play loaded waveforms; return a power trace for every port.

        Waveforms hold absolute drive voltages sampled at ``dt`` and must
        have exactly ``round(duration / dt)`` samples.  SPS drives pass
        through their actuator dynamics; CPS drives are quasi-static.
        """
        if not (dt > 0 and duration > 0):
            raise TraceFormatError("duration and dt must be positive")
        n = int(round(duration / dt))
        acts = self.config.actuators
        volts = {}
        for sid in self._ids:
            if sid in self.waveforms:
                w = self.waveforms[sid]
                if w.size != n:
                    raise TraceFormatError(
                        f"waveform for {sid} has {w.size} samples, trace needs {n}"
                    )
                volts[sid] = acts[sid].clamp(w, label=sid)
            else:
                volts[sid] = np.full(n, self.voltages[sid])
        volts = self._effective(volts)
        for sid in self._ids:
            a = acts[sid]
            if a.kind == "SPS":
                volts[sid] = apply_dynamics(a, volts[sid], dt, rng=self._rng).samples
        acts_phase = {sid: phase_of_voltage(acts[sid], v) for sid, v in volts.items()}
        powers = port_powers(self.config.netlist, acts_phase, self.config.loss)
        powers = powers + self._noise(powers.shape)
        return {p: TimeTrace(powers[:, p], dt) for p in range(N_PORTS)}


def sweep_readings(dev: DeviceBackend, assignments: Mapping[str, Sequence[float]], ports: Sequence[int]):
    """Set-then-read loop over a voltage list; uses ``dev.sweep`` when available."""
    fast = getattr(dev, "sweep", None)
    if fast is not None:
        return np.asarray(fast(assignments, ports))
    ids = list(assignments)
    cols = [np.asarray(assignments[s], dtype=float) for s in ids]
    n = len(cols[0])
    out = np.empty((n, len(ports)))
    last = {}
    for i in range(n):
        for sid, col in zip(ids, cols):
            if last.get(sid) != col[i]:
                dev.set_voltage(sid, float(col[i]))
                last[sid] = col[i]
        for j, p in enumerate(ports):
            out[i, j] = dev.read_power(p)
    return out
