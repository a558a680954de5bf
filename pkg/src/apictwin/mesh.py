"""Transfer-matrix model of the 1x4 switching tree.

Field convention: a lossless 2x2 directional coupler with power coupling
ratio ``eta`` is ``[[t, i k], [i k, t]]`` with ``t = sqrt(1 - eta)`` and
``k = sqrt(eta)``.  A push-pull phase section with differential phase
``d`` is ``diag(exp(+i d/2), exp(-i d/2))``.  Light always enters port 0
(the upper port) of every interferometer.

Topology (outputs numbered top to bottom)::

    PS00 --bar--> PS10 --bar--> triple 0 (PS20, PS30, PS40) -> out 0 / dump 4
                       --cross-> triple 1 (PS21, PS31, PS41) -> out 1 / dump 5
         --cross> PS11 --bar--> triple 2 ...                 -> out 2 / dump 6
                       --cross-> triple 3 ...                -> out 3 / dump 7

Each switching ("triple") interferometer sends its cross port to the
channel output and its bar port to the channel dump.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

N_CHANNELS = 4
N_PORTS = 2 * N_CHANNELS
OUTPUT_PORTS = tuple(range(N_CHANNELS))
DUMP_PORTS = tuple(range(N_CHANNELS, N_PORTS))

# Routing interferometers carry a quarter-wave arm imbalance so that both the
# cross and the bar state fall inside the +/-25 V push-pull drive window.
ROUTING_BIAS = math.pi / 2


class MeshConfigError(KeyError):
    """A phase value or element required by the netlist is missing."""


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not (0.0 <= eta <= 1.0) or not math.isfinite(eta):
        raise ValueError(f"coupling ratio must lie in [0, 1], got {eta!r}")
    return eta


def coupler_matrix(eta: float) -> np.ndarray:
    eta = _check_eta(eta)
    t = math.sqrt(1.0 - eta)
    k = math.sqrt(eta)
    return np.array([[t, 1j * k], [1j * k, t]], dtype=complex)


def push_pull_phase_matrix(dphi) -> np.ndarray:
    """Phase section for a differential phase; broadcasts over array input.

    Returns shape ``(..., 2, 2)``.
    """
    dphi = np.asarray(dphi, dtype=float)
    if not np.all(np.isfinite(dphi)):
        raise ValueError("phase must be finite")
    out = np.zeros(dphi.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = np.exp(0.5j * dphi)
    out[..., 1, 1] = np.exp(-0.5j * dphi)
    return out


@dataclass(frozen=True)
class DirectionalCoupler:
    eta: float = 0.5

    def __post_init__(self):
        _check_eta(self.eta)

    def matrix(self) -> np.ndarray:
        return coupler_matrix(self.eta)

    @property
    def t(self) -> float:
        return math.sqrt(1.0 - self.eta)

    @property
    def k(self) -> float:
        return math.sqrt(self.eta)


@dataclass(frozen=True)
class PhaseShifterElement:
    """A labelled phase shifter.

    ``offset`` is the fabrication differential phase present at 0 V.
    """

    id: str
    kind: str = "CPS"
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("CPS", "SPS"):
            raise ValueError(f"kind must be CPS or SPS, got {self.kind!r}")
        if not math.isfinite(self.offset):
            raise ValueError("offset must be finite")


@dataclass(frozen=True)
class RoutingMZI:
    cps: PhaseShifterElement
    coupler_in: DirectionalCoupler = field(default_factory=DirectionalCoupler)
    coupler_out: DirectionalCoupler = field(default_factory=DirectionalCoupler)

    @property
    def shifters(self) -> tuple[PhaseShifterElement, ...]:
        return (self.cps,)

    def transfer(self, theta) -> np.ndarray:
        """2x2 transfer at internal differential phase ``theta`` (offset excluded)."""
        p = push_pull_phase_matrix(theta)
        return self.coupler_out.matrix() @ p @ self.coupler_in.matrix()

    def bar_floor(self) -> float:
        """Closed-form minimum bar-port power, ``|t1 t2 - k1 k2|**2``."""
        a, b = self.coupler_in, self.coupler_out
        return (a.t * b.t - a.k * b.k) ** 2

    def cross_floor(self) -> float:
        a, b = self.coupler_in, self.coupler_out
        return (a.k * b.t - a.t * b.k) ** 2


@dataclass(frozen=True)
class TriplePhaseMZI:
    """Switching interferometer: coupler, +/-theta/2, coupler, +/-(phi+psi)/2, coupler."""

    cps_a: PhaseShifterElement
    cps_b: PhaseShifterElement
    sps: PhaseShifterElement
    couplers: tuple[DirectionalCoupler, DirectionalCoupler, DirectionalCoupler] = (
        DirectionalCoupler(),
        DirectionalCoupler(),
        DirectionalCoupler(),
    )

    def __post_init__(self):
        if len(self.couplers) != 3:
            raise ValueError("a triple-phase MZI has exactly three couplers")

    @property
    def shifters(self) -> tuple[PhaseShifterElement, ...]:
        return (self.cps_a, self.cps_b, self.sps)

    def transfer(self, theta, phi, psi=0.0) -> np.ndarray:
        c1, c2, c3 = (c.matrix() for c in self.couplers)
        p1 = push_pull_phase_matrix(theta)
        p2 = push_pull_phase_matrix(np.add(phi, psi))
        return c3 @ p2 @ c2 @ p1 @ c1


def mzi_transfer(mzi, *phases) -> np.ndarray:
    """Transfer matrix of either interferometer variant at the given phases."""
    return mzi.transfer(*phases)


@dataclass(frozen=True)
class LossBudget:
    """Common-mode insertion loss applied to every port power."""

    grating_coupler_efficiency: float = 0.10
    residual_factor: float | None = None
    target_insertion_db: float = -19.2

    def __post_init__(self):
        for name in ("grating_coupler_efficiency", "residual_factor"):
            v = getattr(self, name)
            if v is not None and not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v!r}")

    @property
    def factors(self) -> tuple[float, float]:
        resid = self.residual_factor
        if resid is None:
            resid = 10 ** (self.target_insertion_db / 10) / self.grating_coupler_efficiency
            if not (0.0 < resid <= 1.0):
                raise ValueError("target insertion loss is below the grating loss alone")
        return (self.grating_coupler_efficiency, resid)

    @property
    def power_factor(self) -> float:
        return math.prod(self.factors)

    @property
    def total_insertion_db(self) -> float:
        return 10 * math.log10(self.power_factor)


def _labels():
    stage2 = ("PS10", "PS11")
    stage3 = tuple((f"PS2{i}", f"PS3{i}", f"PS4{i}") for i in range(N_CHANNELS))
    return "PS00", stage2, stage3


@dataclass(frozen=True)
class MeshNetlist:
    stage1: RoutingMZI
    stage2: tuple[RoutingMZI, RoutingMZI]
    stage3: tuple[TriplePhaseMZI, TriplePhaseMZI, TriplePhaseMZI, TriplePhaseMZI]

    def __post_init__(self):
        if len(self.stage2) != 2 or len(self.stage3) != N_CHANNELS:
            raise ValueError("the tree has two second-stage and four switching MZIs")
        ids = [s.id for s in self.shifters]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate phase-shifter ids in {ids}")

    @property
    def shifters(self) -> tuple[PhaseShifterElement, ...]:
        out = list(self.stage1.shifters)
        for m in self.stage2:
            out.extend(m.shifters)
        for m in self.stage3:
            out.extend(m.shifters)
        return tuple(out)

    @property
    def shifter_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.shifters)

    def shifter(self, sid: str) -> PhaseShifterElement:
        for s in self.shifters:
            if s.id == sid:
                return s
        raise MeshConfigError(sid)

    def channel_of(self, sid: str) -> int | None:
        """Switching channel owning ``sid``; None for routing shifters."""
        for i, m in enumerate(self.stage3):
            if sid in (s.id for s in m.shifters):
                return i
        self.shifter(sid)
        return None

    @property
    def couplers(self) -> tuple[DirectionalCoupler, ...]:
        out = [self.stage1.coupler_in, self.stage1.coupler_out]
        for m in self.stage2:
            out += [m.coupler_in, m.coupler_out]
        for m in self.stage3:
            out += list(m.couplers)
        return tuple(out)

    @classmethod
    def build(
        cls,
        etas: Sequence[float] | None = None,
        offsets: Mapping[str, float] | None = None,
        routing_bias: float = ROUTING_BIAS,
    ) -> "MeshNetlist":
        """Build the tree from 18 coupler ratios (netlist order) and per-shifter offsets.

        Routing shifters get ``routing_bias`` added to their offset.
        """
        etas = [0.5] * 18 if etas is None else [float(e) for e in etas]
        if len(etas) != 18:
            raise ValueError(f"expected 18 coupler ratios, got {len(etas)}")
        offsets = dict(offsets or {})
        dc = [DirectionalCoupler(e) for e in etas]
        s1, s2, s3 = _labels()
        known = {s1, *s2, *(x for trip in s3 for x in trip)}
        unknown = set(offsets) - known
        if unknown:
            raise MeshConfigError(f"unknown phase shifters {sorted(unknown)}")

        def ps(sid, kind="CPS", bias=0.0):
            return PhaseShifterElement(sid, kind, bias + offsets.get(sid, 0.0))

        stage1 = RoutingMZI(ps(s1, bias=routing_bias), dc[0], dc[1])
        stage2 = tuple(
            RoutingMZI(ps(sid, bias=routing_bias), dc[2 + 2 * j], dc[3 + 2 * j])
            for j, sid in enumerate(s2)
        )
        stage3 = tuple(
            TriplePhaseMZI(ps(a), ps(b), ps(c, "SPS"), tuple(dc[6 + 3 * i : 9 + 3 * i]))
            for i, (a, b, c) in enumerate(s3)
        )
        return cls(stage1, stage2, stage3)

    @classmethod
    def ideal(cls) -> "MeshNetlist":
        return cls.build()

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        eta_range: tuple[float, float] = (0.43, 0.57),
        offset_sigma: float = 0.0,
    ) -> "MeshNetlist":
        """Imperfect tree: couplers uniform in ``eta_range``, Gaussian phase offsets."""
        etas = rng.uniform(*eta_range, size=18)
        offsets = {}
        if offset_sigma > 0:
            s1, s2, s3 = _labels()
            ids = [s1, *s2, *(x for trip in s3 for x in trip)]
            offsets = dict(zip(ids, rng.normal(0.0, offset_sigma, size=len(ids))))
        return cls.build(etas, offsets)

    def with_offsets(self, offsets: Mapping[str, float]) -> "MeshNetlist":
        """Copy with the given shifters' offsets replaced."""

        def upd(s):
            return replace(s, offset=offsets[s.id]) if s.id in offsets else s

        return MeshNetlist(
            replace(self.stage1, cps=upd(self.stage1.cps)),
            tuple(replace(m, cps=upd(m.cps)) for m in self.stage2),
            tuple(
                replace(m, cps_a=upd(m.cps_a), cps_b=upd(m.cps_b), sps=upd(m.sps))
                for m in self.stage3
            ),
        )


def _phase(net: MeshNetlist, phases: Mapping[str, object], el: PhaseShifterElement):
    try:
        value = phases[el.id]
    except KeyError:
        raise MeshConfigError(f"missing phase for {el.id}") from None
    return np.asarray(value, dtype=float) + el.offset


def _couple(c: "DirectionalCoupler", a: complex, b: complex) -> tuple[complex, complex]:
    t, k = c.t, 1j * c.k
    return t * a + k * b, k * a + t * b


def _shift(phi, a, b):
    e = cmath.exp(0.5j * phi) if isinstance(phi, float) else np.exp(0.5j * phi)
    return a * e, b / e


def _forward(net: "MeshNetlist", ph: Mapping[str, object], shape) -> np.ndarray:
    """Propagate unit input through the tree with per-arm complex arithmetic.

    Works on Python floats (one phase set) or broadcast arrays.
    """
    s1 = net.stage1
    zero = 0.0 if shape == () else np.zeros(shape)
    one = 1.0 if shape == () else np.ones(shape, dtype=complex)
    a, b = _couple(s1.coupler_out, *_shift(ph[s1.cps.id], *_couple(s1.coupler_in, one, zero)))
    feeds = []
    for m, amp in zip(net.stage2, (a, b)):
        feeds += _couple(m.coupler_out, *_shift(ph[m.cps.id], *_couple(m.coupler_in, amp, zero)))
    out = np.zeros(shape + (N_PORTS,), dtype=complex)
    for i, m in enumerate(net.stage3):
        c1, c2, c3 = m.couplers
        x = _couple(c1, feeds[i], zero)
        x = _couple(c2, *_shift(ph[m.cps_a.id], *x))
        x = _couple(c3, *_shift(ph[m.cps_b.id] + ph[m.sps.id], *x))
        # physical cross port feeds the output, bar port the dump
        out[..., i], out[..., N_CHANNELS + i] = x[1], x[0]
    return out


def mesh_forward(
    net: MeshNetlist,
    phases: Mapping[str, object],
    loss: LossBudget | None = None,
) -> np.ndarray:
    """Complex output amplitudes for unit input at the tree root.

    ``phases`` maps every shifter id to its programmed differential phase
    (scalar or array; arrays broadcast, e.g. over time).  Fabrication offsets
    are added here.  Returns ``(..., 8)``: outputs 0-3 then dumps 4-7.
    """
    ph = {el.id: _phase(net, phases, el) for el in net.shifters}
    shape = np.broadcast_shapes(*(v.shape for v in ph.values()))
    if shape == ():
        out = _forward(net, {k: float(v) for k, v in ph.items()}, ())
    else:
        out = _forward(net, {k: np.broadcast_to(v, shape) for k, v in ph.items()}, shape)
    if loss is not None:
        out = out * math.sqrt(loss.power_factor)
    return out


def port_powers(net: MeshNetlist, phases: Mapping[str, object], loss: LossBudget | None = None):
    return np.abs(mesh_forward(net, phases, loss)) ** 2


class DegenerateDataError(ValueError):
    pass


def transmission_norm(powers) -> np.ndarray:
    """``T / T.max()`` over a sweep."""
    p = np.asarray(powers, dtype=float)
    pmax = p.max() if p.size else 0.0
    if not pmax > 0:
        raise DegenerateDataError("sweep has no positive power")
    return np.clip(p / pmax, 0.0, 1.0)


def extinction_db(t_norm) -> np.ndarray:
    """``10 log10(T_norm)``; zero transmission maps to -inf."""
    t = np.asarray(t_norm, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(t)
