"""Cross/bar calibration of the switching tree against any device backend.

Order of operations for a full tree: the three routing interferometers
(1-D sweep, offset-sine fit), then for every channel the two switching CPSs
(nested 2-D sweep with the SPS at 0 V, grid extremum refined with
Nelder-Mead on live readings), then the SPS with the CPS pair parked at
bar.  The SPS bar state is 0 V by construction.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import yaml
from sklearn.base import BaseEstimator

from .device import DeviceBackend, sweep_readings
from .fitting import OffsetSineRegressor
from .mesh import extinction_db
from .simplex import nelder_mead

log = logging.getLogger(__name__)

TABLE_SCHEMA = "apictwin.calibration/1"


class CalibrationInconsistency(UserWarning):
    pass


class CalibrationAborted(RuntimeError):
    def __init__(self, stage: str, table: "CalibrationTable", cause: Exception):
        super().__init__(f"calibration failed at {stage}: {cause}")
        self.stage = stage
        self.table = table
        self.__cause__ = cause


@dataclass(frozen=True)
class SweepSpec:
    v_min: float = -25.0
    v_max: float = 25.0
    step: float = 0.1

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if not self.step > 0:
            raise ValueError("step must be positive")

    def voltages(self) -> np.ndarray:
        n = int(round((self.v_max - self.v_min) / self.step)) + 1
        return np.linspace(self.v_min, self.v_min + (n - 1) * self.step, n)

    def clipped(self, limit: float) -> "SweepSpec":
        return SweepSpec(max(self.v_min, -limit), min(self.v_max, limit), self.step)


SWEEP_1D = SweepSpec(step=0.1)
SWEEP_2D = SweepSpec(step=0.25)
SWEEP_SPS = SweepSpec(-12.5, 12.5, 0.1)


@dataclass
class CalibrationEntry:
    """Result for one routing shifter, one switching CPS pair, or one SPS.

    Voltages are tuples ordered like ``ids``.
    """

    ids: tuple[str, ...]
    kind: str
    v_cross: tuple[float, ...]
    v_bar: tuple[float, ...]
    extinction_db: float
    ports: tuple[int, ...]
    fit: dict[str, float] = field(default_factory=dict)
    rmse: float = 0.0
    p_cross: float = 0.0
    p_bar: float = 0.0
    v_split: tuple[float, ...] | None = None
    flags: list[str] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    sweep: dict | None = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> str:
        return "+".join(self.ids)

    @property
    def t_norm_bar(self) -> float:
        return self.p_bar / self.p_cross if self.p_cross > 0 else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("sweep")
        d["ids"] = list(self.ids)
        d["ports"] = list(self.ports)
        for k in ("v_cross", "v_bar", "v_split"):
            d[k] = None if d[k] is None else [float(v) for v in d[k]]
        d["fit"] = {k: float(v) for k, v in self.fit.items()}
        d["metrics"] = {k: float(v) for k, v in self.metrics.items()}
        for k in ("extinction_db", "rmse", "p_cross", "p_bar"):
            d[k] = float(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationEntry":
        d = dict(d)
        for k in ("ids", "ports", "v_cross", "v_bar"):
            d[k] = tuple(d[k])
        if d.get("v_split") is not None:
            d["v_split"] = tuple(d["v_split"])
        return cls(**d)


ROUTING_IDS = ("PS00", "PS10", "PS11")


def pair_ids(channel: int) -> tuple[str, str]:
    return (f"PS2{channel}", f"PS3{channel}")


def sps_id(channel: int) -> str:
    return f"PS4{channel}"


@dataclass
class CalibrationTable:
    entries: dict[str, CalibrationEntry] = field(default_factory=dict)
    config_hash: str | None = None
    timestamps: dict[str, str] = field(default_factory=dict)

    REQUIRED = ROUTING_IDS + tuple("+".join(pair_ids(i)) for i in range(4)) + tuple(
        sps_id(i) for i in range(4)
    )

    def add(self, entry: CalibrationEntry) -> None:
        self.entries[entry.key] = entry

    def __getitem__(self, key: str) -> CalibrationEntry:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def status(self) -> str:
        return "calibrated" if all(k in self.entries for k in self.REQUIRED) else "partial"

    @property
    def shifter_count(self) -> int:
        return len({sid for e in self.entries.values() for sid in e.ids})

    def channel(self, i: int) -> tuple[CalibrationEntry, CalibrationEntry]:
        """(CPS-pair entry, SPS entry) for switching channel ``i``."""
        try:
            return self.entries["+".join(pair_ids(i))], self.entries[sps_id(i)]
        except KeyError:
            raise UncalibratedChannelError(f"channel {i} is not calibrated") from None

    def operating_voltages(self) -> dict[str, float]:
        """Even split on the routing stages, CPS pairs at bar, SPSs at 0 V."""
        out = {}
        for sid in ROUTING_IDS:
            if sid in self.entries:
                e = self.entries[sid]
                out[sid] = (e.v_split or e.v_bar)[0]
        for i in range(4):
            key = "+".join(pair_ids(i))
            if key in self.entries:
                out.update(zip(self.entries[key].ids, self.entries[key].v_bar))
            if sps_id(i) in self.entries:
                out[sps_id(i)] = 0.0
        return out

    def summary(self) -> list[dict]:
        rows = []
        for key, e in self.entries.items():
            rows.append(
                {
                    "entry": key,
                    "kind": e.kind,
                    "t_norm": float(e.t_norm_bar),
                    "t_eps_db": float(e.extinction_db),
                    "flags": list(e.flags),
                }
            )
        return rows

    def to_dict(self) -> dict:
        d = {
            "schema": TABLE_SCHEMA,
            "status": self.status,
            "config_hash": self.config_hash,
            "entries": {k: e.to_dict() for k, e in self.entries.items()},
        }
        if self.timestamps:
            d["timestamps"] = dict(self.timestamps)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationTable":
        if d.get("schema") != TABLE_SCHEMA:
            raise ValueError(f"not a calibration table (schema {d.get('schema')!r})")
        entries = {k: CalibrationEntry.from_dict(v) for k, v in d["entries"].items()}
        return cls(entries, d.get("config_hash"), dict(d.get("timestamps", {})))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "CalibrationTable":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path) as fh:
            return cls.loads(fh.read())


class UncalibratedChannelError(LookupError):
    pass


def _read(dev: DeviceBackend, ports: Sequence[int]) -> float:
    return float(sum(dev.read_power(p) for p in ports))


def _measure(dev, values: Mapping[str, float], ports) -> float:
    for sid, v in values.items():
        dev.set_voltage(sid, float(v))
    return _read(dev, ports)


def _ext_db(p_bar: float, p_cross: float) -> float:
    if p_cross <= 0:
        return float("nan")
    return float(extinction_db(max(p_bar, 0.0) / p_cross)) if p_bar > 0 else -math.inf


def calibrate_routing_mzi(
    dev: DeviceBackend,
    sid: str,
    ports: Sequence[int],
    spec: SweepSpec = SWEEP_1D,
    noise_floor: float = 1e-6,
) -> CalibrationEntry:
    """Sweep one routing CPS, fit an offset sine, leave the device at bar.

    ``ports`` are summed as one detector reading.  Cross/bar are the
    arg-max/arg-min of the fitted curve inside the sweep range; ``v_split``
    is the mid-fringe voltage between them.
    """
    vs = spec.voltages()
    p = sweep_readings(dev, {sid: vs}, ports).sum(axis=1)
    est = OffsetSineRegressor(noise_floor=noise_floor * len(ports)).fit(vs, p)
    v_cross, v_bar = est.x_max_, est.x_min_
    mid = 0.5 * (float(est.predict([v_cross])[0]) + float(est.predict([v_bar])[0]))
    v_split = est.solve(mid, min(v_cross, v_bar), max(v_cross, v_bar))
    p_cross = _measure(dev, {sid: v_cross}, ports)
    p_bar = _measure(dev, {sid: v_bar}, ports)
    flags = []
    if v_cross in (spec.v_min, spec.v_max) or v_bar in (spec.v_min, spec.v_max):
        flags.append("extremum_at_sweep_edge")
    return CalibrationEntry(
        ids=(sid,),
        kind="routing",
        v_cross=(v_cross,),
        v_bar=(v_bar,),
        extinction_db=_ext_db(p_bar, max(p_cross, float(p.max()))),
        ports=tuple(ports),
        fit=dict(zip(est.param_names, map(float, est.params_))),
        rmse=est.rmse_,
        p_cross=max(p_cross, float(p.max())),
        p_bar=p_bar,
        v_split=(v_split,),
        flags=flags,
        sweep={"columns": [sid, "power"], "data": np.column_stack([vs, p])},
    )


def _refine(dev, ids, start, ports, step, bounds, sign, flags, label, xtol=1e-3):
    """Nelder-Mead on live readings inside +/-1 grid step of ``start``."""
    lo = np.maximum(np.asarray(start) - step, bounds[0])
    hi = np.minimum(np.asarray(start) + step, bounds[1])
    clamped = [False]

    def f(x):
        xc = np.clip(x, lo, hi)
        if np.any(xc != x):
            clamped[0] = True
        return sign * _measure(dev, dict(zip(ids, xc)), ports)

    sim = np.array([start, start + [step / 2, 0], start + [0, step / 2]], dtype=float)
    res = nelder_mead(f, simplex=sim, xtol=xtol, max_fev=400)
    x = np.clip(res.x, lo, hi)
    if clamped[0] and (np.any(x <= bounds[0]) or np.any(x >= bounds[1])):
        flags.append(f"{label}_refinement_clamped")
    return x, sign * res.fun


def calibrate_switching_pair(
    dev: DeviceBackend,
    cps_a: str,
    cps_b: str,
    ports: Sequence[int],
    spec: SweepSpec = SWEEP_2D,
    refine: bool = True,
) -> CalibrationEntry:
    """Nested 2-D sweep of a switching CPS pair (outer ``cps_a``, inner ``cps_b``).

    The SPS of the same interferometer must already be at 0 V.  Grid
    arg-max/arg-min are refined against the device; refinement never
    returns a point worse than the grid extremum.  Leaves the pair at bar.
    """
    vs = spec.voltages()
    n = vs.size
    va, vb = np.repeat(vs, n), np.tile(vs, n)
    grid = sweep_readings(dev, {cps_a: va, cps_b: vb}, ports).sum(axis=1).reshape(n, n)
    ids = (cps_a, cps_b)
    flags: list[str] = []
    i_min = np.unravel_index(np.argmin(grid), grid.shape)
    i_max = np.unravel_index(np.argmax(grid), grid.shape)
    for label, idx in (("bar", i_min), ("cross", i_max)):
        if 0 in idx or n - 1 in idx:
            flags.append(f"{label}_on_grid_boundary")
    bar = np.array([vs[i_min[0]], vs[i_min[1]]])
    cross = np.array([vs[i_max[0]], vs[i_max[1]]])
    grid_min, grid_max = float(grid[i_min]), float(grid[i_max])
    p_bar_ref, p_cross_ref = grid_min, grid_max
    if refine:
        bounds = (spec.v_min, spec.v_max)
        x, val = _refine(dev, ids, bar, ports, spec.step, bounds, +1.0, flags, "bar")
        if val <= grid_min:
            bar, p_bar_ref = x, val
        x, val = _refine(dev, ids, cross, ports, spec.step, bounds, -1.0, flags, "cross")
        if val >= grid_max:
            cross, p_cross_ref = x, val
    p_cross = max(_measure(dev, dict(zip(ids, cross)), ports), grid_max)
    p_bar = _measure(dev, dict(zip(ids, bar)), ports)
    return CalibrationEntry(
        ids=ids,
        kind="switching",
        v_cross=tuple(map(float, cross)),
        v_bar=tuple(map(float, bar)),
        extinction_db=_ext_db(p_bar, p_cross),
        ports=tuple(ports),
        p_cross=p_cross,
        p_bar=p_bar,
        flags=flags,
        metrics={
            "grid_min_power": grid_min,
            "grid_max_power": grid_max,
            "refined_bar_power": p_bar_ref,
            "refined_cross_power": p_cross_ref,
        },
        sweep={"columns": [cps_a, cps_b, "power"], "data": np.column_stack([va, vb, grid.ravel()])},
    )


def calibrate_sps(
    dev: DeviceBackend,
    sid: str,
    ports: Sequence[int],
    spec: SweepSpec = SWEEP_SPS,
    noise_floor: float = 1e-6,
    tolerance: float = 1.0,
) -> CalibrationEntry:
    """SPS sweep with its CPS pair parked at bar; bar is 0 V by definition.

    The fitted minimum nearest 0 V is recorded as ``bar_offset_v``; more
    than ``tolerance`` volts away raises a :class:`CalibrationInconsistency`
    warning.  ``v_cross`` is the fitted maximum nearest 0 V inside the sweep.
    """
    vs = spec.voltages()
    p = sweep_readings(dev, {sid: vs}, ports).sum(axis=1)
    est = OffsetSineRegressor(noise_floor=noise_floor * len(ports)).fit(vs, p)
    crit = np.concatenate([[spec.v_min, spec.v_max], est.critical_points(spec.v_min, spec.v_max)])
    vals = est.predict(crit)
    mid = 0.5 * (vals.max() + vals.min())
    minima = crit[vals < mid]
    maxima = crit[vals >= mid]
    # nearest to 0 V; ties go to positive voltages
    v_min_fit = float(min(minima, key=lambda v: (abs(v), -v)))
    v_cross = float(min(maxima, key=lambda v: (abs(v), -v)))
    flags = []
    if abs(v_min_fit) > tolerance:
        flags.append("bar_not_at_zero")
        warnings.warn(
            f"{sid}: fitted minimum at {v_min_fit:.3f} V, expected 0 V", CalibrationInconsistency
        )
    p_cross = _measure(dev, {sid: v_cross}, ports)
    p_bar = _measure(dev, {sid: 0.0}, ports)
    return CalibrationEntry(
        ids=(sid,),
        kind="sps",
        v_cross=(v_cross,),
        v_bar=(0.0,),
        extinction_db=_ext_db(p_bar, max(p_cross, float(p.max()))),
        ports=tuple(ports),
        fit=dict(zip(est.param_names, map(float, est.params_))),
        rmse=est.rmse_,
        p_cross=max(p_cross, float(p.max())),
        p_bar=p_bar,
        flags=flags,
        metrics={"bar_offset_v": v_min_fit},
        sweep={"columns": [sid, "power"], "data": np.column_stack([vs, p])},
    )


# Each routing interferometer is monitored at its physical cross output,
# summing output and dump of everything downstream of that port.
ROUTING_PORTS = {"PS00": (2, 3, 6, 7), "PS10": (1, 5), "PS11": (3, 7)}


def route_to_channel(table: CalibrationTable, channel: int) -> dict[str, float]:
    """Routing voltages sending all light to ``channel``."""
    top = channel < 2
    second = "PS10" if top else "PS11"
    e0, e1 = table["PS00"], table[second]
    return {
        "PS00": (e0.v_bar if top else e0.v_cross)[0],
        second: (e1.v_cross if channel % 2 else e1.v_bar)[0],
    }


@dataclass(frozen=True)
class CalibrationPlan:
    sweep_1d: SweepSpec = SWEEP_1D
    sweep_2d: SweepSpec = SWEEP_2D
    sweep_sps: SweepSpec = SWEEP_SPS
    channels: tuple[int, ...] = (0, 1, 2, 3)
    refine: bool = True
    noise_floor: float = 1e-6


def calibrate_tree(
    dev: DeviceBackend,
    plan: CalibrationPlan = CalibrationPlan(),
    config_hash: str | None = None,
    shifter_ids: Sequence[str] | None = None,
) -> CalibrationTable:
    """Full-tree calibration; leaves the device in the operating state.

    On failure raises :class:`CalibrationAborted` carrying the partial table.
    """
    table = CalibrationTable(config_hash=config_hash)
    ids = list(shifter_ids or getattr(dev, "shifter_ids", None) or _default_ids())
    for sid in ids:
        dev.set_voltage(sid, 0.0)

    def stage(name, fn):
        try:
            entry = fn()
        except Exception as exc:
            raise CalibrationAborted(name, table, exc) from exc
        table.add(entry)
        log.info("%s: extinction %.1f dB", entry.key, entry.extinction_db)
        return entry

    e0 = stage("PS00", lambda: calibrate_routing_mzi(dev, "PS00", ROUTING_PORTS["PS00"], plan.sweep_1d, plan.noise_floor))
    dev.set_voltage("PS00", e0.v_bar[0])
    stage("PS10", lambda: calibrate_routing_mzi(dev, "PS10", ROUTING_PORTS["PS10"], plan.sweep_1d, plan.noise_floor))
    dev.set_voltage("PS00", e0.v_cross[0])
    stage("PS11", lambda: calibrate_routing_mzi(dev, "PS11", ROUTING_PORTS["PS11"], plan.sweep_1d, plan.noise_floor))

    for ch in plan.channels:
        for sid, v in route_to_channel(table, ch).items():
            dev.set_voltage(sid, v)
        a, b = pair_ids(ch)
        dev.set_voltage(sps_id(ch), 0.0)
        pair = stage(f"{a}+{b}", lambda: calibrate_switching_pair(dev, a, b, (ch,), plan.sweep_2d, plan.refine))
        for sid, v in zip(pair.ids, pair.v_bar):
            dev.set_voltage(sid, v)
        stage(sps_id(ch), lambda: calibrate_sps(dev, sps_id(ch), (ch,), plan.sweep_sps, plan.noise_floor))
        dev.set_voltage(sps_id(ch), 0.0)

    for sid, v in table.operating_voltages().items():
        dev.set_voltage(sid, v)
    return table


def _default_ids():
    return list(ROUTING_IDS) + [s for i in range(4) for s in (*pair_ids(i), sps_id(i))]


class TreeCalibrator(BaseEstimator):
    """Estimator-style wrapper: ``TreeCalibrator().fit(device).table_``."""

    def __init__(self, step_1d=0.1, step_2d=0.25, sps_range=12.5, refine=True, noise_floor=1e-6):
        self.step_1d = step_1d
        self.step_2d = step_2d
        self.sps_range = sps_range
        self.refine = refine
        self.noise_floor = noise_floor

    def _plan(self) -> CalibrationPlan:
        return CalibrationPlan(
            sweep_1d=SweepSpec(step=self.step_1d),
            sweep_2d=SweepSpec(step=self.step_2d),
            sweep_sps=SweepSpec(-self.sps_range, self.sps_range, self.step_1d),
            refine=self.refine,
            noise_floor=self.noise_floor,
        )

    def fit(self, dev, y=None, config_hash=None):
        self.table_ = calibrate_tree(dev, self._plan(), config_hash=config_hash)
        return self

    def transform(self, dev):
        """Apply the fitted operating voltages to ``dev``."""
        for sid, v in self.table_.operating_voltages().items():
            dev.set_voltage(sid, v)
        return dev
