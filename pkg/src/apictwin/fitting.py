"""Least-squares curve fitters built on the package's Nelder-Mead minimiser.

Each model is a scikit-learn style regressor: hyperparameters go to the
constructor, ``fit(X, y)`` takes a 1-D abscissa (or an ``(n, 1)`` column)
and sets ``params_`` plus named attributes, ``predict`` evaluates the
fitted curve.  Parameter "errors" in ``param_scale_`` are estimates from
the final simplex, not a covariance matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .simplex import SimplexResult, nelder_mead
from .validation import as_feature, check_xy

GAUSS_FWHM = 2.0 * math.sqrt(2.0 * math.log(2.0))


class FitError(RuntimeError):
    pass


class NoModulationError(FitError):
    """Sweep data shows no usable sinusoidal modulation."""


class InitializationError(FitError):
    """No starting point could be derived from the data."""


class DegenerateProfileError(ValueError):
    pass


@dataclass
class FitResult:
    model: str
    params: dict[str, float]
    rmse: float
    n_points: int
    converged: bool
    scales: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params": {k: float(v) for k, v in self.params.items()},
            "scales": {k: float(v) for k, v in self.scales.items()},
            "rmse": float(self.rmse),
            "n_points": int(self.n_points),
            "converged": bool(self.converged),
            "flags": list(self.flags),
        }


def _simplex_scales(res: SimplexResult, decode, rmse: float, n_points: int) -> np.ndarray:
    """Rough 1-sigma scale per parameter from the final simplex.

    Along each edge from the best vertex the SSE is assumed quadratic, so a
    displacement ``d`` with SSE rise ``dS`` maps to ``|d| * sqrt(s2 / dS)``
    where ``s2`` is the residual variance per point.
    """
    best = decode(res.x)
    s2 = rmse**2
    out = np.zeros_like(best)
    for vx, fv in zip(res.simplex[1:], res.fsim[1:]):
        rise = fv - res.fun
        if rise <= 0:
            continue
        d = np.abs(decode(vx) - best)
        out = np.maximum(out, d * math.sqrt(s2 / rise))
    return out


class SimplexCurveFit(RegressorMixin, BaseEstimator):
    """Shared fit loop: multi-start Nelder-Mead on the sum of squared residuals."""

    model_name = "curve"
    param_names: tuple[str, ...] = ()
    min_points = 3

    def __init__(self, xtol=1e-10, max_iter=20000, restarts=3):
        self.xtol = xtol
        self.max_iter = max_iter
        self.restarts = restarts

    # hooks -----------------------------------------------------------------
    def _model(self, x, p):
        raise NotImplementedError

    def _starts(self, x, y):
        raise NotImplementedError

    def _encode(self, p):
        return np.asarray(p, dtype=float)

    def _decode(self, q):
        return np.asarray(q, dtype=float)

    def _finalize(self, p):
        return p

    def _flags(self, x, y, p):
        return []

    # sklearn surface ---------------------------------------------------------
    def fit(self, X, y):
        x, y = check_xy(X, y, self.min_points)
        best = None
        for p0 in self._starts(x, y):
            q0 = self._encode(p0)

            def sse(q):
                r = self._model(x, self._decode(q)) - y
                return float(r @ r)

            res = nelder_mead(
                sse, q0, xtol=self.xtol, max_iter=self.max_iter, max_fev=2 * self.max_iter,
                restarts=self.restarts,
            )
            if best is None or res.fun < best.fun:
                best = res
        if best is None:
            raise InitializationError("no starting point")
        p = self._finalize(self._decode(best.x))
        self.result_ = best
        self.params_ = p
        self.n_points_ = x.size
        self.rmse_ = math.sqrt(best.fun / x.size)
        self.converged_ = best.converged
        self.param_scale_ = _simplex_scales(best, self._decode, self.rmse_, x.size)
        self.flags_ = list(self._flags(x, y, p))
        for name, value in zip(self.param_names, p):
            setattr(self, name + "_", float(value))
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self._model(as_feature(X), self.params_)

    @property
    def fit_result_(self) -> FitResult:
        check_is_fitted(self, "params_")
        return FitResult(
            self.model_name,
            dict(zip(self.param_names, map(float, self.params_))),
            self.rmse_,
            self.n_points_,
            self.converged_,
            dict(zip(self.param_names, map(float, self.param_scale_))),
            list(self.flags_),
        )


def _wrap(phase):
    return (phase + math.pi) % (2 * math.pi) - math.pi


# -- offset sine ----------------------------------------------------------------


class OffsetSineRegressor(SimplexCurveFit):
    """``y = amplitude * sin(2 pi x / period + phase) + offset``.

    Starts from the best linear least-squares fit over a grid of periods.
    After fitting, ``x_max_`` / ``x_min_`` hold the arg-max / arg-min of the
    fitted curve restricted to the fitted abscissa range.
    """

    model_name = "offset_sine"
    param_names = ("amplitude", "offset", "period", "phase")
    min_points = 8

    def __init__(self, noise_floor=1e-6, n_periods=240, xtol=1e-11, max_iter=20000, restarts=3):
        super().__init__(xtol=xtol, max_iter=max_iter, restarts=restarts)
        self.noise_floor = noise_floor
        self.n_periods = n_periods

    def _model(self, x, p):
        a, b, period, phase = p
        return a * np.sin(2 * np.pi * x / period + phase) + b

    def _starts(self, x, y):
        span = x.max() - x.min()
        if span <= 0:
            raise NoModulationError("sweep has zero span")
        steps = np.diff(np.unique(x))
        lo = max(4 * float(np.median(steps)), span / 20)
        periods = np.geomspace(lo, 2.5 * span, self.n_periods)
        # linear least squares for every trial period at once
        w = 2 * np.pi * x[None, :] / periods[:, None]
        design = np.stack([np.sin(w), np.cos(w), np.ones_like(w)], axis=-1)
        coef = np.linalg.pinv(design) @ y
        r = np.einsum("pnk,pk->pn", design, coef) - y
        k = int(np.argmin(np.einsum("pn,pn->p", r, r)))
        period, (s, c, b) = float(periods[k]), coef[k]
        amp = math.hypot(s, c)
        if not amp > 10 * self.noise_floor:
            raise NoModulationError(
                f"modulation amplitude {amp:.3g} below 10x noise floor {self.noise_floor:.3g}"
            )
        return [np.array([amp, b, period, math.atan2(c, s)])]

    def _finalize(self, p):
        a, b, period, phase = p
        if a < 0:
            a, phase = -a, phase + math.pi
        if period < 0:
            period, phase = -period, -phase + math.pi
        return np.array([a, b, period, _wrap(phase)])

    def fit(self, X, y):
        super().fit(X, y)
        if not self.amplitude_ > 10 * self.noise_floor:
            raise NoModulationError(f"fitted amplitude {self.amplitude_:.3g} too small")
        x = as_feature(X)
        self.x_range_ = (float(x.min()), float(x.max()))
        self.x_max_, self.x_min_ = self.extrema(*self.x_range_)
        return self

    def critical_points(self, lo: float, hi: float) -> np.ndarray:
        check_is_fitted(self, "params_")
        period, phase = self.period_, self.phase_
        # 2 pi x / period + phase = pi/2 + k pi
        k0 = math.floor((2 * math.pi * lo / period + phase - math.pi / 2) / math.pi) - 1
        k1 = math.ceil((2 * math.pi * hi / period + phase - math.pi / 2) / math.pi) + 1
        ks = np.arange(k0, k1 + 1)
        xs = (math.pi / 2 + ks * math.pi - phase) * period / (2 * math.pi)
        return xs[(xs >= lo) & (xs <= hi)]

    def extrema(self, lo: float, hi: float) -> tuple[float, float]:
        """(arg-max, arg-min) of the fitted curve on ``[lo, hi]``."""
        cand = np.concatenate([[lo, hi], self.critical_points(lo, hi)])
        vals = self.predict(cand)
        return float(cand[np.argmax(vals)]), float(cand[np.argmin(vals)])

    def solve(self, level: float, x_from: float, x_to: float) -> float:
        """Abscissa between ``x_from`` and ``x_to`` where the curve equals ``level``.

        The curve must be monotone on that interval (e.g. between adjacent extrema).
        """
        f = lambda v: float(self.predict([v])[0]) - level
        fa, fb = f(x_from), f(x_to)
        if fa == 0:
            return float(x_from)
        if fb == 0:
            return float(x_to)
        if fa * fb > 0:
            raise ValueError(f"level {level!r} not bracketed on [{x_from}, {x_to}]")
        return float(brentq(f, x_from, x_to, xtol=1e-13, rtol=1e-14))


def fit_offset_sine(v, p, noise_floor: float = 1e-6) -> OffsetSineRegressor:
    """Fit a voltage sweep; the returned estimator carries ``x_max_``/``x_min_``."""
    return OffsetSineRegressor(noise_floor=noise_floor).fit(v, p)


# -- damped sinusoid --------------------------------------------------------------


def dominant_angular_frequency(t, y, pad: int = 16, snr: float = 10.0) -> float:
    """Angular frequency of the strongest non-DC spectral line (uniform sampling)."""
    t, y = check_xy(t, y, 4)
    yc = y - y.mean()
    if not np.any(np.abs(yc) > 1e-12 * max(1.0, np.abs(y).max())):
        raise InitializationError("signal is constant; no oscillation to lock onto")
    dt = float(np.median(np.diff(t)))
    n = pad * t.size
    spec = np.abs(np.fft.rfft(yc * np.hanning(t.size), n)) ** 2
    freqs = np.fft.rfftfreq(n, dt)
    lowest = pad * 2  # skip the DC lobe of the window
    if spec.size <= lowest + 1:
        raise InitializationError("record too short for a spectral estimate")
    k = lowest + int(np.argmax(spec[lowest:]))
    if spec[k] < snr * np.median(spec[lowest:]):
        raise InitializationError("no spectral peak above the noise")
    return 2 * math.pi * float(freqs[k])


class DampedSineRegressor(SimplexCurveFit):
    """``y = amplitude * exp(-t / tau) * sin(omega t + phase) + offset``."""

    model_name = "damped_sinusoid"
    param_names = ("amplitude", "omega", "phase", "tau", "offset")
    min_points = 8

    def _model(self, t, p):
        a, w, ph, tau, c = p
        return a * np.exp(-t / tau) * np.sin(w * t + ph) + c

    def _encode(self, p):
        a, w, ph, tau, c = p
        return np.array([a, w, ph, math.log(tau), c])

    def _decode(self, q):
        a, w, ph, ltau, c = q
        return np.array([a, w, ph, math.exp(min(ltau, 700.0)), c])

    def _starts(self, t, y):
        w = dominant_angular_frequency(t, y)
        span = t.max() - t.min()
        starts = []
        for tau in (span / 6, span / 2, 2 * span):
            env = np.exp(-t / tau)
            design = np.column_stack([env * np.sin(w * t), env * np.cos(w * t), np.ones_like(t)])
            (s, c, off), *_ = np.linalg.lstsq(design, y, rcond=None)
            starts.append(np.array([math.hypot(s, c), w, math.atan2(c, s), tau, off]))
        return starts

    def _finalize(self, p):
        a, w, ph, tau, c = p
        if a < 0:
            a, ph = -a, ph + math.pi
        if w < 0:
            w, ph = -w, -ph + math.pi
        return np.array([a, w, _wrap(ph), tau, c])


# -- exponential ----------------------------------------------------------------


class ExponentialRegressor(SimplexCurveFit):
    """``y = amplitude * exp(-t / lifetime) + background`` with amplitude >= 0."""

    model_name = "exponential"
    param_names = ("amplitude", "lifetime", "background")
    min_points = 2

    def __init__(self, fit_background=True, xtol=1e-11, max_iter=20000, restarts=3):
        super().__init__(xtol=xtol, max_iter=max_iter, restarts=restarts)
        self.fit_background = fit_background

    def _model(self, t, p):
        a, tau, b = p
        return a * np.exp(-t / tau) + b

    def _encode(self, p):
        a, tau, b = p
        q = [math.sqrt(max(a, 0.0)), math.log(tau)]
        return np.array(q + [b] if self.fit_background else q)

    def _decode(self, q):
        b = q[2] if self.fit_background else 0.0
        return np.array([q[0] ** 2, math.exp(min(q[1], 700.0)), b])

    def _starts(self, t, y):
        span = float(t.max() - t.min()) or 1.0
        b0 = float(np.min(y)) if self.fit_background and t.size > 3 else 0.0
        top = y - b0
        i0 = int(np.argmin(t))
        a0 = max(float(top[i0]), 1e-12)
        starts = []
        pos = top > 0
        if pos.sum() >= 2:
            slope = np.polyfit(t[pos], np.log(top[pos]), 1)[0]
            if slope < 0:
                starts.append(-1.0 / slope)
        starts += [span / 5, span]
        return [np.array([a0 * math.exp(t[i0] / tau), tau, b0]) for tau in starts]

    def _flags(self, t, y, p):
        a, tau, _ = p
        span = float(t.max() - t.min())
        scale = float(np.max(np.abs(y))) or 1.0
        if a <= 1e-9 * scale or tau > 10 * span:
            return ["non_decaying"]
        return []


# -- Voigt --------------------------------------------------------------------------


def _lorentz_hat(z, h, gamma):
    """Lorentzian (HWHM ``gamma``) convolved with a unit-height hat of half-width ``h``.

    ``z`` is the distance from the hat centre.  Closed form from the
    antiderivatives ``arctan(y/gamma)/pi`` and ``gamma/(2 pi) log(y^2 + gamma^2)``.
    """

    def f0(y):
        return np.arctan(y / gamma) / np.pi

    def f1(y):
        return gamma / (2 * np.pi) * np.log(y * y + gamma * gamma)

    def seg(a, b, slope_sign):
        # integral over s in [a, b] of (1 + slope_sign * s / h) * L(z - s)
        m0 = f0(z - a) - f0(z - b)
        m1 = z * (f0(z - a) - f0(z - b)) - (f1(z - a) - f1(z - b))
        return m0 + slope_sign * m1 / h

    return seg(-h, 0.0, +1.0) + seg(0.0, h, -1.0)


def voigt(x, center: float, lorentz_fwhm: float, gauss_sigma: float, points_per_sigma: int = 25):
    """Unit-area Voigt profile by direct numerical convolution.

    The Gaussian is sampled on a grid of step ``sigma / points_per_sigma``
    (at most FWHM/58) over +/-6 sigma.  When the Lorentzian is much wider
    than a grid step it is evaluated pointwise; otherwise the Gaussian is
    treated as piecewise linear between samples and each linear piece is
    convolved with the Lorentzian in closed form, which stays accurate down
    to a vanishing Lorentzian width; that branch is Richardson-extrapolated
    from steps h and 2h.  Pointwise relative error within five widths of the
    centre is below 5e-4 for every width ratio and near 1e-7 away from
    Lorentzian HWHM ~ sigma/100.  Pure limits return the closed forms.
    """
    x = np.asarray(x, dtype=float) - center
    lf, sg = float(lorentz_fwhm), float(gauss_sigma)
    if lf < 0 or sg < 0:
        raise ValueError("widths must be non-negative")
    if lf == 0 and sg == 0:
        raise DegenerateProfileError("Voigt profile needs a non-zero width")
    gamma = lf / 2
    if sg == 0:
        return gamma / np.pi / (x**2 + gamma**2)
    if lf == 0:
        return np.exp(-0.5 * (x / sg) ** 2) / (sg * math.sqrt(2 * math.pi))
    h = sg / points_per_sigma
    xs = x.reshape(-1)
    if gamma >= 10 * h:
        u, g = _gauss_grid(sg, h, points_per_sigma)
        z = xs[:, None] - u[None, :]
        return ((gamma / np.pi / (z * z + gamma * gamma) * h) @ g).reshape(x.shape)
    # interpolating branch is second order in h: Richardson-combine steps h and 2h
    n = points_per_sigma + points_per_sigma % 2
    fine = _hat_convolve(xs, sg, gamma, n)
    coarse = _hat_convolve(xs, sg, gamma, n // 2)
    return ((4 * fine - coarse) / 3).reshape(x.shape)


def _gauss_grid(sg, h, n):
    u = h * np.arange(-6 * n, 6 * n + 1)
    g = np.exp(-0.5 * (u / sg) ** 2)
    return u, g / (g.sum() * h)


def _hat_convolve(xs, sg, gamma, n):
    # Gaussian nodes sit on x + k h, so x itself is always a node and the
    # interpolation error is a smooth function of h
    h = sg / n
    m = np.round(xs / h)[:, None] + np.arange(-6 * n, 6 * n + 1)[None, :]
    u = xs[:, None] - m * h
    g = np.exp(-0.5 * (u / sg) ** 2) / (sg * math.sqrt(2 * math.pi))
    return np.sum(_lorentz_hat(xs[:, None] - u, h, gamma) * g, axis=1)


def voigt_fwhm(lorentz_fwhm: float, gauss_sigma: float) -> float:
    """Full width at half maximum of the evaluated profile, found by root bracketing."""
    lf, sg = float(lorentz_fwhm), float(gauss_sigma)
    if lf == 0 and sg == 0:
        raise DegenerateProfileError("Voigt profile needs a non-zero width")
    peak = float(voigt(0.0, 0.0, lf, sg))
    f = lambda x: float(voigt(x, 0.0, lf, sg)) - peak / 2
    hi = lf + GAUSS_FWHM * sg
    while f(hi) > 0:
        hi *= 2
    return 2 * brentq(f, 0.0, hi, xtol=1e-12 * hi, rtol=1e-12)


class VoigtRegressor(SimplexCurveFit):
    """``y = height * V(x - center) / V(0) + background`` with non-negative widths."""

    model_name = "voigt"
    param_names = ("center", "lorentz_fwhm", "gauss_sigma", "height", "background")
    min_points = 6

    def __init__(self, xtol=1e-9, max_iter=6000, restarts=2):
        super().__init__(xtol=xtol, max_iter=max_iter, restarts=restarts)

    def _model(self, x, p):
        c, lf, sg, height, bg = p
        if lf == 0 and sg == 0:
            return np.full_like(x, bg)
        prof = voigt(np.append(x, c), c, lf, sg)
        return height * prof[:-1] / prof[-1] + bg

    def _decode(self, q):
        c, lf, sg, height, bg = q
        return np.array([c, abs(lf), abs(sg), height, bg])

    def _starts(self, x, y):
        bg = float(np.percentile(y, 10))
        i = int(np.argmax(y))
        height = float(y[i] - bg)
        above = x[(y - bg) >= height / 2]
        fw = float(above.max() - above.min()) if above.size > 1 else float(np.ptp(x)) / 10
        fw = max(fw, float(np.median(np.diff(np.sort(x)))))
        c = float(x[i])
        mixes = [(0.9, 0.1), (0.5, 0.5), (0.1, 0.9)]
        return [np.array([c, a * fw, b * fw / GAUSS_FWHM, height, bg]) for a, b in mixes]

    def _finalize(self, p):
        return p

    def fit(self, X, y):
        super().fit(X, y)
        self.fwhm_ = voigt_fwhm(self.lorentz_fwhm_, self.gauss_sigma_)
        return self


def fit_voigt(x, y, **kw) -> VoigtRegressor:
    return VoigtRegressor(**kw).fit(x, y)


# -- g2 models ----------------------------------------------------------------------


def _g2_plateau(tau, g2):
    far = np.abs(tau) >= 0.6 * np.abs(tau).max()
    return float(np.median(g2[far])) if far.any() else float(np.median(g2))


def _half_width(tau, g2, i, c1, depth) -> float:
    """Full width of the contiguous region around ``tau[i]`` past half depth."""
    order = np.argsort(tau)
    t, g = tau[order], g2[order]
    j = int(np.flatnonzero(order == i)[0])
    inside = (g - c1) / depth >= 0.5 if depth != 0 else np.zeros(g.size, bool)
    lo = hi = j
    while lo > 0 and inside[lo - 1]:
        lo -= 1
    while hi < g.size - 1 and inside[hi + 1]:
        hi += 1
    return float(t[hi] - t[lo]) if hi > lo else float(np.ptp(t)) / 50


class G2LorentzianRegressor(SimplexCurveFit):
    """``g2 = c1 + c2 * (gamma/2)**2 / (tau**2 + (gamma/2)**2)``; ``g2(0) = c1 + c2``."""

    model_name = "g2_lorentzian"
    param_names = ("c1", "c2", "gamma")

    def _model(self, tau, p):
        c1, c2, g = p
        hw2 = (g / 2) ** 2
        return c1 + c2 * hw2 / (tau**2 + hw2)

    def _decode(self, q):
        return np.array([q[0], q[1], abs(q[2])])

    def _starts(self, tau, g2):
        c1 = _g2_plateau(tau, g2)
        i = int(np.argmin(np.abs(tau)))
        depth = float(g2[i] - c1)
        width = _half_width(tau, g2, i, c1, depth)
        width = max(width, float(np.median(np.diff(np.sort(tau)))))
        return [np.array([c1, depth, width * f]) for f in (0.5, 1.0, 2.0, 4.0)]

    def _flags(self, tau, g2, p):
        return ["non_antibunched"] if p[1] >= 0 else []

    def fit(self, X, y):
        super().fit(X, y)
        self.g2_zero_ = self.c1_ + self.c2_
        return self


class G2ThreeLevelRegressor(SimplexCurveFit):
    """Three-level antibunching with bunching shoulder.

    ``g2 = c1 + c2 * (1 - (1 + a) exp(-|tau|/tau1) + a exp(-|tau|/tau2))``
    subject to ``a >= 0`` and ``tau2 > tau1 > 0``; ``g2(0) = c1``.
    """

    model_name = "g2_three_level"
    param_names = ("c1", "c2", "a", "tau1", "tau2")

    def _model(self, tau, p):
        c1, c2, a, t1, t2 = p
        at = np.abs(tau)
        return c1 + c2 * (1 - (1 + a) * np.exp(-at / t1) + a * np.exp(-at / t2))

    def _encode(self, p):
        c1, c2, a, t1, t2 = p
        return np.array([c1, c2, math.sqrt(max(a, 0.0)), math.log(t1), math.log(max(t2 - t1, 1e-12))])

    def _decode(self, q):
        c1, c2, sa, lt1, ld = q
        t1 = math.exp(min(lt1, 700.0))
        return np.array([c1, c2, sa * sa, t1, t1 + math.exp(min(ld, 700.0))])

    def _starts(self, tau, g2):
        plateau = _g2_plateau(tau, g2)
        i = int(np.argmin(np.abs(tau)))
        c1 = float(g2[i])
        c2 = plateau - c1
        at = np.abs(tau)
        span = float(at.max())
        half = np.abs(g2 - plateau) <= abs(c2) / 2
        t1 = float(at[half].min()) / math.log(2) if half.any() and at[half].min() > 0 else span / 50
        t1 = max(t1, span / 1000)
        excess = (float(g2.max()) - plateau) / c2 if c2 > 0 else 0.0
        a0 = max(excess, 0.0) * 1.5
        starts = []
        for t2 in (3 * t1, 10 * t1, span / 4):
            if t2 > t1:
                starts.append(np.array([c1, c2, a0, t1, t2]))
            starts.append(np.array([c1, c2, 0.0, t1, max(t2, 2 * t1)]))
        return starts

    def _flags(self, tau, g2, p):
        c1, c2, a, t1, t2 = p
        flags = []
        if a > 1e-6 and (t2 - t1) <= 1e-3 * t1:
            flags.append("constraint_boundary")
        return flags

    def fit(self, X, y):
        super().fit(X, y)
        self.g2_zero_ = self.c1_
        return self
