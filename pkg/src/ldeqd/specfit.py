"""Fits for micro-PL spectroscopy data and a matching synthetic-data oracle.

All nonlinear fits use MINPACK Levenberg-Marquardt through
``scipy.optimize.least_squares`` (monotone in the residual, stopping on a
relative step below 1e-8 or 200 iterations per variable set). Counting
data are weighted with Poisson variances taken from the model, refreshed
for a few rounds so that the weights do not depend on the noisy counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .emission import HC_EV_NM

PEAK_MODELS = ("gaussian", "lorentzian", "voigt")
SYNTHETIC_MODELS = ("gaussian-peak", "power-law", "dolp", "monoexp", "two-level-hbt")
FWHM_GAUSS = 2 * math.sqrt(2 * math.log(2))
_XTOL = 1e-8
_MAX_ITER = 200
_WEIGHT_ROUNDS = 3


class FitError(RuntimeError):
    """Fit did not converge or the data cannot support the model."""


class DataError(ValueError):
    """Malformed dataset."""


# --------------------------------------------------------------------------
# datasets


def _uniform(x, name):
    d = np.diff(x)
    if d.size and not np.allclose(d, d[0], rtol=1e-6, atol=1e-12):
        raise DataError(f"{name} bins must be uniform")
    return float(d[0]) if d.size else 0.0


def _nonneg(counts, name="counts"):
    c = np.asarray(counts, dtype=float)
    if np.any(~np.isfinite(c)) or np.any(c < 0):
        raise DataError(f"{name} must be finite and >= 0")
    return c


@dataclass
class Spectrum:
    axis: np.ndarray
    counts: np.ndarray
    unit: str = "nm"  # "nm" (wavelength) or "eV" (photon energy)
    exposure_s: float | None = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.counts = _nonneg(self.counts)
        if self.unit not in ("nm", "eV"):
            raise DataError(f"spectrum unit must be 'nm' or 'eV', got {self.unit!r}")
        if self.axis.shape != self.counts.shape or self.axis.ndim != 1:
            raise DataError("axis and counts must be 1D arrays of equal length")
        d = np.diff(self.axis)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise DataError("spectrum axis must be strictly monotone")
        if np.any(self.axis <= 0):
            raise DataError("spectrum axis must be positive")

    def energy(self) -> np.ndarray:
        return self.axis if self.unit == "eV" else HC_EV_NM / self.axis

    def to_energy(self) -> "Spectrum":
        return Spectrum(self.energy(), self.counts.copy(), "eV", self.exposure_s)


@dataclass
class DecayHistogram:
    time: np.ndarray  # bin starts, ns
    counts: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.counts = _nonneg(self.counts)
        if self.time.shape != self.counts.shape or self.time.size < 2:
            raise DataError("time and counts must be 1D arrays of equal length >= 2")
        self.bin_width = _uniform(self.time, "time")
        if self.bin_width <= 0:
            raise DataError("time bins must increase")


@dataclass
class CoincidenceHistogram:
    delay: np.ndarray  # bin centres, ns
    counts: np.ndarray
    period: float  # laser repetition period, ns

    def __post_init__(self):
        self.delay = np.asarray(self.delay, dtype=float)
        self.counts = _nonneg(self.counts)
        if self.delay.shape != self.counts.shape or self.delay.size < 2:
            raise DataError("delay and counts must be 1D arrays of equal length >= 2")
        self.bin_width = _uniform(self.delay, "delay")
        if self.bin_width <= 0:
            raise DataError("delay bins must increase")
        if not self.period > 0:
            raise DataError("repetition period must be > 0")


@dataclass
class PowerSeries:
    power: np.ndarray
    intensity: np.ndarray


@dataclass
class PolarizationSweep:
    angle_deg: np.ndarray
    intensity: np.ndarray


# --------------------------------------------------------------------------
# results


@dataclass
class FitResult:
    model: str
    params: dict  # name -> value
    errors: dict  # name -> 1 sigma
    redchi: float
    converged: bool = True
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "converged": self.converged,
            "reduced_chi2": self.redchi,
            "parameters": {k: {"value": v, "sigma": self.errors.get(k, 0.0)} for k, v in self.params.items()},
            "flags": list(self.flags),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n"

    def to_text(self) -> str:
        lines = [f"model: {self.model}", f"converged: {str(self.converged).lower()}",
                 f"reduced_chi2: {self.redchi:.6g}", "parameter            value           sigma"]
        for k, v in self.params.items():
            lines.append(f"{k:<20} {v:<15.8g} {self.errors.get(k, 0.0):.3g}")
        for f in self.flags:
            lines.append(f"flag: {f}")
        return "\n".join(lines) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _lm(fun, x0, what):
    """Levenberg-Marquardt; returns (solution, covariance scale matrix J^T J ^-1, chi2)."""
    x0 = np.asarray(x0, dtype=float)
    r = optimize.least_squares(fun, x0, method="lm", xtol=_XTOL, ftol=1e-12, gtol=1e-12,
                               max_nfev=_MAX_ITER * (x0.size + 1))
    if not r.success or not np.all(np.isfinite(r.x)):
        raise FitError(f"{what}: optimizer did not converge ({r.message})")
    J = r.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J)
    return r.x, cov, float(np.sum(r.fun**2))


def _errors(cov, scale=1.0):
    return np.sqrt(np.clip(np.diag(cov), 0, None) * scale)


# --------------------------------------------------------------------------
# peak


def _profile(model, e, center, fwhm, eta=0.5):
    if model == "gaussian":
        s = fwhm / FWHM_GAUSS
        return np.exp(-0.5 * ((e - center) / s) ** 2)
    if model == "lorentzian":
        g = 0.5 * fwhm
        return g**2 / ((e - center) ** 2 + g**2)
    # Voigt with equal Gaussian and Lorentzian widths in the parametrization
    # fwhm_v = 0.5346 fL + sqrt(0.2166 fL^2 + fG^2) with fL = fG = f
    f = fwhm / (0.5346 + math.sqrt(0.2166 + 1.0))
    v = special.voigt_profile(e - center, f / FWHM_GAUSS, 0.5 * f)
    return v / special.voigt_profile(0.0, f / FWHM_GAUSS, 0.5 * f)


def fit_gaussian_peak(s: Spectrum, window=None, model: str = "gaussian") -> FitResult:
    """Peak + constant fitted on the photon-energy axis.

    ``window`` = (lo, hi) in the spectrum's own axis unit. Returns center in nm,
    FWHM in ueV, amplitude (counts) and offset (counts).
    """
    if model not in PEAK_MODELS:
        raise ValueError(f"model must be one of {PEAK_MODELS}")
    x = s.axis
    sel = np.ones(x.size, bool) if window is None else (x >= min(window)) & (x <= max(window))
    e = s.energy()[sel]
    y = s.counts[sel]
    order = np.argsort(e)
    e, y = e[order], y[order]
    if e.size < 8:
        raise FitError("peak window holds fewer than 8 bins")
    # moment-based start values on a rough baseline
    base = float(np.percentile(y, 10))
    ypk = np.clip(y - base, 0, None)
    if ypk.sum() <= 0:
        raise FitError("no peak above the baseline in the window")
    i0 = int(np.argmax(ypk))
    half = ypk[i0] / 2
    above = np.nonzero(ypk >= half)[0]
    fw0 = max(e[above[-1]] - e[above[0]], 2 * np.median(np.diff(e)))
    # scale energies to the start width so LM works on O(1) numbers
    e0, sc = e[i0], fw0
    u = (e - e0) / sc
    w = np.ones_like(y)
    pu = np.array([ypk[i0], 0.0, 1.0, base])
    for _ in range(_WEIGHT_ROUNDS):
        def res(p, w=w):
            return (p[0] * _profile(model, u, p[1], p[2]) + p[3] - y) * w
        pu, cov, chi2 = _lm(res, pu, "peak fit")
        m = pu[0] * _profile(model, u, pu[1], pu[2]) + pu[3]
        w = 1.0 / np.sqrt(np.clip(m, 1.0, None))
    dof = max(y.size - 4, 1)
    redchi = chi2 / dof
    err = _errors(cov)
    center_e = e0 + pu[1] * sc
    fwhm_e = abs(pu[2]) * sc
    flags = []
    bins = np.median(np.abs(np.diff(e)))
    if fwhm_e < 2 * bins:
        flags.append("fwhm-below-2-bin-resolution")
    if not (e[0] <= center_e <= e[-1]):
        flags.append("center-outside-window")
    return FitResult(
        model=f"{model}-peak",
        params={
            "center_nm": HC_EV_NM / center_e,
            "center_eV": center_e,
            "fwhm_ueV": fwhm_e * 1e6,
            "amplitude": pu[0],
            "offset": pu[3],
        },
        errors={
            "center_nm": HC_EV_NM / center_e**2 * err[1] * sc,
            "center_eV": err[1] * sc,
            "fwhm_ueV": err[2] * sc * 1e6,
            "amplitude": err[0],
            "offset": err[3],
        },
        redchi=redchi,
        flags=flags,
    )


# --------------------------------------------------------------------------
# power law


def fit_power_law(powers, intensities) -> FitResult:
    """I = A P^alpha by linear least squares on log I = log A + alpha log P.

    Unweighted, so ``redchi`` is the residual variance of log I.
    """
    P = np.asarray(powers, dtype=float)
    I = np.asarray(intensities, dtype=float)
    if P.shape != I.shape or P.ndim != 1:
        raise DataError("powers and intensities must be 1D arrays of equal length")
    if P.size < 4:
        raise DataError("power-law fit needs at least 4 points")
    if np.any(P <= 0):
        raise DataError("powers must be positive")
    if np.any(I <= 0):
        raise DataError("intensities must be positive for a log-log fit")
    X = np.column_stack([np.ones_like(P), np.log(P)])
    yv = np.log(I)
    coef, *_ = np.linalg.lstsq(X, yv, rcond=None)
    r = yv - X @ coef
    dof = P.size - 2
    s2 = float(r @ r) / dof
    cov = np.linalg.inv(X.T @ X) * s2
    err = np.sqrt(np.diag(cov))
    return FitResult(
        model="power-law",
        params={"alpha": float(coef[1]), "amplitude": float(np.exp(coef[0]))},
        errors={"alpha": float(err[1]), "amplitude": float(np.exp(coef[0]) * err[0])},
        redchi=s2,
    )


# --------------------------------------------------------------------------
# polarization


def fit_dolp(angles_deg, intensities) -> FitResult:
    """I(theta) = A (1 + Pi cos 2(theta - theta0)), solved as a linear model.

    Writing I = a + b cos 2theta + c sin 2theta gives Pi = sqrt(b^2 + c^2) / a
    and theta0 = atan2(c, b) / 2, which equals (Imax - Imin) / (Imax + Imin).
    Unweighted, so ``redchi`` is the residual variance in intensity units.
    """
    th = np.deg2rad(np.asarray(angles_deg, dtype=float))
    I = np.asarray(intensities, dtype=float)
    if th.shape != I.shape or th.ndim != 1:
        raise DataError("angles and intensities must be 1D arrays of equal length")
    if th.size < 8:
        raise FitError("DOLP fit needs at least 8 angles")
    # the model has period 180 deg; require no hole wider than 45 deg in it
    a = np.sort(np.mod(np.rad2deg(th), 180.0))
    gaps = np.diff(np.concatenate([a, [a[0] + 180.0]]))
    if gaps.max() > 45.0 + 1e-9:
        raise FitError("insufficient angular coverage: the half turn has a gap wider than 45 deg")
    X = np.column_stack([np.ones_like(th), np.cos(2 * th), np.sin(2 * th)])
    coef, *_ = np.linalg.lstsq(X, I, rcond=None)
    A, b, c = coef
    if A <= 0:
        raise FitError("mean intensity is not positive")
    r = I - X @ coef
    dof = max(th.size - 3, 1)
    s2 = float(r @ r) / dof
    cov = np.linalg.inv(X.T @ X) * s2
    amp = math.hypot(b, c)
    pi = amp / A
    # gradient of Pi with respect to (A, b, c)
    if amp > 0:
        g = np.array([-amp / A**2, b / (amp * A), c / (amp * A)])
        g0 = np.array([0.0, -c, b]) / (2 * amp**2)
    else:
        g = np.array([0.0, 1 / A, 1 / A]) / math.sqrt(2)
        g0 = np.zeros(3)
    theta0 = 0.5 * math.degrees(math.atan2(c, b)) % 180.0
    return FitResult(
        model="dolp",
        params={"dolp": pi, "theta0_deg": theta0, "mean_intensity": A},
        errors={
            "dolp": float(math.sqrt(max(g @ cov @ g, 0.0))),
            "theta0_deg": float(math.degrees(math.sqrt(max(g0 @ cov @ g0, 0.0)))),
            "mean_intensity": float(math.sqrt(cov[0, 0])),
        },
        redchi=s2,
    )


# --------------------------------------------------------------------------
# lifetime


def fit_monoexp(h: DecayHistogram, fit_start=None, fit_stop=None) -> FitResult:
    """N(t) = A exp(-(t - t_start) / tau) + B with Poisson weights.

    ``fit_start`` (ns) defaults to one bin after the histogram maximum, which
    keeps the instrument rising edge out of the window.
    """
    t, y = h.time, h.counts
    if fit_start is None:
        i0 = int(np.argmax(y)) + 1
    else:
        i0 = int(np.searchsorted(t, fit_start - 1e-9 * h.bin_width))
    i1 = t.size if fit_stop is None else int(np.searchsorted(t, fit_stop, side="right"))
    tt, yy = t[i0:i1] - t[i0], y[i0:i1]
    if tt.size < 20:
        raise FitError(f"lifetime window holds {tt.size} bins, at least 20 are needed")
    B0 = float(np.median(yy[-max(tt.size // 10, 1):]))
    A0 = max(float(yy[0]) - B0, 1.0)
    above = np.nonzero(yy - B0 < A0 / math.e)[0]
    tau0 = tt[above[0]] if above.size and above[0] > 0 else 0.3 * tt[-1]
    p = np.array([A0, tau0, B0])
    w = np.ones_like(yy)
    for _ in range(_WEIGHT_ROUNDS):
        def res(q, w=w):
            return (q[0] * np.exp(-tt / q[1]) + q[2] - yy) * w
        p, cov, chi2 = _lm(res, p, "lifetime fit")
        m = p[0] * np.exp(-tt / p[1]) + p[2]
        w = 1.0 / np.sqrt(np.clip(m, 1.0, None))
    err = _errors(cov)
    flags = []
    if p[1] < 2 * h.bin_width:
        flags.append("tau-below-2-bin-widths")
    if p[1] <= 0:
        raise FitError("lifetime fit returned a non-positive tau")
    return FitResult(
        model="monoexp",
        params={"tau_ns": p[1], "amplitude": p[0], "background": p[2], "fit_start_ns": float(t[i0])},
        errors={"tau_ns": err[1], "amplitude": err[0], "background": err[2], "fit_start_ns": 0.0},
        redchi=chi2 / max(tt.size - 3, 1),
        flags=flags,
    )


# --------------------------------------------------------------------------
# pulsed autocorrelation


def _peak_shape(d, tau, bw):
    """Bin-integrated unit-area two-sided exponential centred at 0."""
    lo, hi = d - bw / 2, d + bw / 2

    def cdf(x):
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / tau), 1 - 0.5 * np.exp(-np.maximum(x, 0) / tau))

    return cdf(hi) - cdf(lo)


def g2_raw(c: CoincidenceHistogram) -> tuple[float, float]:
    """Central-window counts over the mean side-window counts, one period each.

    Returns (g2, sigma) with Poisson counting errors.
    """
    T = c.period
    k = np.rint(c.delay / T).astype(int)
    inside = np.abs(c.delay - k * T) < T / 2
    kmax = int(np.floor((c.delay.max() - T / 2) / T + 1e-9))
    kmin = int(np.ceil((c.delay.min() + T / 2) / T - 1e-9))
    sides = [j for j in range(kmin, kmax + 1) if j != 0]
    if not sides or kmin > 0 or kmax < 0:
        raise FitError("histogram does not cover the zero-delay peak and a side peak")
    n0 = c.counts[inside & (k == 0)].sum()
    ns = np.array([c.counts[inside & (k == j)].sum() for j in sides])
    m = ns.mean()
    if m <= 0:
        raise FitError("side peaks are empty")
    g = n0 / m
    sig = math.sqrt(n0 / m**2 + g**2 / (ns.sum()))
    return float(g), float(sig)


def fit_g2_pulsed(c: CoincidenceHistogram, n_side: int | None = None) -> FitResult:
    """Simultaneous fit of the pulsed-HBT peak train.

    Every peak k is a_k * two-sided exponential (common decay tau) at delay
    k*T on a flat background; g2(0) = a_0 / mean(a_k, k != 0).
    """
    T, bw = c.period, c.bin_width
    d, y = c.delay, c.counts
    # peaks whose centre lies in the data are modelled; only those with a
    # complete one-period window enter the side-peak mean
    ks = np.arange(int(np.ceil(d.min() / T - 1e-9)), int(np.floor(d.max() / T + 1e-9)) + 1)
    full = (ks * T - T / 2 >= d.min() - bw) & (ks * T + T / 2 <= d.max() + bw)
    if n_side is not None:
        keep = np.abs(ks) <= n_side + 1
        ks, full = ks[keep], full[keep] & (np.abs(ks[keep]) <= n_side)
        sel = np.abs(d) < (n_side + 1.5) * T
        d, y = d[sel], y[sel]
    if 0 not in ks[full]:
        raise FitError("histogram does not contain the complete zero-delay peak")
    n_full_side = int(np.sum(full & (ks != 0)))
    if n_full_side < 5:
        raise FitError(f"only {n_full_side} side peaks are fully inside the histogram, 5 are needed")
    g_raw, g_raw_err = g2_raw(c)

    # start values: window sums and a width from the side-peak second moment
    k_of = np.clip(np.rint(d / T).astype(int), ks.min(), ks.max())
    b0 = max(float(np.percentile(y, 5)), 0.0)
    areas0 = np.array([max(y[k_of == k].sum() - b0 * np.sum(k_of == k), 0.0) for k in ks])
    off = d - k_of * T
    side_mask = k_of != 0
    wts = np.clip(y - b0, 0, None) * side_mask
    tau0 = float(np.sum(wts * np.abs(off)) / max(wts.sum(), 1e-12)) or T / 10
    tau0 = min(max(tau0, bw), T / 4)
    scale = max(areas0[full & (ks != 0)].mean(), 1.0)

    def model(p):
        tau, bg = p[0], p[1]
        a = p[2:] * scale
        out = np.full(d.size, bg)
        for ai, k in zip(a, ks):
            out += ai * _peak_shape(d - k * T, tau, bw)
        return out

    p = np.concatenate([[tau0, b0], areas0 / scale])
    w = np.ones_like(y)
    for _ in range(_WEIGHT_ROUNDS):
        def res(q, w=w):
            return (model(q) - y) * w
        p, cov, chi2 = _lm(res, p, "g2 fit")
        w = 1.0 / np.sqrt(np.clip(model(p), 1.0, None))
    if p[0] <= 0:
        raise FitError("g2 fit returned a non-positive peak decay time")
    err = _errors(cov)
    a = p[2:] * scale
    a_err = err[2:] * scale
    i0 = int(np.nonzero(ks == 0)[0][0])
    side = np.nonzero(full & (ks != 0))[0]
    ms = a[side].mean()
    if ms <= 0:
        raise FitError("fitted side-peak areas are not positive")
    g2 = max(a[i0], 0.0) / ms
    # first-order propagation with the full covariance of the areas
    grad = np.zeros(p.size)
    grad[2 + i0] = scale / ms
    grad[2 + side] = -a[i0] * scale / (ms**2 * side.size)
    g2_err = math.sqrt(max(grad @ cov @ grad, 0.0))
    flags = []
    if p[0] > T / 5:
        flags.append("peaks-overlap: decay time exceeds period/5, central window contaminated")
    return FitResult(
        model="g2-pulsed",
        params={"g2_zero": g2, "tau_peak_ns": p[0], "background": p[1], "g2_raw": g_raw},
        errors={"g2_zero": g2_err, "tau_peak_ns": err[0], "background": err[1], "g2_raw": g_raw_err},
        redchi=chi2 / max(y.size - p.size, 1),
        flags=flags,
        extra={"peak_index": ks.tolist(), "peak_areas": a.tolist(), "peak_area_sigmas": a_err.tolist()},
    )


# --------------------------------------------------------------------------
# synthetic data


_DEFAULTS = {
    "gaussian-peak": dict(center_nm=1544.0, fwhm_ueV=390.0, snr=20.0, background=5.0,
                          half_window_nm=3.0, bin_nm=0.02),
    "power-law": dict(alpha=1.3, amplitude=100.0, p_min=1.0, decades=1.5, n_points=12, rel_noise=0.05),
    "dolp": dict(dolp=0.06, theta0_deg=30.0, mean_intensity=1000.0, step_deg=10.0, span_deg=360.0,
                 rel_noise=0.02),
    "monoexp": dict(tau_ns=1.52, peak_counts=1e4, background=5.0, bin_ns=0.025, window_ns=12.5,
                    onset_ns=1.0, rise_bins=3),
    "two-level-hbt": dict(g2_zero=0.141, tau_ns=1.5, period_ns=12.5, side_peak_counts=400.0,
                          n_side=6, background=0.5, bin_ns=0.1),
}


def synthetic_defaults(model: str) -> dict:
    if model not in _DEFAULTS:
        raise ValueError(f"unknown synthetic model {model!r}; choose from {SYNTHETIC_MODELS}")
    return dict(_DEFAULTS[model])


def generate_synthetic(model: str, params: dict | None = None, noise: str = "default", seed: int = 0):
    """Deterministic synthetic dataset for ``model``.

    ``noise`` is ``"default"`` (Poisson counting for histograms and spectra,
    multiplicative Gaussian for power and polarization series) or ``"none"``.
    Unknown parameter names raise.
    """
    p = synthetic_defaults(model)
    for k, v in (params or {}).items():
        if k not in p:
            raise ValueError(f"{model}: unknown parameter {k!r} (known: {sorted(p)})")
        p[k] = v
    if noise not in ("default", "none"):
        raise ValueError("noise must be 'default' or 'none'")
    noisy = noise == "default"
    rng = np.random.default_rng(seed)

    if model == "gaussian-peak":
        if p["fwhm_ueV"] <= 0 or p["snr"] <= 0:
            raise ValueError("fwhm_ueV and snr must be positive")
        lam = np.arange(p["center_nm"] - p["half_window_nm"], p["center_nm"] + p["half_window_nm"] + 1e-9,
                        p["bin_nm"])
        e = HC_EV_NM / lam
        amp = p["snr"] ** 2  # Poisson: peak / sqrt(peak) = snr
        m = amp * _profile("gaussian", e, HC_EV_NM / p["center_nm"], p["fwhm_ueV"] * 1e-6) + p["background"]
        return Spectrum(lam, rng.poisson(m).astype(float) if noisy else m, "nm")

    if model == "power-law":
        if p["n_points"] < 2 or p["p_min"] <= 0:
            raise ValueError("need n_points >= 2 and p_min > 0")
        P = p["p_min"] * np.logspace(0, p["decades"], int(p["n_points"]))
        I = p["amplitude"] * P ** p["alpha"]
        if noisy:
            I = I * np.exp(p["rel_noise"] * rng.standard_normal(P.size))
        return PowerSeries(P, I)

    if model == "dolp":
        if not 0 <= p["dolp"] <= 1:
            raise ValueError("dolp must lie in [0, 1]")
        th = np.arange(0.0, p["span_deg"], p["step_deg"])
        I = p["mean_intensity"] * (1 + p["dolp"] * np.cos(2 * np.deg2rad(th - p["theta0_deg"])))
        if noisy:
            I = I + p["rel_noise"] * p["mean_intensity"] * rng.standard_normal(th.size)
        return PolarizationSweep(th, I)

    if model == "monoexp":
        if p["tau_ns"] <= 0:
            raise ValueError("tau_ns must be positive")
        t = np.arange(0.0, p["window_ns"], p["bin_ns"])
        i_on = int(round(p["onset_ns"] / p["bin_ns"]))
        m = np.full(t.size, float(p["background"]))
        decay = t >= t[i_on]
        m[decay] += p["peak_counts"] * np.exp(-(t[decay] - t[i_on]) / p["tau_ns"])
        rb = int(p["rise_bins"])
        for j in range(1, rb + 1):
            if i_on - j >= 0:
                m[i_on - j] += p["peak_counts"] * (rb + 1 - j) / (rb + 1) * 0.5
        return DecayHistogram(t, rng.poisson(m).astype(float) if noisy else m)

    # two-level-hbt: coincidences at k*T with two-sided exponential delay spread
    if p["g2_zero"] < 0 or p["tau_ns"] <= 0 or p["period_ns"] <= 0:
        raise ValueError("g2_zero >= 0, tau_ns > 0 and period_ns > 0 are required")
    T, n_side, bw = p["period_ns"], int(p["n_side"]), p["bin_ns"]
    half = (n_side + 0.5) * T
    nb = int(round(2 * half / bw))
    edges = -half + bw * np.arange(nb + 1)
    centres = 0.5 * (edges[1:] + edges[:-1])
    counts = np.zeros(nb)
    for k in range(-n_side, n_side + 1):
        mean = p["side_peak_counts"] * (p["g2_zero"] if k == 0 else 1.0)
        if noisy:
            n = rng.poisson(mean)
            dt = k * T + rng.laplace(0.0, p["tau_ns"], n)
            counts += np.histogram(dt, edges)[0]
        else:
            counts += mean * _peak_shape(centres - k * T, p["tau_ns"], bw)
    bg = p["background"]
    counts += rng.poisson(bg, nb) if noisy else bg
    return CoincidenceHistogram(centres, counts.astype(float), T)


# --------------------------------------------------------------------------
# two-column text I/O

_COLUMNS = {
    Spectrum: ("spectrum", "axis", "counts"),
    DecayHistogram: ("decay", "time_ns", "counts"),
    CoincidenceHistogram: ("coincidence", "delay_ns", "counts"),
    PowerSeries: ("power", "power", "intensity"),
    PolarizationSweep: ("polarization", "angle_deg", "intensity"),
}


def save_dataset(ds, path) -> None:
    """Two-column CSV with '#'-comment header carrying kind and units."""
    kind, c1, c2 = _COLUMNS[type(ds)]
    head = [f"# kind: {kind}"]
    if isinstance(ds, Spectrum):
        x, y = ds.axis, ds.counts
        c1 = "wavelength_nm" if ds.unit == "nm" else "energy_eV"
    elif isinstance(ds, DecayHistogram):
        x, y = ds.time, ds.counts
    elif isinstance(ds, CoincidenceHistogram):
        x, y = ds.delay, ds.counts
        head.append(f"# period_ns: {float(ds.period)!r}")
    elif isinstance(ds, PowerSeries):
        x, y = ds.power, ds.intensity
    else:
        x, y = ds.angle_deg, ds.intensity
    head.append(f"{c1},{c2}")
    with open(path, "w") as fh:
        fh.write("\n".join(head) + "\n")
        for a, b in zip(x, y):
            fh.write(f"{float(a)!r},{float(b)!r}\n")


def load_dataset(path, kind: str | None = None, period: float | None = None):
    """Read a file written by :func:`save_dataset` (or hand-made in that layout).

    ``kind`` overrides or supplies the ``# kind:`` header; ``period`` (ns)
    does the same for the ``# period_ns:`` header of coincidence data.
    """
    path = Path(path)
    meta = {}
    header = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, sep, val = s[1:].partition(":")
                if sep:
                    meta[key.strip().lower()] = val.strip()
                continue
            parts = [q.strip() for q in s.replace(";", ",").replace("\t", ",").split(",")]
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, found {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                if header is None and not rows:
                    header = [q.lower() for q in parts]
                    continue
                raise DataError(f"{path}:{lineno}: cannot parse {s!r} as two numbers") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    kind = kind or meta.get("kind")
    if kind is None:
        raise DataError(f"{path}: dataset kind unknown (add a '# kind:' header)")
    x, y = np.array(rows).T
    try:
        if kind == "spectrum":
            unit = "eV" if header and "ev" in header[0] else "nm"
            return Spectrum(x, y, unit)
        if kind == "decay":
            if header and header[0].endswith("_ps"):
                x = x * 1e-3
            return DecayHistogram(x, y)
        if kind == "coincidence":
            if period is not None:
                meta["period_ns"] = period
            if "period_ns" not in meta:
                raise DataError(f"{path}: coincidence data need a '# period_ns:' header")
            if header and header[0].endswith("_ps"):
                x = x * 1e-3
            return CoincidenceHistogram(x, y, float(meta["period_ns"]))
        if kind == "power":
            return PowerSeries(x, y)
        if kind == "polarization":
            return PolarizationSweep(x, y)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    raise DataError(f"{path}: unknown dataset kind {kind!r}")
