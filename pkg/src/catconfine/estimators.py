"""Closed-form bit-flip estimates and the rate / suppression-exponent fits.

Rate convention
---------------
A symmetric bit-flip process gives p_X(t) = (1 - exp(-Gamma t))/2.  The fit
returns the exponent ``Gamma``; the physical flip-event rate entering the
closed-form leakage estimates is dp_X/dt = Gamma/2 (``RateFit.flip_rate``).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FitError
from .spectra import ConfinedSpectrum

SINC_SERIES_BELOW = 1e-4
OVERLAP_CUTOFF = 1e-12
FIT_WINDOW = 5.0
MIN_COVERAGE = 10.0


def sinc(x):
    """sin(x)/x with a Taylor branch for |x| < 1e-4 (exactly 1 at 0)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < SINC_SERIES_BELOW
    xs = x[small]
    out[small] = 1.0 - xs * xs / 6.0 + xs**4 / 120.0
    xl = x[~small]
    out[~small] = np.sin(xl) / xl
    return out if out.ndim else float(out)


def _excited_terms(spectrum: ConfinedSpectrum):
    """(overlap, spacing) for n >= 1 with overlap above the cutoff."""
    lam = np.asarray(spectrum.overlaps[1:])
    d = np.asarray(spectrum.spacings[1:])
    keep = lam >= OVERLAP_CUTOFF
    return lam[keep], d[keep]


def kerr_bitflip_probability(t, kappa_l: float, spectrum: ConfinedSpectrum, kerr: float = 1.0,
                             warn: bool = True):
    """p_X(t) = kappa_l t sum_{n>0} lambda_n [1 - sinc(delta_n K t)] for a pure Kerr cat."""
    if spectrum.scheme != "kerr":
        raise ValueError("kerr_bitflip_probability needs a Kerr spectrum")
    t = np.asarray(t, dtype=float)
    if warn and np.any(kappa_l * t > 0.1):
        warnings.warn("kappa_l * t > 0.1: outside the small-probability regime", RuntimeWarning, stacklevel=2)
    lam, d = _excited_terms(spectrum)
    br = np.sum(lam[:, None] * (1.0 - sinc(np.outer(d * kerr, np.atleast_1d(t)))), axis=0)
    out = kappa_l * np.atleast_1d(t) * br
    return out if t.ndim else float(out[0])


def combined_kerr_rate(kappa_l: float, nbar: float, kappa_conf: float, spectrum: ConfinedSpectrum,
                       kerr: float = 1.0) -> float:
    """kappa_l e^{-2|a|^2} + kappa_l sum_{n>0} lambda_n [1 - sinc(K delta_n / kappa_conf)]."""
    if spectrum.scheme != "kerr":
        raise ValueError("combined_kerr_rate needs a Kerr spectrum")
    floor = kappa_l * math.exp(-2.0 * nbar)
    if kerr == 0 or math.isinf(kappa_conf):
        return floor
    lam, d = _excited_terms(spectrum)
    return floor + kappa_l * float(np.sum(lam * (1.0 - sinc(kerr * d / kappa_conf))))


def combined_tpe_rate(kappa_l: float, nbar: float, kappa_conf: float, spectrum: ConfinedSpectrum,
                      g2: float = 1.0) -> float:
    """kappa_l e^{-2|a|^2} + kappa_l sum_{n != 0} Lambda_n [1 - sinc(g2 Delta_n / kappa_conf)].

    The negative-energy branch mirrors the positive one (Delta_{-n} = -Delta_n,
    same overlaps), so the sum is twice the positive-branch sum.
    """
    if spectrum.scheme != "tpe":
        raise ValueError("combined_tpe_rate needs a TPE spectrum")
    floor = kappa_l * math.exp(-2.0 * nbar)
    if g2 == 0 or math.isinf(kappa_conf):
        return floor
    lam, d = _excited_terms(spectrum)
    return floor + 2.0 * kappa_l * float(np.sum(lam * (1.0 - sinc(g2 * d / kappa_conf))))


# --------------------------------------------------------------------- fits


@dataclass
class RateFit:
    rate: float          # exponent Gamma of p_X = (1 - e^{-Gamma t})/2
    intercept: float
    r2: float
    window: tuple
    npoints: int

    @property
    def flip_rate(self) -> float:
        """Flip-event rate dp_X/dt = Gamma/2."""
        return 0.5 * self.rate


def fit_exponential_rate(times, px=None, kappa_conf: float | None = None, t_min: float | None = None,
                         min_r2: float | None = 0.999) -> RateFit:
    """Least-squares slope of ln(1 - 2 p_X) on the late-time window.

    ``times`` may be a :class:`~catconfine.dynamics.Trajectory`.  The window
    starts at t kappa_conf = 5 (or ``t_min``) and the run must reach
    t kappa_conf >= 10.
    """
    if px is None and hasattr(times, "px"):
        traj = times
        times, px = traj.times, traj.px
        if kappa_conf is None:
            kappa_conf = traj.diagnostics.get("kappa_conf")
    times = np.asarray(times, dtype=float)
    px = np.asarray(px, dtype=float)
    if t_min is None:
        if not kappa_conf:
            raise FitError("need kappa_conf or an explicit t_min")
        if times[-1] * kappa_conf < MIN_COVERAGE * (1 - 1e-9):
            raise FitError(f"trajectory reaches t*kappa_conf = {times[-1] * kappa_conf:.3g} < {MIN_COVERAGE}")
        t_min = FIT_WINDOW / kappa_conf
    w = times >= t_min * (1 - 1e-12)
    if np.count_nonzero(w) < 3:
        raise FitError("fewer than 3 points in the fit window")
    arg = 1.0 - 2.0 * px[w]
    if np.any(arg <= 0):
        raise FitError("p_X reached 1/2 inside the window; rate not resolvable")
    y = np.log(arg)
    t = times[w]
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * t + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    if min_r2 is not None and r2 < min_r2:
        raise FitError(f"non-exponential late-time behaviour (R^2 = {r2:.6f} < {min_r2})")
    return RateFit(rate=float(-slope), intercept=float(icpt), r2=r2, window=(float(t[0]), float(t[-1])),
                   npoints=int(len(t)))


@dataclass
class GammaFit:
    gamma: float
    intercept: float
    window: tuple
    residual: float
    npoints: int


def fit_gamma(rates: Mapping[float, float], min_points: int = 4) -> GammaFit:
    """Fit ln Gamma = -gamma |alpha|^2 + c0 by uniformly weighted least squares."""
    items = sorted((float(k), float(v)) for k, v in rates.items())
    if len(items) < min_points:
        raise FitError(f"need at least {min_points} photon numbers, got {len(items)}")
    x = np.array([k for k, _ in items])
    g = np.array([v for _, v in items])
    if np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise FitError("rates must be positive and finite")
    y = np.log(g)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, c0), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((y - slope * x - c0) ** 2)))
    return GammaFit(gamma=float(-slope), intercept=float(c0), window=(float(x[0]), float(x[-1])),
                    residual=res, npoints=len(x))


def locate_threshold(ratios: Sequence[float], gammas: Sequence[float], level: float = 2.0) -> float:
    """First ratio where gamma falls below ``level``, log-linear interpolation.

    Returns ``inf`` when gamma never drops below the level and ``nan`` when it
    starts below it.
    """
    r = np.asarray(ratios, dtype=float)
    g = np.asarray(gammas, dtype=float)
    order = np.argsort(r)
    r, g = r[order], g[order]
    if g[0] < level:
        return float("nan")
    for i in range(1, len(r)):
        if g[i] < level:
            r0, r1 = r[i - 1], r[i]
            f = (g[i - 1] - level) / (g[i - 1] - g[i])
            if r0 > 0:
                return float(math.exp(math.log(r0) + f * (math.log(r1) - math.log(r0))))
            return float(r0 + f * (r1 - r0))
    return float("inf")


def write_rates_csv(rows: Iterable[Mapping], path: str | Path) -> Path:
    """Columns: scheme, nbar, ratio, Gamma_sim, Gamma_model, gamma."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["scheme", "nbar", "ratio", "Gamma_sim", "Gamma_model", "gamma"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
    return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12e}"
    return v
