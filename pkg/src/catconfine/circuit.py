"""Effective couplings of the ATS-based two-buffer circuit and design checks.

All frequencies and rates share one unit (whatever E_J is given in).  Mode
labels: ``a`` cat resonator, ``h`` high-Q buffer (TPE), ``l`` low-Q buffer
(two-photon dissipation).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

from .errors import NearResonanceError

MODES = ("a", "h", "l")
RESONANCE_FACTOR = 10.0
ADIABATIC_WARN = 0.3
DEFAULT_MARGIN = 10.0


@dataclass
class CircuitParams:
    E_J: float
    eta: float
    phi_a: float
    phi_h: float
    phi_l: float
    eps1: float
    eps2: float
    omega_a: float
    omega_h: float
    omega_l: float
    kappa_a: float
    kappa_bh: float
    kappa_bl: float
    # Stark-shifted frequencies used to place the pumps; bare values when None
    omega_tilde: dict | None = None
    alpha: complex = 0.0

    def __post_init__(self):
        for name in ("phi_a", "phi_h", "phi_l"):
            if not getattr(self, name) > 0:
                raise ValueError(f"participation ratio {name} must be positive")
        for name in ("kappa_a", "kappa_bh", "kappa_bl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("eps1", "eps2"):
            if abs(getattr(self, name)) >= 1:
                raise ValueError(f"pump amplitude {name} must satisfy |{name}| << 1")
        if self.omega_tilde is not None:
            bad = set(self.omega_tilde) - set(MODES)
            if bad:
                raise ValueError(f"omega_tilde keys must be among {MODES}, got {sorted(bad)}")

    def phi(self, x: str) -> float:
        return getattr(self, f"phi_{x}")

    def omega(self, x: str) -> float:
        return getattr(self, f"omega_{x}")

    def kappa(self, x: str) -> float:
        return self.kappa_a if x == "a" else getattr(self, f"kappa_b{x}")

    def shifted(self, x: str) -> float:
        if self.omega_tilde and x in self.omega_tilde:
            return float(self.omega_tilde[x])
        return self.omega(x)

    def pump_frequencies(self) -> tuple:
        """(omega_p1, omega_p2) = (2w~_a - w~_h, 2w~_a - w~_l)."""
        wa = self.shifted("a")
        return 2 * wa - self.shifted("h"), 2 * wa - self.shifted("l")


@dataclass
class EffectiveCouplings:
    g2h: complex
    g2l: complex
    chi_aa: float
    chi_hh: float
    chi_ll: float
    chi_ah: float
    chi_al: float
    chi_lh: float
    s1: complex
    s2: complex
    zeta_h: complex
    zeta_l: complex
    kappa2_eff: float
    pump_frequencies: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, complex):
                out[k] = {"re": v.real, "im": v.imag, "abs": abs(v)}
            else:
                out[k] = v
        return out


def _displacement_sum(p: CircuitParams, eps: float, wp: float) -> complex:
    """s_k = sum_x i E_J eps_k phi_x^2 / (i (w_x - w_pk) + kappa_x / 2)."""
    s = 0j
    for x in MODES:
        det = p.omega(x) - wp
        if abs(det) < RESONANCE_FACTOR * p.kappa(x) or det == 0:
            raise NearResonanceError(
                f"pump at {wp:.6g} within {RESONANCE_FACTOR:g} linewidths of mode {x} "
                f"(detuning {det:.3g}, kappa {p.kappa(x):.3g})"
            )
        s += 1j * p.E_J * eps * p.phi(x) ** 2 / (1j * det + p.kappa(x) / 2.0)
    return s


def effective_two_photon_rate(g2l: complex, kappa_bl: float, warn: bool = True) -> float:
    """kappa2 = 4 |g2l|^2 / kappa_bl (adiabatic elimination of the low-Q buffer)."""
    if kappa_bl <= 0:
        raise ValueError("kappa_bl must be positive")
    if warn and abs(g2l) / kappa_bl > ADIABATIC_WARN:
        warnings.warn(f"g2l/kappa_bl = {abs(g2l) / kappa_bl:.3g} > {ADIABATIC_WARN}: adiabatic elimination unreliable",
                      RuntimeWarning, stacklevel=2)
    return 4.0 * abs(g2l) ** 2 / kappa_bl


def coupling_strengths(params: CircuitParams, warn: bool = True) -> EffectiveCouplings:
    """TPE rates, self/cross Kerr terms, pump displacements and drive amplitudes.

    g2_h = E_J phi_a^2 phi_h (eps1/2 - eta s1), g2_l likewise with (phi_l, eps2, s2);
    chi_xx = eta E_J phi_x^4 / 2, chi_xy = eta E_J phi_x^2 phi_y^2; zeta_x = -alpha^2 g2_x.
    """
    p = params
    wp1, wp2 = p.pump_frequencies()
    s1 = _displacement_sum(p, p.eps1, wp1)
    s2 = _displacement_sum(p, p.eps2, wp2)
    base = p.E_J * p.phi_a**2
    g2h = base * p.phi_h * (p.eps1 / 2.0 - p.eta * s1)
    g2l = base * p.phi_l * (p.eps2 / 2.0 - p.eta * s2)
    ph = {x: p.phi(x) for x in MODES}
    chi = {x: p.eta * p.E_J * ph[x] ** 4 / 2.0 for x in MODES}

    def cross(x, y):
        return p.eta * p.E_J * ph[x] ** 2 * ph[y] ** 2

    a2 = complex(p.alpha) ** 2
    k2 = effective_two_photon_rate(g2l, p.kappa_bl, warn=warn) if p.kappa_bl > 0 else math.inf
    return EffectiveCouplings(
        g2h=complex(g2h), g2l=complex(g2l),
        chi_aa=chi["a"], chi_hh=chi["h"], chi_ll=chi["l"],
        chi_ah=cross("a", "h"), chi_al=cross("a", "l"), chi_lh=cross("l", "h"),
        s1=complex(s1), s2=complex(s2),
        zeta_h=-a2 * g2h, zeta_l=-a2 * g2l,
        kappa2_eff=k2, pump_frequencies=(wp1, wp2),
    )


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return math.inf if num > 0 else 0.0
    return num / den


def hierarchy_check(couplings: EffectiveCouplings, target_ratio: float | None = None,
                    margin: float = DEFAULT_MARGIN, ratio_tolerance: float = 0.2) -> dict:
    """Check chi_ah, chi_aa, chi_al << g2_h, g2_l << chi_hh.

    Each ``<<`` link passes when the smallest ratio across it is at least
    ``margin``.  With ``target_ratio`` the achieved |g2_h| / kappa2_eff is also
    compared against it (relative ``ratio_tolerance``).
    """
    c = couplings
    weak = max(abs(c.chi_ah), abs(c.chi_aa), abs(c.chi_al))
    g_lo = min(abs(c.g2h), abs(c.g2l))
    g_hi = max(abs(c.g2h), abs(c.g2l))
    m_low = _ratio(g_lo, weak)
    m_high = _ratio(abs(c.chi_hh), g_hi)
    checks = {
        "kerr_below_tpe": {"margin": m_low, "pass": m_low >= margin},
        "tpe_below_buffer_kerr": {"margin": m_high, "pass": m_high >= margin},
    }
    recs = []
    if not checks["kerr_below_tpe"]["pass"]:
        recs.append("decrease the junction asymmetry eta or raise the pump amplitudes: "
                    "spurious Kerr terms scale with eta, TPE rates with the pumps")
    if not checks["tpe_below_buffer_kerr"]["pass"]:
        if c.chi_hh == 0:
            recs.append("eta = 0 leaves the high-Q buffer harmonic; introduce a junction asymmetry")
        else:
            recs.append("increase phi_h (chi_hh grows as phi_h^4 while g2_h grows as phi_h) "
                        "or increase eta")
    if target_ratio is not None:
        achieved = _ratio(abs(c.g2h), c.kappa2_eff)
        ok = abs(achieved / target_ratio - 1.0) <= ratio_tolerance if math.isfinite(achieved) else False
        checks["g2_over_kappa2"] = {"value": achieved, "target": target_ratio, "pass": ok}
        if not ok:
            recs.append("retune the pump ratio eps1/eps2 to reach the target g2/kappa2")
    return {"checks": checks, "pass": all(v["pass"] for v in checks.values()),
            "min_margin": min(m_low, m_high), "recommendations": recs}


def format_report(couplings: EffectiveCouplings, report: dict) -> str:
    """Aligned text rendering of couplings and hierarchy margins."""
    lines = []
    for k, v in couplings.as_dict().items():
        if isinstance(v, dict):
            lines.append(f"{k:<18} {v['abs']:.6e}  (re {v['re']:.6e}, im {v['im']:.6e})")
        elif isinstance(v, (tuple, list)):
            lines.append(f"{k:<18} " + ", ".join(f"{x:.6e}" for x in v))
        else:
            lines.append(f"{k:<18} {v:.6e}")
    lines.append("")
    for name, chk in report["checks"].items():
        val = chk.get("margin", chk.get("value"))
        lines.append(f"{name:<24} {val:>12.4g}  {'PASS' if chk['pass'] else 'FAIL'}")
    for r in report["recommendations"]:
        lines.append(f"- {r}")
    return "\n".join(lines)


def design_search(params: CircuitParams, etas, phi_hs, target_ratio: float | None = None,
                  margin: float = DEFAULT_MARGIN):
    """Grid search over (eta, phi_h) maximizing the smallest hierarchy margin.

    Returns (best_params, couplings, report); points hitting a near-resonance
    are skipped.
    """
    from dataclasses import replace

    best = None
    for eta in etas:
        for ph in phi_hs:
            cand = replace(params, eta=float(eta), phi_h=float(ph))
            try:
                c = coupling_strengths(cand, warn=False)
            except NearResonanceError:
                continue
            rep = hierarchy_check(c, target_ratio, margin)
            key = (rep["pass"], rep["min_margin"])
            if best is None or key > best[0]:
                best = (key, cand, c, rep)
    if best is None:
        raise NearResonanceError("every grid point is near a resonance")
    return best[1], best[2], best[3]
