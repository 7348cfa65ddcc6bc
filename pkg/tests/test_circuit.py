import math
import warnings
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from catconfine.circuit import (
    CircuitParams,
    coupling_strengths,
    design_search,
    effective_two_photon_rate,
    format_report,
    hierarchy_check,
)
from catconfine.errors import NearResonanceError

BASE = CircuitParams(E_J=50.0, eta=6e-4, phi_a=0.01, phi_h=0.5, phi_l=0.1, eps1=0.05, eps2=0.05,
                     omega_a=8.0, omega_h=6.0, omega_l=5.0, kappa_a=1e-5, kappa_bh=1e-4, kappa_bl=0.05)


def test_eta_zero_limit():
    p = replace(BASE, eta=0.0)
    c = coupling_strengths(p, warn=False)
    assert c.g2h == pytest.approx(p.E_J * p.phi_a**2 * p.phi_h * p.eps1 / 2, rel=1e-15)
    assert c.g2l == pytest.approx(p.E_J * p.phi_a**2 * p.phi_l * p.eps2 / 2, rel=1e-15)
    for k in ("chi_aa", "chi_hh", "chi_ll", "chi_ah", "chi_al", "chi_lh"):
        assert getattr(c, k) == 0.0


@given(st.floats(1e-5, 1e-2))
def test_eta_to_zero_is_continuous(eta):
    c0 = coupling_strengths(replace(BASE, eta=0.0), warn=False)
    c = coupling_strengths(replace(BASE, eta=eta), warn=False)
    # deviation of g2 is linear in eta
    assert abs(c.g2h - c0.g2h) <= 2 * eta * abs(c.s1) * BASE.E_J * BASE.phi_a**2 * BASE.phi_h


def test_cross_kerr_identity():
    c = coupling_strengths(BASE, warn=False)
    assert c.chi_ah**2 == pytest.approx(4 * c.chi_aa * c.chi_hh, rel=1e-12)
    assert c.chi_al**2 == pytest.approx(4 * c.chi_aa * c.chi_ll, rel=1e-12)
    assert c.chi_lh**2 == pytest.approx(4 * c.chi_ll * c.chi_hh, rel=1e-12)


def test_linear_in_josephson_energy():
    c1 = coupling_strengths(BASE, warn=False)
    c2 = coupling_strengths(replace(BASE, E_J=2 * BASE.E_J), warn=False)
    assert c2.chi_hh == pytest.approx(2 * c1.chi_hh, rel=1e-12)
    # s_k is linear in E_J too, so only the eta-free part of g2 doubles exactly
    p0 = replace(BASE, eta=0.0)
    assert coupling_strengths(replace(p0, E_J=100.0), warn=False).g2h == pytest.approx(
        2 * coupling_strengths(p0, warn=False).g2h, rel=1e-12)


def test_effective_two_photon_rate():
    assert effective_two_photon_rate(0.1, 1.0) == pytest.approx(0.04, rel=1e-15)
    with pytest.warns(RuntimeWarning):
        effective_two_photon_rate(0.5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        effective_two_photon_rate(0.2, 1.0)
    with pytest.raises(ValueError):
        effective_two_photon_rate(0.1, 0.0)


@given(st.floats(0.2, 0.9), st.floats(1.05, 1.5))
def test_buffer_kerr_grows_faster_than_tpe(ph, f):
    c1 = coupling_strengths(replace(BASE, phi_h=ph), warn=False)
    c2 = coupling_strengths(replace(BASE, phi_h=ph * f), warn=False)
    assert c2.chi_hh / abs(c2.g2h) > c1.chi_hh / abs(c1.g2h)


def test_near_resonance_rejected():
    # pump 1 lands on the low-Q buffer: 2 w_a - w_h = w_l
    p = replace(BASE, omega_h=11.0, omega_l=5.0)
    with pytest.raises(NearResonanceError):
        coupling_strengths(p, warn=False)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        replace(BASE, phi_a=0.0)
    with pytest.raises(ValueError):
        replace(BASE, eps1=1.5)
    with pytest.raises(ValueError):
        replace(BASE, omega_tilde={"q": 1.0})


def test_omega_tilde_moves_pumps():
    p = replace(BASE, omega_tilde={"a": 7.9})
    assert p.pump_frequencies() == pytest.approx((2 * 7.9 - 6.0, 2 * 7.9 - 5.0))


def test_hierarchy_pass_example():
    c = coupling_strengths(BASE, warn=False)
    rep = hierarchy_check(c)
    assert rep["pass"] and rep["min_margin"] >= 10
    assert not rep["recommendations"]
    assert "PASS" in format_report(c, rep)


def test_hierarchy_eta_zero_fails_with_advice():
    c = coupling_strengths(replace(BASE, eta=0.0), warn=False)
    rep = hierarchy_check(c)
    assert not rep["pass"]
    assert any("asymmetry" in r for r in rep["recommendations"])


def test_hierarchy_target_ratio():
    c = coupling_strengths(BASE, warn=False)
    achieved = abs(c.g2h) / c.kappa2_eff
    assert hierarchy_check(c, target_ratio=achieved)["checks"]["g2_over_kappa2"]["pass"]
    assert not hierarchy_check(c, target_ratio=achieved * 3)["pass"]


def test_design_search_meets_margin():
    start = replace(BASE, eta=1e-2, phi_h=0.2)
    assert not hierarchy_check(coupling_strengths(start, warn=False))["pass"]
    best, c, rep = design_search(start, etas=[1e-4, 3e-4, 6e-4, 1e-3, 1e-2], phi_hs=[0.2, 0.35, 0.5, 0.7])
    assert rep["pass"] and rep["min_margin"] >= 10
    assert math.isfinite(c.kappa2_eff)
