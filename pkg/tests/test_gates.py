import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from catconfine.dynamics import ConfinementConfig, NoiseConfig
from catconfine.fock import OscillatorSpace
from catconfine.gates import (
    CnotConfig,
    ZGateConfig,
    _gaussian_profile,
    cnot_dim,
    cnot_feedforward,
    cnot_loss_model,
    cnot_na_model,
    cnot_optimum_model,
    cnot_simulate,
    constant_drive_amplitude,
    linear_plus_inverse_optimum,
    optimum_from_samples,
    phase_breakdown,
    sfb_zgate_reduced,
    superadiabatic_drive,
    zgate_na_model,
    zgate_optimum_model,
    zgate_simulate,
)
from catconfine.fock import coherent_state


# ------------------------------------------------------------------ models


def test_zgate_na_dissipative_value():
    # pi^2 / (16 * 64 * T) at |alpha|^2 = 8, T = 1
    assert zgate_na_model(8.0, math.pi, 1.0) == pytest.approx(math.pi**2 / 1024, rel=1e-12)
    assert zgate_na_model(8.0, math.pi, 1.0) == pytest.approx(9.64e-3, rel=1e-3)


def test_zgate_na_suppression_factors():
    base = zgate_na_model(8.0, math.pi, 1e6)
    assert zgate_na_model(8.0, math.pi, 1e6, kerr=0.3) == pytest.approx(base / 1.36, rel=1e-12)
    assert zgate_na_model(8.0, math.pi, 1e6, g2=10.0) == pytest.approx(base / 401, rel=1e-6)


def test_zgate_na_large_T_improvement_is_401():
    T = 1e8
    r = zgate_na_model(8.0, math.pi, T) / zgate_na_model(8.0, math.pi, T, g2=10.0)
    assert r == pytest.approx(401.0, rel=1e-6)


def test_cnot_na_dissipative_value():
    assert cnot_na_model(4.0, 1.0, "dissipative") == pytest.approx(math.pi**2 / 256, rel=1e-12)
    assert cnot_na_model(4.0, 1.0, "combined_kerr", kerr=0.3) == pytest.approx(math.pi**2 / 256 / 1.36)


def test_cnot_loss_model_split():
    b = cnot_loss_model(4.0, 2.0, 1e-3, 0.01)
    assert b["p_Zt"] == b["p_ZcZt"] == pytest.approx(4e-3)
    assert b["p_Zc"] == pytest.approx(8e-3 + 0.01)


@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0))
def test_linear_plus_inverse_optimum(A, B):
    T, p = linear_plus_inverse_optimum(A, B)
    assert A * T + B / T == pytest.approx(p, rel=1e-12)
    for f in (0.9, 1.1):
        assert A * f * T + B / (f * T) >= p


def test_zgate_optimum_model_dissipative_closed_form():
    nbar, k1 = 8.0, 1e-3
    T, p = zgate_optimum_model(nbar, math.pi, k1)
    Tc, pc = linear_plus_inverse_optimum(k1 * nbar, math.pi**2 / (16 * nbar**2))
    assert T == pytest.approx(Tc, rel=1e-4)
    assert p == pytest.approx(pc, rel=1e-8)


def test_cnot_optimum_model_orders_schemes():
    _, pd = cnot_optimum_model(4.0, 1e-3, "dissipative")
    _, pt = cnot_optimum_model(4.0, 1e-3, "combined_tpe", g2=10.0)
    assert pt < pd


def test_optimum_from_samples_parabola():
    Ts = np.array([0.5, 1.0, 2.0, 4.0, 8.0])
    ps = (np.log(Ts) - math.log(2.3)) ** 2 + 0.01
    T, p = optimum_from_samples(Ts, ps)
    assert T == pytest.approx(2.3, rel=1e-6)
    assert p == pytest.approx(0.01, abs=1e-9)


# ------------------------------------------------------------ drive shapes


@pytest.mark.parametrize("gap", [math.inf, 3.0, 40.0])
def test_superadiabatic_normalization(gap):
    T, theta, ra = 2.0, math.pi / 2, 2.0
    t = np.linspace(0, T, 20001)
    eps = superadiabatic_drive(t, T, theta, gap, ra)
    assert 4 * ra * np.trapezoid(eps, t) == pytest.approx(theta, rel=1e-8)


def test_gaussian_profile_boundaries():
    om, dom, _, _ = _gaussian_profile(3.0, None)
    for t in (0.0, 3.0):
        assert abs(om(t)) < 1e-14 and abs(dom(t)) < 1e-14
    assert superadiabatic_drive(-0.1, 3.0, 1.0, 5.0, 1.0) == 0.0


def test_superadiabatic_infinite_gap_is_bare_gaussian():
    T = 1.0
    om, _, _, integral = _gaussian_profile(T, None)
    t = np.linspace(0, T, 11)
    amp = 1.0 / (4 * 1.5 * integral)
    assert np.allclose(superadiabatic_drive(t, T, 1.0, math.inf, 1.5), amp * om(t))


# -------------------------------------------------------------- Z gate runs


def test_zgate_zero_angle_no_error():
    sp_ = OscillatorSpace.for_alpha(math.sqrt(2.0))
    rep = zgate_simulate(sp_, ZGateConfig(theta=0.0, T_gate=1.0))
    assert constant_drive_amplitude(0.0, 1.0, 1.0) == 0.0
    assert abs(rep.p_Z) < 1e-9


def test_zgate_angle_additivity():
    sp_ = OscillatorSpace.for_alpha(math.sqrt(2.0))
    conf = ConfinementConfig(kappa2=1.0)
    full = zgate_simulate(sp_, ZGateConfig(theta=math.pi, T_gate=2.0, confinement=conf))
    half = zgate_simulate(sp_, ZGateConfig(theta=math.pi / 2, T_gate=1.0, confinement=conf))
    # second half continues from the first half's state; same constant drive amplitude
    rho = half.diagnostics["final_state"]
    second = zgate_simulate(sp_, ZGateConfig(theta=math.pi / 2, T_gate=1.0, confinement=conf), rho0=rho)
    assert np.allclose(second.diagnostics["final_state"], full.diagnostics["final_state"], atol=1e-8)


def test_zgate_error_decreases_with_time():
    sp_ = OscillatorSpace.for_alpha(2.0)
    ps = [zgate_simulate(sp_, ZGateConfig(T_gate=T)).p_Z for T in (1.0, 4.0)]
    assert ps[1] < ps[0]
    assert ps[0] / ps[1] == pytest.approx(4.0, rel=0.3)


def test_zgate_trajectory_health_and_bitflip():
    sp_ = OscillatorSpace.for_alpha(math.sqrt(2.0))
    cfg = ZGateConfig(T_gate=1.0, noise=NoiseConfig(kappa1=1e-3, n_th=1e-2), measure_bitflip=True)
    rep = zgate_simulate(sp_, cfg)
    d = rep.diagnostics
    assert d["trace_error"] < 1e-6 and d["hermiticity_error"] < 1e-8
    assert 0 < rep.p_X < math.exp(-2 * 2.0)
    assert rep.model["p_Z_total"] > rep.model["p_Z_NA"]


def test_zgate_tpe_matches_model_order():
    sp_ = OscillatorSpace.for_alpha(2.0)
    rep = zgate_simulate(sp_, ZGateConfig(T_gate=2.0, confinement=ConfinementConfig(kappa2=1.0, g2=3.0)))
    assert rep.p_Z == pytest.approx(rep.model["p_Z_NA"], rel=0.3)


def test_sfb_quasistatic_equals_model():
    for kerr in (0.0, 0.3):
        r = sfb_zgate_reduced(8.0, kerr=kerr, T=2.0)
        assert r["p_Z_quasistatic"] == pytest.approx(zgate_na_model(8.0, math.pi, 2.0, kerr=kerr), rel=1e-9)


def test_sfb_reduced_close_to_quasistatic_at_long_times():
    r = sfb_zgate_reduced(8.0, kerr=0.3, T=10.0)
    assert r["p_Z"] == pytest.approx(r["p_Z_quasistatic"], rel=0.05)


# -------------------------------------------------------------------- CNOT


def test_cnot_dim_rule():
    assert [cnot_dim(x) for x in (2.0, 4.0, 6.0)] == [16, 20, 24]
    assert [cnot_dim(x, bitflip=True) for x in (2.0, 4.0, 6.0)] == [21, 26, 31]
    assert CnotConfig(nbar=6.0, measure_bitflip=True).mode_dim == 31


def test_feedforward_coherent_expectations():
    N, al = 20, 2.0
    s = OscillatorSpace(N, al)
    H = cnot_feedforward(s, s, al, 0.3).toarray()
    # control on either coherent branch with the target at |alpha>: zero mean energy
    for bc in (al, -al):
        psi = np.kron(coherent_state(s, bc, tail_tol=None), coherent_state(s, al, tail_tol=None))
        assert abs(np.vdot(psi, H @ psi).real) < 1e-6
    # |-alpha>_c with target in |n>: energy -eps (-4 alpha)(n - |alpha|^2)
    psi = np.kron(coherent_state(s, -al, tail_tol=None), np.eye(N)[6])
    assert np.vdot(psi, H @ psi).real == pytest.approx(-0.3 * (-4 * al) * (6 - al**2), rel=1e-6)


@given(st.floats(0, 0.2), st.floats(0, 0.2), st.floats(0, 0.2))
def test_phase_breakdown_roundtrip(pc, pt, pct):
    xc, xt, xx = 1 - 2 * (pc + pct), 1 - 2 * (pt + pct), 1 - 2 * (pc + pt)
    b = phase_breakdown(xc, xt, xx)
    assert b["p_Zc"] == pytest.approx(pc, abs=1e-12)
    assert b["p_Zt"] == pytest.approx(pt, abs=1e-12)
    assert b["p_ZcZt"] == pytest.approx(pct, abs=1e-12)
    assert b["reconstruction_residual"] < 1e-12


def test_cnot_tpe_sector_matches_full_rk():
    noise = NoiseConfig(kappa1=1e-3, n_th=1e-2, kappa_phi=1e-4)
    base = dict(scheme="combined_tpe", T_gate=1.0, nbar=2.0, g2=3.0, dim=10,
                noise_control=noise, noise_target=noise, measure_bitflip=True, bitflip_inputs=("10",))
    a = cnot_simulate(CnotConfig(**base))
    b = cnot_simulate(CnotConfig(**base, method="rk45"))
    assert a.diagnostics["route"] == "sector" and b.diagnostics["route"] == "rk45"
    for k in ("p_Zc", "p_Zt", "p_ZcZt"):
        assert a.breakdown[k] == pytest.approx(b.breakdown[k], abs=1e-7)
    assert a.p_X == pytest.approx(b.p_X, abs=1e-7)


def test_cnot_noise_free_only_control_errors():
    r = cnot_simulate(CnotConfig(scheme="combined_tpe", T_gate=2.0, nbar=2.0, g2=3.0))
    assert abs(r.breakdown["p_Zt"]) < 1e-6 and abs(r.breakdown["p_ZcZt"]) < 1e-6
    assert r.breakdown["p_Zc"] > 0


def test_cnot_error_decreases_with_time():
    ps = [cnot_simulate(CnotConfig(scheme="combined_tpe", T_gate=T, nbar=2.0, g2=3.0)).p_Z for T in (0.5, 2.0)]
    assert ps[1] < ps[0]


def test_cnot_config_validation():
    with pytest.raises(ValueError):
        CnotConfig(scheme="bogus")
    with pytest.raises(ValueError):
        CnotConfig(scheme="combined_tpe", target_confinement_off=False)
    with pytest.raises(ValueError):
        CnotConfig(T_gate=0.0)
