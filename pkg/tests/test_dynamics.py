import math

import numpy as np
import pytest
import scipy.sparse as sp

from catconfine.dynamics import (
    BufferConfig,
    ConfinementConfig,
    MasterEquation,
    NoiseConfig,
    build_system,
    evolve,
    idle_error_probabilities,
    liouvillian,
    mcwf_evolve,
    slow_rate,
)
from catconfine.errors import IntegrationError, MemoryBudgetError
from catconfine.estimators import fit_exponential_rate
from catconfine.fock import OscillatorSpace, annihilation, as_sparse, cat_state, coherent_state


def test_noise_config_validation_and_rates():
    with pytest.raises(ValueError):
        NoiseConfig(kappa1=-1)
    n = NoiseConfig(kappa1=1e-3, n_th=0.01, kappa_phi=1e-5)
    assert n.kappa_minus == pytest.approx(1e-3 * 1.01)
    assert n.kappa_plus == pytest.approx(1e-5)
    assert n.kappa_l(4.0) == pytest.approx(1e-5 + 4e-5)


def test_confinement_rejects_kerr_and_tpe_together():
    with pytest.raises(ValueError):
        ConfinementConfig(kerr=1.0, g2=1.0)


def test_liouvillian_matches_rhs():
    s = OscillatorSpace(6, 0.8)
    a = as_sparse(annihilation(s))
    H = (a.conj().T @ a + 0.3 * (a @ a + a.conj().T @ a.conj().T)).tocsr()
    c = [0.5 * a, 0.2 * (a @ a)]
    me = MasterEquation(H, c)
    rng = np.random.default_rng(1)
    R = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    lhs = (me.liouvillian() @ R.reshape(-1, order="F")).reshape(6, 6, order="F")
    assert np.allclose(lhs, me.rhs(0.0, R))


def test_expm_and_rk_agree():
    s = OscillatorSpace.for_alpha(1.2)
    sysm = build_system(s, ConfinementConfig(kappa2=1.0, kerr=0.5), NoiseConfig(kappa1=0.05))
    psi = coherent_state(s, 1.2)
    rho0 = np.outer(psi, psi.conj())
    me = sysm.master_equation()
    t = [0.0, 0.3, 1.0]
    a = evolve(rho0, me, t, {"jx": sysm.jx}, method="expm")
    b = evolve(rho0, me, t, {"jx": sysm.jx}, method="rk45")
    assert np.allclose(a.expect["jx"], b.expect["jx"], atol=1e-7)


def test_trajectory_bounds_and_csv(tmp_path):
    s = OscillatorSpace.for_alpha(math.sqrt(2))
    traj = idle_error_probabilities(s, ConfinementConfig(), NoiseConfig(kappa1=1e-2, n_th=0.1), num=21)
    assert traj.trace_error.max() < 1e-8
    assert traj.hermiticity_error.max() < 1e-10
    assert np.nanmin(traj.positivity_floor) > -1e-9
    assert np.all((traj.px >= -1e-12) & (traj.px <= 0.5))
    p = traj.to_csv(tmp_path / "t.csv", header_line="run")
    lines = p.read_text().splitlines()
    assert lines[0] == "# run" and lines[1] == "t,p_X,p_Z,trace_error"


def test_fit_agrees_with_liouvillian_gap():
    s = OscillatorSpace.for_alpha(math.sqrt(2))
    conf, noise = ConfinementConfig(), NoiseConfig(kappa1=1e-3, n_th=1e-2)
    traj = idle_error_probabilities(s, conf, noise)
    fit = fit_exponential_rate(traj)
    assert fit.rate == pytest.approx(slow_rate(s, conf, noise), rel=0.02)


def test_tpe_buffer_system_dimension():
    s = OscillatorSpace(20, 1.0)
    sysm = build_system(s, ConfinementConfig(g2=2.0), NoiseConfig(), BufferConfig(levels=3, chi_hh=5.0))
    assert sysm.dim == 60
    assert sysm.buffer_levels == 3


def test_memory_budget_enforced():
    s = OscillatorSpace(40, 1.0)
    sysm = build_system(s, ConfinementConfig(), NoiseConfig())
    psi = coherent_state(s, 1.0)
    with pytest.raises(MemoryBudgetError):
        evolve(np.outer(psi, psi.conj()), sysm.master_equation(), [0, 1], method="rk45", memory_budget=1e3)


def test_integration_failure_reported():
    H = sp.csr_matrix(np.diag([0.0, 1e300]).astype(complex))
    me = MasterEquation(H, [], H_td=lambda t: sp.csr_matrix(np.diag([0.0, np.nan]).astype(complex)))
    with pytest.raises(IntegrationError):
        evolve(np.eye(2) / 2, me, [0.0, 1.0], method="rk45")


def test_mcwf_matches_master_equation_and_is_seeded():
    s = OscillatorSpace(8, 0.0)
    a = as_sparse(annihilation(s))
    me = MasterEquation(sp.csr_matrix((8, 8), dtype=complex), [a])
    psi = np.zeros(8, dtype=complex)
    psi[2] = 1.0
    n = (a.conj().T @ a).tocsr()
    times = np.linspace(0, 1, 5)
    r1 = mcwf_evolve(psi, me, times, ntraj=300, seed=7, e_ops={"n": n})
    r2 = mcwf_evolve(psi, me, times, ntraj=300, seed=7, e_ops={"n": n})
    assert np.array_equal(r1["mean"]["n"], r2["mean"]["n"])
    exact = 2 * np.exp(-times)
    err = np.abs(r1["mean"]["n"] - exact)
    assert np.all(err <= 4 * r1["stderr"]["n"] + 1e-12)
