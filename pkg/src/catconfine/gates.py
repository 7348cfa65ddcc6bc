"""Bias-preserving Z rotation and CNOT gates under combined confinement.

Gate drives follow dρ/dt = -i[H_conf + eps(t)(a + a^dag), ρ] + dissipators for
the Z rotation, and the feedforward construction
H_CX = -eps_CX (a_c + a_c^dag - 2 Re alpha)(a_t^dag a_t - |alpha|^2) for the CNOT.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import expm_multiply
from scipy.special import erf

from .dynamics import (
    BufferConfig,
    ConfinementConfig,
    MasterEquation,
    NoiseConfig,
    build_system,
    evolve,
    liouvillian,
    MEMORY_BUDGET,
)
from .errors import ConsistencyError, MemoryBudgetError
from .fock import (
    OscillatorSpace,
    annihilation,
    as_dense,
    as_sparse,
    coherent_state,
    cat_state,
    jx_observable,
    jz_observable,
    logical_one,
    logical_zero,
    rule_dim,
)

RECON_TOL = 1e-8


@dataclass
class GateErrorReport:
    """Simulated gate errors with model predictions alongside.

    ``breakdown`` holds p_Zc, p_Zt, p_ZcZt for the CNOT; ``p_X`` is the total
    bit-flip probability of the separate bit-flip run (``None`` if not run).
    """

    p_Z: float | None = None
    p_X: float | None = None
    breakdown: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


# ------------------------------------------------------------------ Z gate


@dataclass
class ZGateConfig:
    theta: float = math.pi
    T_gate: float = 1.0
    drive_shape: str = "constant"
    confinement: ConfinementConfig = field(default_factory=ConfinementConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    buffer: BufferConfig | None = None
    gap: float | None = None
    measure_bitflip: bool = False

    def __post_init__(self):
        if not self.T_gate > 0:
            raise ValueError(f"T_gate must be positive, got {self.T_gate}")
        if self.drive_shape not in ("constant", "superadiabatic"):
            raise ValueError(f"unknown drive_shape {self.drive_shape!r}")


def constant_drive_amplitude(theta: float, re_alpha: float, T: float) -> float:
    """eps_Z = theta / (4 Re(alpha) T)."""
    return theta / (4.0 * re_alpha * T)


def _gaussian_profile(T: float, width: float | None):
    """Truncated Gaussian with value and slope removed at both ends.

    Omega(t) = g(t) - c0 - c2 (t - T/2)^2 with g a Gaussian of standard
    deviation ``width`` centred at T/2; c0, c2 chosen so Omega and dOmega/dt
    vanish at t = 0 and t = T.  Returns (Omega, dOmega, d2Omega, integral).
    """
    s = T / 6.0 if width is None else width
    h = T / 2.0
    g0 = math.exp(-h * h / (2 * s * s))
    gp0 = h / (s * s) * g0
    c2 = -gp0 / T
    c0 = g0 - c2 * h * h

    def om(t):
        u = np.asarray(t, dtype=float) - h
        return np.exp(-u * u / (2 * s * s)) - c0 - c2 * u * u

    def dom(t):
        u = np.asarray(t, dtype=float) - h
        return -u / (s * s) * np.exp(-u * u / (2 * s * s)) - 2 * c2 * u

    def d2om(t):
        u = np.asarray(t, dtype=float) - h
        return (u * u / s**4 - 1 / (s * s)) * np.exp(-u * u / (2 * s * s)) - 2 * c2

    integral = s * math.sqrt(2 * math.pi) * erf(h / (math.sqrt(2) * s)) - c0 * T - c2 * T**3 / 12.0
    return om, dom, d2om, integral


def superadiabatic_drive(t, T: float, theta: float, gap: float, re_alpha: float,
                         width: float | None = None):
    """eps_Z(t) = A [Omega_G(t) + Omega_G''(t) / E1^2] on [0, T], zero outside.

    A normalizes the rotation, integral of 4 Re(alpha) eps_Z dt = theta; the
    second-derivative term integrates to zero because Omega_G' vanishes at
    both ends.  ``gap`` = inf gives the bare Gaussian profile.
    """
    om, _, d2om, integral = _gaussian_profile(T, width)
    A = theta / (4.0 * re_alpha * integral)
    t = np.asarray(t, dtype=float)
    corr = 0.0 if math.isinf(gap) else d2om(t) / (gap * gap)
    out = A * (om(t) + corr)
    out = np.where((t < 0) | (t > T), 0.0, out)
    return out if out.ndim else float(out)


def confinement_gap(nbar: float, confinement: ConfinementConfig) -> float:
    """First excitation gap of the Hamiltonian confinement (rate units)."""
    from .spectra import kerr_spectrum, tpe_spectrum

    a = math.sqrt(nbar)
    if confinement.g2 > 0:
        return confinement.g2 * tpe_spectrum(a, n_max=2, check_convergence=False, with_overlaps=False).gap
    if confinement.kerr > 0:
        return confinement.kerr * kerr_spectrum(a, n_max=2, check_convergence=False, with_overlaps=False).gap
    return math.inf


def _logical_ops(sysm, space: OscillatorSpace):
    jx = sysm.jx
    jz = sysm.jz
    sy = (0.5j * (jx @ jz - jz @ jx)).tocsr()
    return jx, jz, sy


def zgate_simulate(space: OscillatorSpace, config: ZGateConfig, rho0: np.ndarray | None = None,
                   method: str = "auto") -> GateErrorReport:
    """Simulate the driven Z rotation from |C+> (buffer in |g> for TPE).

    p_Z = (1 - <cos(theta) J_x + sin(theta) S_y>)/2 with S_y = i[J_x, J_z]/2,
    which reduces to (1 + <J_x>)/2 for theta = pi.  With ``measure_bitflip``
    a second run from |0_L> yields p_X = (1 - <J_z>)/2.
    """
    conf, noise = config.confinement, config.noise
    sysm = build_system(space, conf, noise, config.buffer)
    a = as_sparse(annihilation(space))
    drive_op = sysm.embed(a + a.conj().T)
    re_a = space.alpha.real
    T = config.T_gate
    if config.drive_shape == "constant":
        eps = constant_drive_amplitude(config.theta, re_a, T)
        me = MasterEquation(sysm.H + eps * drive_op, sysm.c_ops)
        gap = None
    else:
        gap = config.gap if config.gap is not None else confinement_gap(space.nbar, conf)
        om, _, d2om, integral = _gaussian_profile(T, None)
        amp = config.theta / (4.0 * re_a * integral)
        corr = 0.0 if math.isinf(gap) else 1.0 / (gap * gap)

        def h_td(t, _op=drive_op):
            return (amp * (float(om(t)) + corr * float(d2om(t)))) * _op

        me = MasterEquation(sysm.H, sysm.c_ops, H_td=h_td)
    jx, jz, sy = _logical_ops(sysm, space)
    if rho0 is None:
        psi = sysm.embed_state(cat_state(space, "even"))
        rho0 = np.outer(psi, psi.conj())
    traj = evolve(rho0, me, [0.0, T], {"jx": jx, "jz": jz, "sy": sy}, method=method)
    c, s = math.cos(config.theta), math.sin(config.theta)
    ideal_axis = c * traj.expect["jx"][-1] + s * traj.expect["sy"][-1]
    p_z = 0.5 * (1.0 - ideal_axis)
    rep = GateErrorReport(
        p_Z=float(p_z),
        diagnostics={"dim": sysm.dim, "method": traj.diagnostics["method"],
                     "trace_error": float(traj.trace_error.max()),
                     "hermiticity_error": float(traj.hermiticity_error.max()),
                     "positivity_floor": float(np.nanmin(traj.positivity_floor)) if np.any(np.isfinite(traj.positivity_floor)) else float("nan"),
                     "gap": gap, "final_state": traj.final_state},
    )
    if config.measure_bitflip:
        psi0 = sysm.embed_state(logical_zero(space))
        tb = evolve(np.outer(psi0, psi0.conj()), me, [0.0, T], {"jz": jz}, method=method)
        rep.p_X = float(tb.px[-1])
    rep.model = {
        "p_Z_NA": zgate_na_model(space.nbar, config.theta, T, conf.kappa2, conf.kerr, conf.g2),
        "p_Z_total": zgate_total_model(space.nbar, config.theta, T, noise.kappa1, conf.kappa2, conf.kerr, conf.g2),
    }
    return rep


def zgate_na_model(nbar: float, theta: float, T: float, kappa2: float = 1.0, kerr: float = 0.0,
                   g2: float = 0.0) -> float:
    """Non-adiabatic phase error of a constant-drive Z rotation.

    theta^2 / (16 |alpha|^4 kappa2 T) / (1 + 4K^2/kappa2^2 + 4 g2^2/kappa2^2), plus
    theta^2 / (32 |alpha|^4 g2^2 T^2) for TPE confinement.
    """
    if kappa2 <= 0:
        raise ValueError("model requires kappa2 > 0")
    pref = 1.0 / (1.0 + 4 * kerr**2 / kappa2**2 + 4 * g2**2 / kappa2**2)
    p = pref * theta**2 / (16.0 * nbar**2 * kappa2 * T)
    if g2 > 0:
        p += theta**2 / (32.0 * nbar**2 * g2**2 * T**2)
    return p


def zgate_total_model(nbar: float, theta: float, T: float, kappa1: float, kappa2: float = 1.0,
                      kerr: float = 0.0, g2: float = 0.0) -> float:
    """kappa1 |alpha|^2 T + non-adiabatic term."""
    return kappa1 * nbar * T + zgate_na_model(nbar, theta, T, kappa2, kerr, g2)


def _minimize_log(f: Callable[[float], float], lo: float = 1e-3, hi: float = 1e4):
    res = minimize_scalar(lambda u: f(math.exp(u)), bounds=(math.log(lo), math.log(hi)), method="bounded",
                          options={"xatol": 1e-10})
    return math.exp(res.x), float(res.fun)


def zgate_optimum_model(nbar: float, theta: float, kappa1: float, kappa2: float = 1.0, kerr: float = 0.0,
                        g2: float = 0.0):
    """(T*, p_Z*) minimizing the total phase-error model."""
    return _minimize_log(lambda T: zgate_total_model(nbar, theta, T, kappa1, kappa2, kerr, g2))


def linear_plus_inverse_optimum(A: float, B: float):
    """Minimizer of A T + B / T: T* = sqrt(B/A), value 2 sqrt(AB)."""
    return math.sqrt(B / A), 2.0 * math.sqrt(A * B)


def optimum_from_samples(Ts: Sequence[float], ps: Sequence[float]):
    """Minimum of sampled p(T): parabola in log T through the best three points."""
    Ts = np.asarray(Ts, dtype=float)
    ps = np.asarray(ps, dtype=float)
    order = np.argsort(Ts)
    Ts, ps = Ts[order], ps[order]
    i = int(np.argmin(ps))
    if i == 0 or i == len(Ts) - 1:
        return float(Ts[i]), float(ps[i])
    x = np.log(Ts[i - 1:i + 2])
    y = ps[i - 1:i + 2]
    c2, c1, c0 = np.polyfit(x, y, 2)
    if c2 <= 0:
        return float(Ts[i]), float(ps[i])
    xs = -c1 / (2 * c2)
    return float(math.exp(xs)), float(min(c0 - c1 * c1 / (4 * c2), ps[i]))


# ------------------------------------------------------------ reduced model


def sfb_zgate_reduced(nbar: float, kerr: float = 0.0, kappa2: float = 1.0, T: float = 1.0,
                      theta: float = math.pi, drive: Callable[[float], float] | None = None,
                      omega: float | None = None, gauge_dim: int = 10, relax: bool = True) -> dict:
    """Qubit (x) gauge-mode model of the Z rotation in the shifted Fock basis.

    Integrates dρ/dt = i w [b^dag b, ρ] + kc D[b] ρ - i eps(t)[s_z (x) (b + b^dag), ρ]
    with w = 4|alpha|^2 K (or ``omega``), kc = 4|alpha|^2 kappa2, starting from
    |+>|0>.  After the drive the gauge mode is left to relax (``relax``) and
    p_Z = (1 - <s_x>)/2 in the frame of the ideal rotation.  Also returns the
    quasi-static estimate p = int kc eps^2 / (w^2 + kc^2/4) dt.
    """
    w = 4.0 * nbar * kerr if omega is None else omega
    kc = 4.0 * nbar * kappa2
    re_a = math.sqrt(nbar)
    if drive is None:
        eps0 = constant_drive_amplitude(theta, re_a, T)

        def drive(t):
            return eps0
        constant = True
    else:
        constant = False
    b = as_sparse(annihilation(gauge_dim))
    I2 = sp.identity(2, format="csr")
    sz = sp.diags([1.0, -1.0]).astype(complex)
    H0 = -w * sp.kron(I2, b.conj().T @ b)
    X = sp.kron(sz, b + b.conj().T, format="csr")
    c_ops = [math.sqrt(kc) * sp.kron(I2, b, format="csr")]
    psi = np.kron(np.array([1.0, 1.0]) / math.sqrt(2), np.eye(gauge_dim)[0])
    rho0 = np.outer(psi, psi).astype(complex)
    sx = sp.kron(sp.csr_matrix([[0, 1], [1, 0]]), sp.identity(gauge_dim), format="csr")
    if constant:
        me = MasterEquation(H0 + drive(0.0) * X, c_ops)
    else:
        me = MasterEquation(H0, c_ops, H_td=lambda t: drive(t) * X)
    tr = evolve(rho0, me, [0.0, T], {"sx": sx}, method="expm" if constant else "rk45", positivity=False)
    R = tr.final_state
    if relax and kc > 0:
        tr2 = evolve(R, MasterEquation(H0, c_ops), [0.0, 30.0 / kc], {"sx": sx}, method="expm", positivity=False)
        sxv = tr2.expect["sx"][-1]
    else:
        sxv = tr.expect["sx"][-1]
    ts = np.linspace(0.0, T, 2001)
    eps = np.array([drive(t) for t in ts])
    rate = kc * eps**2 / (w * w + kc * kc / 4.0)
    return {"p_Z": float(0.5 * (1.0 - sxv)), "p_Z_quasistatic": float(np.trapezoid(rate, ts)),
            "times": ts, "dephasing_rate": rate, "omega": w, "kappa_c": kc}


# -------------------------------------------------------------------- CNOT


SCHEMES = ("dissipative", "combined_kerr", "combined_tpe")


def cnot_dim(nbar: float, bitflip: bool = False) -> int:
    """Per-mode truncation used for CNOT runs.

    ceil(|a|^2 + 4|a| + 8) for phase errors; bit-flip runs resolve much smaller
    probabilities and use ceil(|a|^2 + 6|a| + 10).
    """
    r = math.sqrt(nbar)
    if bitflip:
        return int(math.ceil(nbar + 6.0 * r + 10.0 - 1e-12))
    return int(math.ceil(nbar + 4.0 * r + 8.0 - 1e-12))


@dataclass
class CnotConfig:
    scheme: str = "combined_tpe"
    T_gate: float = 1.0
    nbar: float = 4.0
    kappa2: float = 1.0
    kerr: float = 0.0
    g2: float = 0.0
    noise_control: NoiseConfig = field(default_factory=NoiseConfig)
    noise_target: NoiseConfig = field(default_factory=NoiseConfig)
    target_confinement_off: bool | None = None
    dim: int | None = None
    measure_phase: bool = True
    measure_bitflip: bool = False
    bitflip_inputs: tuple = ("00",)
    method: str = "auto"
    rtol: float = 1e-9
    atol: float = 1e-12

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not self.T_gate > 0:
            raise ValueError("T_gate must be positive")
        if self.target_confinement_off is None:
            self.target_confinement_off = self.scheme == "combined_tpe"
        if self.scheme == "combined_tpe" and not self.target_confinement_off:
            raise ValueError("combined TPE CNOT runs with the target confinement off")

    @property
    def alpha(self) -> float:
        return math.sqrt(self.nbar)

    @property
    def eps_cx(self) -> float:
        """eps_CX = dphi/dt / (4 Re alpha) with phi = pi t / T."""
        return (math.pi / self.T_gate) / (4.0 * self.alpha)

    @property
    def mode_dim(self) -> int:
        return self.dim if self.dim is not None else cnot_dim(self.nbar, self.measure_bitflip)


def cnot_feedforward(space_c: OscillatorSpace, space_t: OscillatorSpace, alpha: complex, eps_cx: float,
                     control_buffer_levels: int = 1) -> sp.csr_matrix:
    """H_CX = -eps (a_c + a_c^dag - 2 Re alpha) (x) (a_t^dag a_t - |alpha|^2).

    Ordering: control oscillator (x) [control buffer] (x) target oscillator.
    """
    ac = as_sparse(annihilation(space_c))
    at = as_sparse(annihilation(space_t))
    Xc = ac + ac.conj().T - 2.0 * complex(alpha).real * sp.identity(space_c.dim, format="csr")
    if control_buffer_levels > 1:
        Xc = sp.kron(Xc, sp.identity(control_buffer_levels), format="csr")
    Nt = at.conj().T @ at - abs(alpha) ** 2 * sp.identity(space_t.dim, format="csr")
    return (-eps_cx * sp.kron(Xc, Nt)).tocsr()


def _noise_ops(a: sp.csr_matrix, noise: NoiseConfig) -> list:
    ops = []
    if noise.kappa_minus > 0:
        ops.append(math.sqrt(noise.kappa_minus) * a)
    if noise.kappa_plus > 0:
        ops.append(math.sqrt(noise.kappa_plus) * a.conj().T)
    if noise.kappa_phi > 0:
        ops.append(math.sqrt(noise.kappa_phi) * (a.conj().T @ a))
    return [o.tocsr() for o in ops]


# rotation direction of the target manifold, chosen to co-rotate with H_CX
# (H_CX generates exp(-i phi n_t) on the |-alpha>_c branch)
TARGET_ROTATION_SIGN = -1.0


def _cnot_master_equation(cfg: CnotConfig):
    """Full two-mode master equation; returns (me, ops dict, control buffer levels)."""
    N = cfg.mode_dim
    al = cfg.alpha
    sc = OscillatorSpace(N, al)
    st = OscillatorSpace(N, al)
    nb = 2 if cfg.scheme == "combined_tpe" else 1
    a = as_sparse(annihilation(N))
    I = sp.identity(N, dtype=complex, format="csr")
    Ib = sp.identity(nb, dtype=complex, format="csr")

    def ctl(op):
        return sp.kron(sp.kron(op, Ib), I, format="csr")

    def tgt(op):
        return sp.kron(sp.kron(I, Ib), op, format="csr")

    ac, at = ctl(a), tgt(a)
    Lc = ctl(a @ a - cfg.nbar * I)
    Hcx = cnot_feedforward(sc, st, al, cfg.eps_cx, nb)
    H = Hcx
    c_ops = []
    if cfg.kappa2 > 0:
        c_ops.append(math.sqrt(cfg.kappa2) * Lc)
    c_ops += _noise_ops(ac, cfg.noise_control) + _noise_ops(at, cfg.noise_target)
    H_td = c_td = None
    if cfg.scheme == "combined_tpe":
        sm = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=complex))
        T = sp.kron(sp.kron(a @ a - cfg.nbar * I, sm.conj().T), I, format="csr")
        H = H + cfg.g2 * (T + T.conj().T)
    else:
        A = tgt(a @ a - cfg.nbar * I)
        B = (al / 2.0) * (ac - al * sp.identity(ac.shape[0], format="csr"))
        Tg = cfg.T_gate
        sgn = TARGET_ROTATION_SIGN

        def coef(t):
            return np.exp(sgn * 2j * math.pi * t / Tg) - 1.0

        if cfg.scheme == "combined_kerr":
            H = H - cfg.kerr * (Lc.conj().T @ Lc)
            AA, AB, BB = A.conj().T @ A, A.conj().T @ B, B.conj().T @ B

            def H_td(t):
                c = coef(t)
                return -cfg.kerr * (AA + c * AB + np.conj(c) * AB.conj().T + abs(c) ** 2 * BB)

        if cfg.kappa2 > 0:
            s2 = math.sqrt(cfg.kappa2)

            def c_td(t):
                return [s2 * (A + coef(t) * B)]

    me = MasterEquation(H.tocsr(), c_ops, H_td=H_td, c_td=c_td)
    px = sp.diags((-1.0) ** np.arange(N)).astype(complex)
    jz = as_sparse(jz_observable(OscillatorSpace(N, al)))
    ops = {
        "xc": ctl(px), "xt": tgt(px), "xx": (ctl(px) @ tgt(px)).tocsr(),
        "zc": ctl(jz), "zt": tgt(jz), "zz": (ctl(jz) @ tgt(jz)).tocsr(),
    }
    return me, ops, nb


def _initial_state(cfg: CnotConfig, kind: str, nb: int) -> np.ndarray:
    sp_ = OscillatorSpace(cfg.mode_dim, cfg.alpha)
    plus = cat_state(sp_, "even", tail_tol=None)
    zero = logical_zero(sp_, tail_tol=None)
    one = logical_one(sp_, tail_tol=None)
    g = np.zeros(nb)
    g[0] = 1.0
    if kind == "++":
        c, t = plus, plus
    else:
        c = zero if kind[0] == "0" else one
        t = zero if kind[1] == "0" else one
    return np.kron(np.kron(c, g), t)


def phase_breakdown(xc: float, xt: float, xx: float) -> dict:
    """Invert the joint-parity sign system for (p_Zc, p_Zt, p_ZcZt).

    <J_x (x) I> = 1 - 2(p_c + p_ct), <I (x) J_x> = 1 - 2(p_t + p_ct),
    <J_x (x) J_x> = 1 - 2(p_c + p_t).
    """
    M = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    rhs = 0.5 * (1.0 - np.array([xc, xt, xx]))
    p = np.linalg.solve(M, rhs)
    resid = float(np.max(np.abs(M @ p - rhs)))
    return {"p_Zc": float(p[0]), "p_Zt": float(p[1]), "p_ZcZt": float(p[2]),
            "p_none": float(1.0 - p.sum()), "reconstruction_residual": resid}


def _no_flip_probability(zc, zt, zz, sc, st):
    return 0.25 * (1.0 + sc * zc + st * zt + sc * st * zz)


def cnot_simulate(config: CnotConfig) -> GateErrorReport:
    """Simulate the CNOT; phase errors from |C+>|C+>, bit flips from logical inputs.

    ``method`` 'auto' uses the sector-resolved exact propagator for the
    combined TPE scheme and the matrix-free Runge-Kutta stepper otherwise;
    'rk45' forces the generic route for every scheme.
    """
    cfg = config
    use_sector = cfg.scheme == "combined_tpe" and cfg.method in ("auto", "sector")
    rep = GateErrorReport(diagnostics={"mode_dim": cfg.mode_dim, "route": "sector" if use_sector else "rk45"})
    if use_sector:
        runner = _TpeSectorCnot(cfg)
    else:
        me, ops, nb = _cnot_master_equation(cfg)
        D = me.dim
        need = 16.0 * D * D * 8
        if need > MEMORY_BUDGET:
            raise MemoryBudgetError(
                f"CNOT density matrix of dim {D} needs ~{need / 1e9:.1f} GB; "
                "reduce CnotConfig.dim or use mcwf_evolve on the same master equation"
            )
    if cfg.measure_phase:
        if use_sector:
            ex = runner.run("++", ("xc", "xt", "xx"))
        else:
            psi = _initial_state(cfg, "++", nb)
            tr = evolve(np.outer(psi, psi.conj()), me, [0.0, cfg.T_gate],
                        {k: ops[k] for k in ("xc", "xt", "xx")}, method="rk45",
                        rtol=cfg.rtol, atol=cfg.atol, positivity=False)
            ex = {k: tr.expect[k][-1] for k in ("xc", "xt", "xx")}
            rep.diagnostics["trace_error"] = float(tr.trace_error.max())
        bd = phase_breakdown(ex["xc"], ex["xt"], ex["xx"])
        if bd["reconstruction_residual"] > RECON_TOL:
            raise ConsistencyError("joint-parity reconstruction residual too large", -1,
                                   bd["reconstruction_residual"])
        rep.breakdown = bd
        rep.p_Z = bd["p_Zc"] + bd["p_Zt"] + bd["p_ZcZt"]
        rep.diagnostics["parities"] = ex
    if cfg.measure_bitflip:
        flips = {}
        for kind in cfg.bitflip_inputs:
            sc = 1.0 if kind[0] == "0" else -1.0
            # ideal CNOT flips the target when the control is |1_L>
            st = (1.0 if kind[1] == "0" else -1.0) * sc
            if use_sector:
                ez = runner.run(kind, ("zc", "zt", "zz"))
            else:
                psi = _initial_state(cfg, kind, nb)
                tr = evolve(np.outer(psi, psi.conj()), me, [0.0, cfg.T_gate],
                            {k: ops[k] for k in ("zc", "zt", "zz")}, method="rk45",
                            rtol=cfg.rtol, atol=cfg.atol, positivity=False)
                ez = {k: tr.expect[k][-1] for k in ("zc", "zt", "zz")}
            flips[kind] = 1.0 - _no_flip_probability(ez["zc"], ez["zt"], ez["zz"], sc, st)
        rep.p_X = float(np.mean(list(flips.values())))
        rep.diagnostics["bitflip_by_input"] = flips
    na = cnot_na_model(cfg.nbar, cfg.T_gate, cfg.scheme, cfg.kappa2, cfg.kerr, cfg.g2)
    rep.model = {"p_Z_NA": na, **cnot_loss_model(cfg.nbar, cfg.T_gate, cfg.noise_control.kappa1, na)}
    return rep


class _TpeSectorCnot:
    """Exact propagation of the combined-TPE CNOT sector by sector.

    The target is unconfined and H_CX is diagonal in its photon number, so
    rho = sum_{n,m} B_nm (x) |n><m|_t splits into independent sectors of fixed
    k = m - n.  Each sector is a control (x) buffer problem stacked over n and is
    propagated with the action of its sparse generator exponential.
    """

    def __init__(self, cfg: CnotConfig):
        self.cfg = cfg
        N = cfg.mode_dim
        self.N = N
        al = cfg.alpha
        a = as_sparse(annihilation(N))
        I = sp.identity(N, dtype=complex, format="csr")
        sm = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=complex))
        Ib = sp.identity(2, format="csr")
        L = a @ a - cfg.nbar * I
        T = sp.kron(L, sm.conj().T, format="csr")
        Hc = cfg.g2 * (T + T.conj().T)
        ac = sp.kron(a, Ib, format="csr")
        c_ops = []
        if cfg.kappa2 > 0:
            c_ops.append(math.sqrt(cfg.kappa2) * sp.kron(L, Ib, format="csr"))
        c_ops += _noise_ops(ac, cfg.noise_control)
        self.dc = 2 * N
        self.Lc = liouvillian(Hc, c_ops)
        self.X = (ac + ac.conj().T - 2 * al * sp.identity(self.dc, format="csr")).tocsr()
        self.eps = cfg.eps_cx
        self.nt = cfg.noise_target
        self.x = cfg.nbar
        px = sp.diags((-1.0) ** np.arange(N)).astype(complex)
        self.jx_c = sp.kron(px, Ib, format="csr")
        self.jz_c = sp.kron(as_sparse(jz_observable(OscillatorSpace(N, al))), Ib, format="csr")
        self.jz_t = as_dense(jz_observable(OscillatorSpace(N, al))).real

    def _generator(self, k: int) -> sp.csr_matrix:
        N, dc = self.N, self.dc
        M = N - k
        Ic = sp.identity(dc, dtype=complex, format="csr")
        XL = sp.kron(Ic, self.X)          # vec(X B)
        XR = sp.kron(self.X.T, Ic)        # vec(B X)
        n = np.arange(M, dtype=float)
        m = n + k
        # H_CX restricted to target |n><m|: -eps X (n - x) on the left, -eps X (m - x) on the right
        G = sp.kron(sp.identity(M, format="csr"), self.Lc)
        G = G + sp.kron(sp.diags(1j * self.eps * (n - self.x)), XL) - sp.kron(sp.diags(1j * self.eps * (m - self.x)), XR)
        km, kp, kf = self.nt.kappa_minus, self.nt.kappa_plus, self.nt.kappa_phi
        diag = -0.5 * km * (n + m) - 0.5 * kp * (n + m + 2) - 0.5 * kf * (n - m) ** 2
        G = G + sp.kron(sp.diags(diag), sp.identity(dc * dc, format="csr"))
        if km > 0 and M > 1:
            up = sp.diags(km * np.sqrt((n[:-1] + 1) * (m[:-1] + 1)), 1, shape=(M, M))
            G = G + sp.kron(up, sp.identity(dc * dc, format="csr"))
        if kp > 0 and M > 1:
            dn = sp.diags(kp * np.sqrt(n[1:] * m[1:]), -1, shape=(M, M))
            G = G + sp.kron(dn, sp.identity(dc * dc, format="csr"))
        return G.tocsr()

    def run(self, kind: str, observables: Sequence[str]) -> dict:
        cfg = self.cfg
        psi = _initial_state(cfg, kind, 2)
        N, dc = self.N, self.dc
        C = psi.reshape(dc, N)  # psi = sum_{c,n} C[c,n] |c>|n>
        need_offdiag = any(o in ("zt", "zz") for o in observables)
        ks = range(0, N) if need_offdiag else [0]
        acc = {o: 0.0 for o in observables}
        for k in ks:
            M = N - k
            # B_{n,n+k} = C[:, n] C[:, n+k]^dagger, column-stacked per block
            blocks = [np.outer(C[:, n], C[:, n + k].conj()).reshape(-1, order="F") for n in range(M)]
            v0 = np.concatenate(blocks)
            if not np.any(v0):
                continue
            v = expm_multiply(self._generator(k) * cfg.T_gate, v0)
            flat = v.reshape(M, dc * dc)
            B = np.stack([flat[j].reshape(dc, dc, order="F") for j in range(M)])
            n = np.arange(M)
            if k == 0:
                tr = np.einsum("jii->j", B).real
                for o in observables:
                    if o == "xc":
                        acc[o] += float(sum(np.real((self.jx_c.multiply(B[j].T)).sum()) for j in range(M)))
                    elif o == "xt":
                        acc[o] += float(np.sum(((-1.0) ** n) * tr))
                    elif o == "xx":
                        acc[o] += float(sum(((-1.0) ** j) * np.real((self.jx_c.multiply(B[j].T)).sum()) for j in range(M)))
                    elif o == "zc":
                        acc[o] += float(sum(np.real((self.jz_c.multiply(B[j].T)).sum()) for j in range(M)))
                    elif o in ("zt", "zz"):
                        w = np.diag(self.jz_t)[:M]
                        if o == "zt":
                            acc[o] += float(np.sum(w * tr))
                        else:
                            acc[o] += float(sum(w[j] * np.real((self.jz_c.multiply(B[j].T)).sum()) for j in range(M)))
            else:
                # Tr[(O_c (x) Z_t) rho] picks (Z_t)_{m,n} Tr[O_c B_nm] + c.c. for m = n + k
                w = np.array([self.jz_t[j + k, j] for j in range(M)])
                if not np.any(w):
                    continue
                for o in observables:
                    if o == "zt":
                        acc[o] += 2.0 * float(np.sum(w * np.einsum("jii->j", B).real))
                    elif o == "zz":
                        acc[o] += 2.0 * float(sum(w[j] * np.real((self.jz_c.multiply(B[j].T)).sum()) for j in range(M)))
        return acc


def cnot_na_model(nbar: float, T: float, scheme: str, kappa2: float = 1.0, kerr: float = 0.0,
                  g2: float = 0.0) -> float:
    """Non-adiabatic control phase error of the CNOT for each scheme."""
    base = math.pi**2 / (64.0 * nbar * kappa2 * T)
    if scheme == "dissipative":
        return base
    if scheme == "combined_kerr":
        return base / (1.0 + 4.0 * kerr**2 / kappa2**2)
    if scheme == "combined_tpe":
        p = math.pi**2 / (16.0 * nbar * kappa2 * T) / (1.0 + 4.0 * g2**2 / kappa2**2)
        if g2 > 0:
            p += math.pi**2 / (32.0 * nbar * g2**2 * T**2)
        return p
    raise ValueError(f"unknown scheme {scheme!r}")


def cnot_loss_model(nbar: float, T: float, kappa1: float, na: float) -> dict:
    """p_Zc = kappa1 |a|^2 T + p_NA; p_Zt = p_ZcZt = kappa1 |a|^2 T / 2."""
    loss = kappa1 * nbar * T
    return {"p_Zc": loss + na, "p_Zt": 0.5 * loss, "p_ZcZt": 0.5 * loss}


def cnot_optimum_model(nbar: float, kappa1: float, scheme: str, kappa2: float = 1.0, kerr: float = 0.0,
                       g2: float = 0.0, total: bool = False):
    """(T*, p*) of the control phase error (or of the total when ``total``)."""
    def f(T):
        na = cnot_na_model(nbar, T, scheme, kappa2, kerr, g2)
        b = cnot_loss_model(nbar, T, kappa1, na)
        return b["p_Zc"] + (b["p_Zt"] + b["p_ZcZt"] if total else 0.0)

    return _minimize_log(f)


# ------------------------------------------------------- buffer imperfections


def buffer_noise_sweep(space: OscillatorSpace, zconfig: ZGateConfig, buffers: Sequence[BufferConfig],
                       T_values: Sequence[float] = (), nbar_values: Sequence[float] = (),
                       bitflip_T: float = 1.0) -> list:
    """Z-gate p_Z(T) at ``space`` and p_X(|alpha|^2) at ``bitflip_T`` per buffer setting.

    Returns one dict per buffer with keys 'buffer', 'p_Z' (list over T) and
    'p_X' (list over photon numbers).
    """
    out = []
    for buf in buffers:
        pz = []
        for T in T_values:
            cfg = replace(zconfig, T_gate=T, buffer=buf, measure_bitflip=False)
            pz.append(zgate_simulate(space, cfg).p_Z)
        px = []
        for nb in nbar_values:
            s = OscillatorSpace.for_alpha(math.sqrt(nb))
            cfg = replace(zconfig, T_gate=bitflip_T, buffer=buf, measure_bitflip=True)
            px.append(zgate_simulate(s, cfg).p_X)
        out.append({"buffer": asdict(buf), "T": list(T_values), "p_Z": pz,
                    "nbar": list(nbar_values), "p_X": px})
    return out
