"""Lindblad master-equation integration and logical error extraction.

Density matrices are vectorized by column stacking, vec(A X B) = (B^T (x) A) vec(X).
Time-independent problems that fit in memory are propagated with a Krylov /
truncated-Taylor action of the matrix exponential; time-dependent or large
problems use an adaptive embedded Runge-Kutta stepper acting on the density
matrix directly (no superoperator is formed).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from .errors import IntegrationError, InvalidSpaceError, MemoryBudgetError
from .fock import (
    OscillatorSpace,
    annihilation,
    as_sparse,
    coherent_state,
    jx_observable,
    jz_observable,
    sigma_minus,
)

RTOL = 1e-9
ATOL = 1e-12
TRACE_FLAG = 1e-6
POSITIVITY_DIM_LIMIT = 1024
EXPM_SUPEROP_LIMIT = 250_000  # max superoperator dimension for the expm route
MEMORY_BUDGET = 2 * 1024**3


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class NoiseConfig:
    """Environmental rates in units of kappa_2.

    kappa_minus = kappa1 (1 + n_th) and kappa_plus = kappa1 n_th drive single
    photon loss/gain; kappa_phi is pure dephasing.
    """

    kappa1: float = 0.0
    n_th: float = 0.0
    kappa_phi: float = 0.0

    def __post_init__(self):
        for k, v in (("kappa1", self.kappa1), ("n_th", self.n_th), ("kappa_phi", self.kappa_phi)):
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"noise.{k} must be a finite nonnegative number, got {v}")

    @property
    def kappa_minus(self) -> float:
        return self.kappa1 * (1.0 + self.n_th)

    @property
    def kappa_plus(self) -> float:
        return self.kappa1 * self.n_th

    def kappa_l(self, nbar: float) -> float:
        """Leakage rate kappa1 n_th + |alpha|^2 kappa_phi."""
        return self.kappa1 * self.n_th + nbar * self.kappa_phi

    @property
    def is_zero(self) -> bool:
        return self.kappa1 == 0 and self.kappa_phi == 0


@dataclass(frozen=True)
class ConfinementConfig:
    """Confinement rates: two-photon dissipation, Kerr and TPE."""

    kappa2: float = 1.0
    kerr: float = 0.0
    g2: float = 0.0

    def __post_init__(self):
        for k, v in (("kappa2", self.kappa2), ("kerr", self.kerr), ("g2", self.g2)):
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"confinement.{k} must be a finite nonnegative number, got {v}")
        if self.kerr > 0 and self.g2 > 0:
            raise ValueError("Kerr and TPE confinement cannot be combined in one oscillator")

    def kappa_conf(self, nbar: float) -> float:
        """Rescaled dissipative reconvergence rate 4 |alpha|^2 kappa_2."""
        return 4.0 * nbar * self.kappa2

    @property
    def uses_buffer(self) -> bool:
        return self.g2 > 0

    @property
    def scheme(self) -> str:
        if self.g2 > 0:
            return "combined_tpe" if self.kappa2 > 0 else "tpe"
        if self.kerr > 0:
            return "combined_kerr" if self.kappa2 > 0 else "kerr"
        return "dissipative"

    @property
    def is_confined(self) -> bool:
        return self.kappa2 > 0 or self.kerr > 0 or self.g2 > 0


@dataclass(frozen=True)
class BufferConfig:
    """High-Q buffer used by TPE confinement.

    ``levels`` > 2 models an anharmonic oscillator with Hamiltonian
    -chi_hh b^dag^2 b^2; relaxation kappa_bh (1 + n_th_h) D[b] and excitation
    kappa_bh n_th_h D[b^dag]; dephasing kappa_phi_h D[sigma_z], sigma_z the
    excitation parity (diag(1, -1) for two levels).
    """

    levels: int = 2
    chi_hh: float = 0.0
    kappa_bh: float = 0.0
    n_th_h: float = 0.0
    kappa_phi_h: float = 0.0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("buffer levels must be >= 2")
        for k in ("chi_hh", "kappa_bh", "n_th_h", "kappa_phi_h"):
            if getattr(self, k) < 0:
                raise ValueError(f"buffer.{k} must be nonnegative")


# ------------------------------------------------------------------ systems


@dataclass
class MasterEquation:
    """dρ/dt = -i[H(t), ρ] + Σ_k D[c_k(t)] ρ.

    ``H`` and ``c_ops`` are constant sparse operators; ``H_td(t)`` returns an
    additional Hamiltonian and ``c_td(t)`` a list of extra jump operators.
    """

    H: sp.csr_matrix
    c_ops: list = field(default_factory=list)
    H_td: Callable[[float], sp.spmatrix] | None = None
    c_td: Callable[[float], list] | None = None

    def __post_init__(self):
        self.H = as_sparse(self.H)
        self.c_ops = [as_sparse(c) for c in self.c_ops]
        d = self.H.shape[0]
        for c in self.c_ops:
            if c.shape != (d, d):
                raise InvalidSpaceError(f"jump operator shape {c.shape} does not match H {self.H.shape}")
        G = sp.csr_matrix((d, d), dtype=complex)
        for c in self.c_ops:
            G = G + c.conj().T @ c
        self._heff0 = (self.H - 0.5j * G).tocsr()

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def time_dependent(self) -> bool:
        return self.H_td is not None or self.c_td is not None

    def liouvillian(self) -> sp.csr_matrix:
        if self.time_dependent:
            raise ValueError("time-dependent master equation has no single Liouvillian")
        return liouvillian(self.H, self.c_ops)

    def rhs(self, t: float, R: np.ndarray) -> np.ndarray:
        """Apply the generator to a dense density matrix (no Hermiticity assumed)."""
        heff = self._heff0
        extra = []
        if self.H_td is not None:
            heff = heff + as_sparse(self.H_td(t))
        if self.c_td is not None:
            extra = [as_sparse(c) for c in self.c_td(t)]
            for c in extra:
                heff = heff - 0.5j * (c.conj().T @ c)
        # contiguous copies keep the sparse-dense products free of hidden reshapes
        Rh = np.ascontiguousarray(R.conj().T)
        out = -1j * (heff @ R)
        out += 1j * np.ascontiguousarray((heff @ Rh).conj().T)
        for c in self.c_ops + extra:
            out += c @ np.ascontiguousarray((c @ Rh).conj().T)
        return out


def liouvillian(H, c_ops: Sequence) -> sp.csr_matrix:
    """Sparse column-stacking Liouvillian of -i[H,.] + Σ D[c]."""
    H = as_sparse(H)
    d = H.shape[0]
    I = sp.identity(d, dtype=complex, format="csr")
    heff = H.astype(complex)
    for c in c_ops:
        c = as_sparse(c)
        heff = heff - 0.5j * (c.conj().T @ c)
    L = -1j * sp.kron(I, heff) + 1j * sp.kron(heff.conj(), I)
    for c in c_ops:
        c = as_sparse(c)
        L = L + sp.kron(c.conj(), c)
    return L.tocsr()


@dataclass
class ModelSystem:
    """Operators of one confined oscillator (optionally with its TPE buffer)."""

    space: OscillatorSpace
    buffer_levels: int
    a: sp.csr_matrix
    H: sp.csr_matrix
    c_ops: list
    jx: sp.csr_matrix
    jz: sp.csr_matrix | None
    labels: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def embed(self, op) -> sp.csr_matrix:
        """Lift an oscillator operator to the composite space."""
        op = as_sparse(op)
        if self.buffer_levels == 1:
            return op
        return sp.kron(op, sp.identity(self.buffer_levels, format="csr"), format="csr")

    def embed_state(self, psi: np.ndarray) -> np.ndarray:
        if self.buffer_levels == 1:
            return psi
        g = np.zeros(self.buffer_levels)
        g[0] = 1.0
        return np.kron(psi, g)

    def master_equation(self, H_extra=None) -> MasterEquation:
        H = self.H if H_extra is None else self.H + as_sparse(H_extra)
        return MasterEquation(H, list(self.c_ops))


def build_system(space: OscillatorSpace, confinement: ConfinementConfig, noise: NoiseConfig,
                 buffer: BufferConfig | None = None) -> ModelSystem:
    """Assemble Hamiltonian and jump operators.

    H = -K (a^dag^2 - alpha^*^2)(a^2 - alpha^2) + g2 [(a^2 - alpha^2) b^dag + h.c.];
    jump operators sqrt(kappa2)(a^2 - alpha^2), sqrt(kappa_-) a, sqrt(kappa_+) a^dag,
    sqrt(kappa_phi) a^dag a, plus buffer channels when a buffer is present.
    """
    buffer = buffer or BufferConfig()
    nb = buffer.levels if confinement.uses_buffer else 1
    a0 = as_sparse(annihilation(space))
    I0 = sp.identity(space.dim, dtype=complex, format="csr")
    L0 = a0 @ a0 - space.alpha**2 * I0
    sysm = ModelSystem(space, nb, a0, None, [], None, None)
    a = sysm.embed(a0)
    L = sysm.embed(L0)
    d = space.dim * nb
    H = sp.csr_matrix((d, d), dtype=complex)
    if confinement.kerr > 0:
        H = H - confinement.kerr * (L.conj().T @ L)
    c_ops, labels = [], []
    if confinement.uses_buffer:
        bm = sp.csr_matrix(sigma_minus(nb))
        b = sp.kron(I0, bm, format="csr")
        T = sp.kron(L0, bm.conj().T, format="csr")
        H = H + confinement.g2 * (T + T.conj().T)
        if nb > 2 and buffer.chi_hh > 0:
            bd = b.conj().T
            H = H - buffer.chi_hh * (bd @ bd @ b @ b)
        if buffer.kappa_bh > 0:
            c_ops.append(math.sqrt(buffer.kappa_bh * (1 + buffer.n_th_h)) * b)
            labels.append("buffer_relaxation")
            if buffer.n_th_h > 0:
                c_ops.append(math.sqrt(buffer.kappa_bh * buffer.n_th_h) * b.conj().T)
                labels.append("buffer_excitation")
        if buffer.kappa_phi_h > 0:
            sz = sp.kron(I0, sp.diags((-1.0) ** np.arange(nb)), format="csr")
            c_ops.append(math.sqrt(buffer.kappa_phi_h) * sz)
            labels.append("buffer_dephasing")
    if confinement.kappa2 > 0:
        c_ops.insert(0, math.sqrt(confinement.kappa2) * L)
        labels.insert(0, "two_photon")
    if noise.kappa_minus > 0:
        c_ops.append(math.sqrt(noise.kappa_minus) * a)
        labels.append("loss")
    if noise.kappa_plus > 0:
        c_ops.append(math.sqrt(noise.kappa_plus) * a.conj().T)
        labels.append("gain")
    if noise.kappa_phi > 0:
        c_ops.append(math.sqrt(noise.kappa_phi) * (a.conj().T @ a))
        labels.append("dephasing")
    sysm.a = a
    sysm.H = H.tocsr()
    sysm.c_ops = [c.tocsr() for c in c_ops]
    sysm.labels = labels
    sysm.jx = sysm.embed(jx_observable(space))
    sysm.jz = sysm.embed(jz_observable(space)) if abs(space.alpha.imag) < 1e-14 else None
    return sysm


def build_generator(space: OscillatorSpace, confinement: ConfinementConfig, noise: NoiseConfig,
                    buffer: BufferConfig | None = None) -> sp.csr_matrix:
    """Vectorized Liouvillian L with dρ/dt = L vec(ρ)."""
    s = build_system(space, confinement, noise, buffer)
    return liouvillian(s.H, s.c_ops)


# --------------------------------------------------------------- trajectory


@dataclass
class Trajectory:
    """Time series of logical observables with integration diagnostics.

    ``px`` = (1 - <J_z>)/2 and ``pz`` = (1 - <J_x>)/2, both measured against the
    +1 eigenstates of the respective observable.
    """

    times: np.ndarray
    expect: dict
    px: np.ndarray | None = None
    pz: np.ndarray | None = None
    trace_error: np.ndarray | None = None
    hermiticity_error: np.ndarray | None = None
    positivity_floor: np.ndarray | None = None
    final_state: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path, header_line: str | None = None) -> Path:
        """Columns t, p_X, p_Z, trace_error; optional leading comment line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n = len(self.times)
        nan = np.full(n, np.nan)
        px = self.px if self.px is not None else nan
        pz = self.pz if self.pz is not None else nan
        te = self.trace_error if self.trace_error is not None else nan
        with path.open("w", newline="") as fh:
            if header_line:
                fh.write(f"# {header_line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "p_X", "p_Z", "trace_error"])
            for row in zip(self.times, px, pz, te):
                w.writerow([f"{v:.15e}" for v in row])
        return path


def write_metadata(path: str | Path, meta: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True))
    return path


def _jsonable(x):
    if hasattr(x, "__dataclass_fields__"):
        return _jsonable(asdict(x))
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _check_memory(dim: int, budget: float):
    need = 16.0 * dim * dim * 8  # state plus RK stages
    if need > budget:
        raise MemoryBudgetError(
            f"dense density-matrix run needs ~{need / 1e9:.1f} GB for dim {dim}; "
            "use the trajectory backend (mcwf_evolve) or a smaller truncation"
        )


def _observe(R: np.ndarray, e_ops: Mapping[str, sp.spmatrix]) -> dict:
    # Tr[O R] = sum_ij O_ji R_ij
    out = {}
    for k, O in e_ops.items():
        O = as_sparse(O)
        out[k] = complex((O.multiply(R.T)).sum())
    return out


def evolve(rho0: np.ndarray, generator: MasterEquation | sp.spmatrix, times: Sequence[float],
           e_ops: Mapping[str, sp.spmatrix] | None = None, method: str = "auto",
           rtol: float = RTOL, atol: float = ATOL, memory_budget: float = MEMORY_BUDGET,
           positivity: bool | None = None, keep_states: bool = False) -> Trajectory:
    """Integrate the master equation and record observables at ``times``.

    ``generator`` is either a :class:`MasterEquation` or a precomputed sparse
    Liouvillian.  ``method`` is 'expm' (time-independent only), 'rk45'
    (matrix-free adaptive Runge-Kutta) or 'auto'.  Observables named 'jx' and
    'jz' populate ``pz`` and ``px``.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a non-empty strictly increasing sequence")
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    e_ops = dict(e_ops or {})
    if positivity is None:
        positivity = d <= POSITIVITY_DIM_LIMIT

    is_me = isinstance(generator, MasterEquation)
    if method == "auto":
        if is_me and generator.time_dependent:
            method = "rk45"
        else:
            method = "expm" if d * d <= EXPM_SUPEROP_LIMIT or not is_me else "rk45"
    if method == "expm":
        Lv = generator.liouvillian() if is_me else as_sparse(generator)
        states = _expm_states(Lv, rho0, times)
    elif method == "rk45":
        if not is_me:
            raise ValueError("rk45 route needs a MasterEquation")
        _check_memory(d, memory_budget)
        states = _rk_states(generator, rho0, times, rtol, atol)
    else:
        raise ValueError(f"unknown method {method!r}")

    ex = {k: np.empty(len(times), dtype=complex) for k in e_ops}
    tr = np.empty(len(times))
    herm = np.empty(len(times))
    pos = np.full(len(times), np.nan)
    kept = []
    for i, R in enumerate(states):
        if not np.all(np.isfinite(R)):
            raise IntegrationError("non-finite density matrix", float(times[i]))
        for k, v in _observe(R, e_ops).items():
            ex[k][i] = v
        tr[i] = abs(np.trace(R) - 1.0)
        herm[i] = float(np.max(np.abs(R - R.conj().T)))
        if positivity:
            pos[i] = float(np.linalg.eigvalsh(0.5 * (R + R.conj().T))[0])
        if keep_states:
            kept.append(R)
        final = R
    traj = Trajectory(
        times=times, expect={k: v.real for k, v in ex.items()},
        trace_error=tr, hermiticity_error=herm, positivity_floor=pos, final_state=final,
        diagnostics={"method": method, "dim": d, "rtol": rtol, "atol": atol,
                     "max_trace_error": float(tr.max()), "trace_flag": bool(tr.max() > TRACE_FLAG)},
    )
    if keep_states:
        traj.diagnostics["states"] = kept
    if "jz" in ex:
        traj.px = 0.5 * (1.0 - ex["jz"].real)
    if "jx" in ex:
        traj.pz = 0.5 * (1.0 - ex["jx"].real)
    return traj


def _expm_states(Lv: sp.spmatrix, rho0: np.ndarray, times: np.ndarray):
    d = rho0.shape[0]
    v = rho0.reshape(-1, order="F")
    t0 = times[0]
    dt = np.diff(times)
    uniform = len(times) > 2 and np.allclose(dt, dt[0], rtol=1e-12, atol=0)
    if t0 > 0:
        v = expm_multiply(Lv * t0, v)
    if uniform:
        vs = expm_multiply(Lv, v, start=0.0, stop=times[-1] - t0, num=len(times), endpoint=True)
        for x in vs:
            yield x.reshape(d, d, order="F")
        return
    yield v.reshape(d, d, order="F")
    for h in dt:
        v = expm_multiply(Lv * h, v)
        yield v.reshape(d, d, order="F")


def _rk_states(me: MasterEquation, rho0: np.ndarray, times: np.ndarray, rtol: float, atol: float):
    d = rho0.shape[0]

    def f(t, y):
        out = me.rhs(t, y.reshape(d, d)).ravel()
        if not np.isfinite(out).all():
            raise IntegrationError("non-finite derivative", float(t))
        return out

    t_start = 0.0 if times[0] > 0 else times[0]
    sol = solve_ivp(f, (t_start, times[-1]), rho0.ravel(), method="RK45", t_eval=times,
                    rtol=rtol, atol=atol)
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if len(sol.t) else float("nan")
        raise IntegrationError(f"Runge-Kutta integration failed: {sol.message}", t_fail)
    for k in range(sol.y.shape[1]):
        yield sol.y[:, k].reshape(d, d)


# ---------------------------------------------------------------- idle runs


def default_idle_time(space: OscillatorSpace, confinement: ConfinementConfig, noise: NoiseConfig) -> float:
    """10/kappa_conf with dissipation; several 1/kappa_1 for purely Hamiltonian runs."""
    if confinement.kappa2 > 0:
        return 10.0 / confinement.kappa_conf(space.nbar)
    k = max(noise.kappa1, noise.kappa_phi, 1e-12)
    return 5.0 / k


def idle_error_probabilities(space: OscillatorSpace, confinement: ConfinementConfig, noise: NoiseConfig,
                             T_idle: float | None = None, num: int = 101,
                             buffer: BufferConfig | None = None, method: str = "auto") -> Trajectory:
    """Bit-flip probability p_X(t) = (1 - Tr[J_z ρ(t)])/2 from an initial coherent state |alpha>.

    For TPE confinement the buffer starts in its ground state.
    """
    T_idle = default_idle_time(space, confinement, noise) if T_idle is None else T_idle
    s = build_system(space, confinement, noise, buffer)
    psi = s.embed_state(coherent_state(space, space.alpha))
    rho0 = np.outer(psi, psi.conj())
    times = np.linspace(0.0, T_idle, num)
    me = s.master_equation()
    traj = evolve(rho0, me, times, {"jx": s.jx, "jz": s.jz}, method=method)
    traj.diagnostics.update({"nbar": space.nbar, "kappa_conf": confinement.kappa_conf(space.nbar),
                             "confinement": asdict(confinement), "noise": asdict(noise)})
    return traj


def slow_rate(space: OscillatorSpace, confinement: ConfinementConfig, noise: NoiseConfig,
              buffer: BufferConfig | None = None, k: int = 3) -> float:
    """Smallest nonzero decay rate of the Liouvillian (bit-flip relaxation rate).

    A bit-flip process p_X = (1 - e^{-Γt})/2 relaxes <J_z> at this rate Γ.
    Used as an independent check of trajectory fits.
    """
    from scipy.sparse.linalg import eigs

    Lv = build_generator(space, confinement, noise, buffer)
    ev = eigs(Lv, k=k, sigma=0, which="LM", return_eigenvectors=False)
    r = np.sort(-ev.real)
    return float(r[1])


# -------------------------------------------------------------- trajectories


def mcwf_evolve(psi0: np.ndarray, me: MasterEquation, times: Sequence[float], ntraj: int,
                seed: int, e_ops: Mapping[str, sp.spmatrix] | None = None,
                rtol: float = 1e-8, atol: float = 1e-10) -> dict:
    """Quantum-jump unravelling with per-trajectory seeds spawned from ``seed``.

    Returns mean and standard error of each observable at ``times``.
    """
    times = np.asarray(times, dtype=float)
    e_ops = {k: as_sparse(v) for k, v in (e_ops or {}).items()}
    children = np.random.SeedSequence(seed).spawn(ntraj)
    acc = {k: np.zeros((ntraj, len(times))) for k in e_ops}
    njumps = np.zeros(ntraj, dtype=int)
    for j, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        vals, nj = _one_trajectory(np.asarray(psi0, dtype=complex), me, times, rng, e_ops, rtol, atol)
        for k in e_ops:
            acc[k][j] = vals[k]
        njumps[j] = nj
    out = {"times": times, "mean": {}, "stderr": {}, "jumps": njumps}
    for k, v in acc.items():
        out["mean"][k] = v.mean(axis=0)
        out["stderr"][k] = v.std(axis=0, ddof=1) / math.sqrt(ntraj) if ntraj > 1 else np.zeros(len(times))
    return out


def _one_trajectory(psi0, me: MasterEquation, times, rng, e_ops, rtol, atol):
    def heff(t):
        h = me._heff0
        if me.H_td is not None:
            h = h + as_sparse(me.H_td(t))
        cs = list(me.c_ops)
        if me.c_td is not None:
            extra = [as_sparse(c) for c in me.c_td(t)]
            for c in extra:
                h = h - 0.5j * (c.conj().T @ c)
            cs += extra
        return h, cs

    vals = {k: np.empty(len(times)) for k in e_ops}
    psi = psi0 / np.linalg.norm(psi0)
    t = times[0]
    r = rng.random()
    nj = 0
    idx = 0

    def record(i, v):
        v = v / np.linalg.norm(v)
        for k, O in e_ops.items():
            vals[k][i] = float(np.real(np.vdot(v, O @ v)))

    record(0, psi)
    idx = 1
    while idx < len(times):
        def f(tt, y):
            return -1j * (heff(tt)[0] @ y)

        def ev(tt, y):
            return float(np.vdot(y, y).real) - r

        ev.terminal = True
        ev.direction = -1
        sol = solve_ivp(f, (t, times[-1]), psi, t_eval=times[idx:], events=ev, rtol=rtol, atol=atol)
        # scipy returns a bare list when the jump precedes every remaining sample
        ys = np.asarray(sol.y, dtype=complex).reshape(len(psi), -1)
        for k in range(ys.shape[1]):
            record(idx + k, ys[:, k])
        idx += ys.shape[1]
        if sol.status == 1:
            t = float(sol.t_events[0][0])
            y = sol.y_events[0][0]
            _, cs = heff(t)
            w = np.array([np.linalg.norm(c @ y) ** 2 for c in cs])
            k = int(rng.choice(len(cs), p=w / w.sum()))
            psi = cs[k] @ y
            psi = psi / np.linalg.norm(psi)
            r = rng.random()
            nj += 1
        elif sol.status != 0:
            raise IntegrationError(sol.message, t)
        else:
            break
    return vals, nj
