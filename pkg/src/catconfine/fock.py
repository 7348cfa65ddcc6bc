"""Truncated Fock space: states, ladder operators and cat-qubit observables.

Operators are returned as dense ``numpy`` arrays when the matrix dimension is
below ``DENSE_LIMIT`` and as ``scipy.sparse`` CSR matrices above it.  Use
:func:`as_sparse` / :func:`as_dense` when a specific storage is required.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import gammaln, ive

from .errors import InvalidSpaceError, TruncationError, UnsupportedParameterError

DENSE_LIMIT = 256
TAIL_LEVELS = 3
TAIL_TOL = 1e-10
# relative weight below which J_z series terms are dropped
JZ_SERIES_TOL = 1e-14


def rule_dim(alpha: complex) -> int:
    """Default Fock cutoff ceil(|a|^2 + 8|a| + 12)."""
    r = abs(alpha)
    return int(math.ceil(r * r + 8.0 * r + 12.0 - 1e-12))


@dataclass(frozen=True)
class OscillatorSpace:
    """Truncated oscillator Hilbert space.

    Parameters
    ----------
    dim : int
        Number of Fock levels kept.
    alpha : complex
        Cat amplitude that the operators are built around.
    """

    dim: int
    alpha: complex = 0.0

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 2:
            raise InvalidSpaceError(f"dim must be an integer >= 2, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "alpha", complex(self.alpha))

    @classmethod
    def for_alpha(cls, alpha: complex, headroom: float = 1.0) -> "OscillatorSpace":
        """Space sized by the truncation rule, optionally scaled by ``headroom``."""
        return cls(int(math.ceil(rule_dim(alpha) * headroom - 1e-12)), alpha)

    @property
    def nbar(self) -> float:
        return abs(self.alpha) ** 2

    @property
    def meets_rule(self) -> bool:
        return self.dim >= rule_dim(self.alpha)

    def coherent_tail(self, beta: complex | None = None, levels: int = TAIL_LEVELS) -> float:
        """Population of |beta> (untruncated) in the top ``levels`` kept Fock levels."""
        beta = self.alpha if beta is None else beta
        n = np.arange(max(self.dim - levels, 0), self.dim)
        return float(np.sum(_poisson_pmf(n, abs(beta) ** 2)))

    def check_tail(self, beta: complex | None = None, tol: float = TAIL_TOL) -> float:
        """Raise :class:`TruncationError` when the coherent tail exceeds ``tol``."""
        tail = max(self.coherent_tail(beta), self.coherent_tail(-(self.alpha if beta is None else beta)))
        if tail >= tol:
            raise TruncationError(
                f"coherent tail {tail:.3e} in top {TAIL_LEVELS} levels exceeds {tol:.1e} "
                f"(dim={self.dim}, suggested dim >= {rule_dim(self.alpha if beta is None else beta)})",
                tail,
            )
        return tail

    def scaled(self, factor: float) -> "OscillatorSpace":
        return OscillatorSpace(int(math.ceil(self.dim * factor - 1e-12)), self.alpha)


def _poisson_pmf(n: np.ndarray, lam: float) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if lam == 0.0:
        return (n == 0).astype(float)
    return np.exp(-lam + n * math.log(lam) - gammaln(n + 1))


def _store(m):
    """Apply the dense/sparse storage rule."""
    if m.shape[0] < DENSE_LIMIT:
        return m.toarray() if sp.issparse(m) else np.asarray(m)
    return sp.csr_matrix(m)


def as_sparse(m) -> sp.csr_matrix:
    return m.tocsr() if sp.issparse(m) else sp.csr_matrix(m)


def as_dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


# ---------------------------------------------------------------- operators


def annihilation(space: OscillatorSpace | int):
    """Lowering operator with <n-1|a|n> = sqrt(n)."""
    dim = space.dim if isinstance(space, OscillatorSpace) else int(space)
    if dim < 2:
        raise InvalidSpaceError(f"dim must be >= 2, got {dim}")
    a = sp.diags(np.sqrt(np.arange(1, dim, dtype=float)), 1, shape=(dim, dim), format="csr")
    return _store(a.astype(complex))


def creation(space):
    return _store(as_sparse(annihilation(space)).conj().T)


def number(space):
    dim = space.dim if isinstance(space, OscillatorSpace) else int(space)
    return _store(sp.diags(np.arange(dim, dtype=float), 0, format="csr").astype(complex))


def identity(space):
    dim = space.dim if isinstance(space, OscillatorSpace) else int(space)
    return _store(sp.identity(dim, dtype=complex, format="csr"))


def two_photon_jump(space: OscillatorSpace):
    """a^2 - alpha^2, the two-photon confinement jump operator."""
    a = as_sparse(annihilation(space))
    return _store(a @ a - space.alpha**2 * sp.identity(space.dim, format="csr"))


def jx_observable(space):
    """Photon-number parity: +1 on even Fock levels, -1 on odd."""
    dim = space.dim if isinstance(space, OscillatorSpace) else int(space)
    return _store(sp.diags((-1.0) ** np.arange(dim), 0, format="csr").astype(complex))


def _log_dfact(n: int) -> float:
    """log(n!!) with the convention (-1)!! = 0!! = 1."""
    if n <= 0:
        return 0.0
    if n % 2 == 0:
        k = n // 2
        return k * math.log(2.0) + float(gammaln(k + 1))
    k = (n - 1) // 2
    return float(gammaln(n + 1)) - k * math.log(2.0) - float(gammaln(k + 1))


@lru_cache(maxsize=64)
def _jpm_real(dim: int, x: float) -> np.ndarray:
    """Even-to-odd block of J_z for real positive alpha, x = alpha^2.

    Entry (k even, m odd) collects the single q-term of the Bessel series that
    connects |m> to |k>: q = (m-1-k)/2 for m > k, q = -(k-m+1)/2 otherwise.
    The sinh prefactor is folded into the exponentially scaled Bessel function
    so no intermediate overflows for large x.
    """
    J = np.zeros((dim, dim))
    pref = math.sqrt(4.0 * x / -math.expm1(-4.0 * x)) if x > 0 else 1.0
    bessel = {}
    top = float(ive(0, x))
    for k in range(0, dim, 2):
        for m in range(1, dim, 2):
            if m > k:
                q = (m - 1 - k) // 2
                lr = _log_dfact(k - 1) - _log_dfact(k + 2 * q) + 0.5 * (gammaln(m + 1) - gammaln(k + 1))
            else:
                p = (k - m + 1) // 2
                q = -p
                lr = _log_dfact(m) - _log_dfact(m + 2 * p - 1) + 0.5 * (gammaln(k + 1) - gammaln(m + 1))
            if abs(q) not in bessel:
                bessel[abs(q)] = float(ive(abs(q), x))
            w = bessel[abs(q)]
            if w < JZ_SERIES_TOL * top:
                # series cutoff: Bessel weight negligible
                continue
            J[k, m] = pref * (-1.0) ** q / (2 * q + 1) * w * math.exp(lr)
    return J


def jz_observable(space: OscillatorSpace):
    """Logical Z observable, Hermitian and parity-swapping.

    Approximates sign(a + a^dagger) on the cat manifold so that
    <alpha|J_z|alpha> -> 1 for large alpha.  Requires real alpha; negative
    alpha flips the overall sign so that |alpha> always maps to +1.
    """
    a = space.alpha
    if abs(a.imag) > 1e-14 * max(1.0, abs(a)):
        raise UnsupportedParameterError(f"J_z requires real alpha, got {a}")
    x = a.real * a.real
    J = _jpm_real(space.dim, x)
    Jz = (J + J.T) * (1.0 if a.real >= 0 else -1.0)
    return _store(Jz.astype(complex))


# ------------------------------------------------------------------- states


def _normalized(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def coherent_state(space: OscillatorSpace, beta: complex, tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    """Normalized |beta> with amplitudes e^{-|b|^2/2} b^n / sqrt(n!).

    Raises :class:`TruncationError` when the top Fock levels would carry more
    than ``tail_tol`` population (``None`` disables the check).
    """
    beta = complex(beta)
    if tail_tol is not None:
        tail = space.coherent_tail(beta)
        if tail >= tail_tol:
            raise TruncationError(f"coherent tail {tail:.3e} >= {tail_tol:.1e} for dim={space.dim}", tail)
    n = np.arange(space.dim)
    if beta == 0:
        v = np.zeros(space.dim, dtype=complex)
        v[0] = 1.0
        return v
    logmag = -0.5 * abs(beta) ** 2 + n * math.log(abs(beta)) - 0.5 * gammaln(n + 1)
    v = np.exp(logmag) * np.exp(1j * n * np.angle(beta))
    return _normalized(v.astype(complex))


def cat_state(space: OscillatorSpace, parity: str = "even", tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    """(|alpha> +/- |-alpha>)/N with the wrong-parity amplitudes set exactly to 0."""
    if parity not in ("even", "odd", "+", "-"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    if space.alpha == 0 and parity in ("odd", "-"):
        raise UnsupportedParameterError("odd cat undefined at alpha = 0")
    v = coherent_state(space, space.alpha, tail_tol)
    keep = 0 if parity in ("even", "+") else 1
    v = v.copy()
    v[(np.arange(space.dim) % 2) != keep] = 0.0
    return _normalized(v)


def logical_zero(space: OscillatorSpace, tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    """|0_L> = (|C+> + |C->)/sqrt(2), i.e. |alpha> up to O(e^{-2|alpha|^2})."""
    return _normalized(cat_state(space, "even", tail_tol) + cat_state(space, "odd", tail_tol))


def logical_one(space: OscillatorSpace, tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    return _normalized(cat_state(space, "even", tail_tol) - cat_state(space, "odd", tail_tol))


def displacement(space: OscillatorSpace, beta: complex) -> np.ndarray:
    """D(beta) = expm(beta a^dag - beta^* a) on the truncated space."""
    a = as_dense(annihilation(space))
    return sla.expm(beta * a.conj().T - np.conj(beta) * a)


def displaced_fock_state(space: OscillatorSpace, beta: complex, n: int,
                         tail_tol: float | None = TAIL_TOL) -> np.ndarray:
    """Normalized D(beta)|n>."""
    if n < 0 or n >= space.dim:
        raise InvalidSpaceError(f"Fock index {n} outside [0, {space.dim})")
    v = displacement(space, beta)[:, n]
    v = _normalized(v)
    if tail_tol is not None:
        tail = float(np.sum(np.abs(v[-TAIL_LEVELS:]) ** 2))
        if tail >= tail_tol:
            raise TruncationError(f"displaced Fock tail {tail:.3e} >= {tail_tol:.1e} (dim={space.dim})", tail)
    return v


def ket2dm(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi)
    return np.outer(psi, psi.conj())


# ------------------------------------------------------------------ tensors


def _dim_of(s) -> int:
    return s.dim if isinstance(s, OscillatorSpace) else int(s)


def tensor_embed(ops: Sequence, spaces: Sequence):
    """Kronecker product in declared order; ``None`` entries become identities.

    ``spaces`` holds :class:`OscillatorSpace` objects or plain dimensions.
    """
    if len(ops) != len(spaces):
        raise InvalidSpaceError(f"{len(ops)} operators for {len(spaces)} spaces")
    out = None
    for op, s in zip(ops, spaces):
        d = _dim_of(s)
        m = sp.identity(d, dtype=complex, format="csr") if op is None else as_sparse(op)
        if m.shape != (d, d):
            raise InvalidSpaceError(f"operator shape {m.shape} does not match space dim {d}")
        out = m if out is None else sp.kron(out, m, format="csr")
    return _store(out)


def tensor_state(*vecs: np.ndarray) -> np.ndarray:
    out = np.array([1.0 + 0j])
    for v in vecs:
        out = np.kron(out, v)
    return out


def sigma_minus(levels: int = 2):
    """Buffer lowering operator; level 0 is the ground state |g>."""
    return as_dense(annihilation(levels))


def sigma_plus(levels: int = 2):
    return sigma_minus(levels).conj().T


def sigma_z(levels: int = 2):
    """Buffer excitation parity; equals diag(1, -1) for a two-level buffer."""
    return np.diag((-1.0) ** np.arange(levels)).astype(complex)
