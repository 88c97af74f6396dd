"""Conditional (no-photon) evolution of the two-atom system."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import hilbert
from .hilbert import ANTISYMMETRIC, DIM, LABELS, SYMMETRIC, StateVector, embed
from .model import MIN_SIMULATED_KR, ModelParams

# Above this eigenvector condition number the spectral path is not trusted.
MAX_CONDITION = 1e8
# Longest single expm step of the fallback propagator.
FALLBACK_SLICE = 50.0


class DefectiveGeneratorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConditionalGenerator:
    """Non-Hermitian generator with an eagerly computed spectral cache.

    ``gamma`` is the dissipative part, ``h = hermitian - 0.5j * gamma``.
    """

    h: np.ndarray
    gamma: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray
    right_inv: np.ndarray
    condition: float
    params: ModelParams | None = None

    @property
    def diagonalizable(self) -> bool:
        return bool(np.isfinite(self.condition) and self.condition <= MAX_CONDITION)

    @property
    def method(self) -> str:
        return "spectral" if self.diagonalizable else "scaled-squaring"

    @classmethod
    def from_matrix(cls, h: np.ndarray, params: ModelParams | None = None) -> "ConditionalGenerator":
        h = np.array(h, dtype=complex)
        gamma = 1j * (h - h.conj().T)
        gamma = 0.5 * (gamma + gamma.conj().T)
        lam, right = _block_eig(h)
        try:
            right_inv = np.linalg.inv(right)
            condition = float(np.linalg.cond(right))
        except np.linalg.LinAlgError:
            right_inv = np.full_like(right, np.nan)
            condition = math.inf
        for arr in (h, gamma, lam, right, right_inv):
            arr.flags.writeable = False
        return cls(h, gamma, lam, right, right_inv, condition, params)

    def hermitian_part(self) -> np.ndarray:
        return 0.5 * (self.h + self.h.conj().T)

    def to_json(self) -> str:
        def cmat(m):
            return [[[float(z.real), float(z.imag)] for z in row] for row in m]

        return json.dumps(
            {
                "basis": list(LABELS),
                "h_cond": cmat(self.h),
                "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
                "condition": self.condition,
                "method": self.method,
                "params": None if self.params is None else self.params.to_dict(),
            },
            indent=1,
        )


def _block_eig(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition, per exchange sector when ``h`` respects the symmetry.

    Working per sector avoids cross-sector degeneracies (exact for C3 = 0)
    that make a joint eigenvector basis ill-conditioned.
    """
    n = h.shape[0]
    sym, anti = list(SYMMETRIC), list(ANTISYMMETRIC)
    if n == DIM and np.allclose(h[np.ix_(sym, anti)], 0) and np.allclose(h[np.ix_(anti, sym)], 0):
        lam = np.zeros(n, dtype=complex)
        right = np.zeros((n, n), dtype=complex)
        col = 0
        for block in (sym, anti):
            w, v = np.linalg.eig(h[np.ix_(block, block)])
            for m in range(len(block)):
                lam[col] = w[m]
                right[block, col] = v[:, m]
                col += 1
        return lam, right
    return np.linalg.eig(h)


def _lowering(atom: int, level: int) -> np.ndarray:
    m = np.zeros((3, 3), dtype=complex)
    m[0, level - 1] = 1.0
    return embed(m, atom)


def h_cond_product(params: ModelParams) -> np.ndarray:
    """H_cond in the product basis, assembled from the atomic operators."""
    if params.a2 != 0:
        raise NotImplementedError(
            "only a2 = 0 is supported; the two-channel reset is derived for the strong transition only"
        )
    a3 = params.a3
    c3 = params.c3
    s13m, s23m = _lowering(1, 3), _lowering(2, 3)
    s12m, s22m = _lowering(1, 2), _lowering(2, 2)
    s13p, s23p = s13m.conj().T, s23m.conj().T

    dissipative = a3 * (s13p @ s13m + s23p @ s23m) + c3 * (s13p @ s23m + s23p @ s13m)
    laser = np.zeros((DIM, DIM), dtype=complex)
    for omega, ops in ((params.omega2, (s12m, s22m)), (params.omega3, (s13m, s23m))):
        for op in ops:
            laser += 0.5 * omega * (op + op.conj().T)
    return dissipative / 2j + laser


def build_h_cond(params: ModelParams) -> ConditionalGenerator:
    """Conditional Hamiltonian of the two atoms in the Dicke basis."""
    if params.include_c3 and params.kr < MIN_SIMULATED_KR:
        raise ValueError(
            f"kr={params.kr} < {MIN_SIMULATED_KR}: level shifts diverge, refusing to simulate"
        )
    h = hilbert.operator_to_dicke(h_cond_product(params))
    # clean round-off from the basis change
    h.real[np.abs(h.real) < 1e-15] = 0.0
    h.imag[np.abs(h.imag) < 1e-15] = 0.0
    return ConditionalGenerator.from_matrix(h, params)


def single_atom_h_cond(params: ModelParams) -> np.ndarray:
    """3x3 conditional Hamiltonian of one V atom (levels 1, 2, 3)."""
    h = np.zeros((3, 3), dtype=complex)
    h[2, 2] = -0.5j * params.a3
    h[1, 1] = -0.5j * params.a2
    h[0, 1] = h[1, 0] = 0.5 * params.omega2
    h[0, 2] = h[2, 0] = 0.5 * params.omega3
    return h


def dark_timescale(params: ModelParams) -> float:
    """Inverse of the slowest single-atom norm decay rate (the long waiting-time scale)."""
    lam = np.linalg.eigvals(single_atom_h_cond(params))
    slowest = np.min(np.abs(lam.imag))
    if slowest == 0:
        return math.inf
    return 1.0 / (2.0 * slowest)


def _check_t(t) -> None:
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be non-negative")


def _amp(psi) -> np.ndarray:
    if isinstance(psi, StateVector):
        return psi.amp
    return np.asarray(psi, dtype=complex)


def _expm_propagate(gen: ConditionalGenerator, v: np.ndarray, t: float) -> np.ndarray:
    if t == 0:
        return v.copy()
    n = max(1, int(math.ceil(t / FALLBACK_SLICE)))
    step = scipy.linalg.expm(-1j * gen.h * (t / n))
    out = v.copy()
    for _ in range(n):
        out = step @ out
    return out


def propagator(gen: ConditionalGenerator, t: float) -> np.ndarray:
    """Matrix U_cond(t) = exp(-i H_cond t)."""
    _check_t(t)
    if gen.diagonalizable:
        return (gen.right * np.exp(-1j * gen.eigenvalues * t)) @ gen.right_inv
    return _expm_propagate(gen, np.eye(DIM, dtype=complex), t)


def propagate(gen: ConditionalGenerator, psi, t: float) -> StateVector:
    """Unnormalized U_cond(t)|psi>."""
    _check_t(t)
    v = _amp(psi)
    if gen.diagonalizable:
        c = gen.right_inv @ v
        out = gen.right @ (c * np.exp(-1j * gen.eigenvalues * t))
    else:
        out = _expm_propagate(gen, v, float(t))
    return StateVector(out)


def _amplitudes_at(gen: ConditionalGenerator, psi, t) -> np.ndarray:
    """Amplitudes for an array of times, shape (len(t), 9)."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    _check_t(ts)
    v = _amp(psi)
    if gen.diagonalizable:
        c = gen.right_inv @ v
        phases = np.exp(-1j * np.outer(ts, gen.eigenvalues))
        return (phases * c) @ gen.right.T
    return np.array([_expm_propagate(gen, v, float(s)) for s in ts])


def no_photon_probability(gen: ConditionalGenerator, psi, t):
    """P0(t) = ||U_cond(t) psi||^2; scalar in, scalar out."""
    amps = _amplitudes_at(gen, psi, t)
    p0 = np.sum(np.abs(amps) ** 2, axis=1)
    return float(p0[0]) if np.ndim(t) == 0 else p0


def waiting_time_density(gen: ConditionalGenerator, psi, t):
    """w1(t) = -dP0/dt = <psi(t)|Gamma|psi(t)>, evaluated from the amplitudes."""
    amps = _amplitudes_at(gen, psi, t)
    w = np.einsum("ti,ij,tj->t", amps.conj(), gen.gamma, amps).real
    w = np.maximum(w, 0.0)
    return float(w[0]) if np.ndim(t) == 0 else w
