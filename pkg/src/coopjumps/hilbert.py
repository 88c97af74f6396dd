"""Two-atom state space in the Dicke basis.

Basis order is fixed everywhere (serialization included):
``g, e2, e3, s12, a12, s13, a13, s23, a23``. With |j>|k> the product state
(atom 1 in level j, atom 2 in level k),

    |s_jk> = (|j>|k> + |k>|j>) / sqrt(2)
    |a_jk> = (|j>|k> - |k>|j>) / (i sqrt(2))
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DIM = 9
LABELS: tuple[str, ...] = ("g", "e2", "e3", "s12", "a12", "s13", "a13", "s23", "a23")
INDEX = {label: i for i, label in enumerate(LABELS)}

SUBSPACES: dict[int, tuple[int, ...]] = {
    0: (INDEX["e2"],),
    1: (INDEX["s12"], INDEX["a12"], INDEX["s23"], INDEX["a23"]),
    2: (INDEX["g"], INDEX["s13"], INDEX["a13"], INDEX["e3"]),
}

# Exchange-symmetric and antisymmetric sectors; H_cond is block diagonal in them.
SYMMETRIC = (0, 1, 2, 3, 5, 7)
ANTISYMMETRIC = (4, 6, 8)


def product_index(level1: int, level2: int) -> int:
    """Index of |level1>|level2> (levels 1..3) in the 9-dim product basis."""
    return 3 * (level1 - 1) + (level2 - 1)


@lru_cache(maxsize=None)
def _dicke_columns() -> np.ndarray:
    basis = np.zeros((DIM, DIM), dtype=complex)
    basis[product_index(1, 1), INDEX["g"]] = 1.0
    basis[product_index(2, 2), INDEX["e2"]] = 1.0
    basis[product_index(3, 3), INDEX["e3"]] = 1.0
    r2 = np.sqrt(2.0)
    for j, k in ((1, 2), (1, 3), (2, 3)):
        s = INDEX[f"s{j}{k}"]
        a = INDEX[f"a{j}{k}"]
        basis[product_index(j, k), s] = 1.0 / r2
        basis[product_index(k, j), s] = 1.0 / r2
        basis[product_index(j, k), a] = 1.0 / (1j * r2)
        basis[product_index(k, j), a] = -1.0 / (1j * r2)
    basis.flags.writeable = False
    return basis


def dicke_basis_matrix() -> np.ndarray:
    """Unitary whose columns are the Dicke states written in the product basis."""
    return _dicke_columns().copy()


def product_to_dicke(v) -> np.ndarray:
    return _dicke_columns().conj().T @ np.asarray(v, dtype=complex)


def dicke_to_product(v) -> np.ndarray:
    return _dicke_columns() @ np.asarray(v, dtype=complex)


def operator_to_dicke(op_product) -> np.ndarray:
    b = _dicke_columns()
    return b.conj().T @ np.asarray(op_product, dtype=complex) @ b


def operator_to_product(op_dicke) -> np.ndarray:
    b = _dicke_columns()
    return b @ np.asarray(op_dicke, dtype=complex) @ b.conj().T


def _single_atom_ket_bra(j: int, k: int) -> np.ndarray:
    m = np.zeros((3, 3), dtype=complex)
    m[j - 1, k - 1] = 1.0
    return m


def embed(single: np.ndarray, atom: int) -> np.ndarray:
    """Lift a 3x3 single-atom operator to the product basis of atom 1 or 2."""
    eye = np.eye(3, dtype=complex)
    if atom == 1:
        return np.kron(single, eye)
    if atom == 2:
        return np.kron(eye, single)
    raise ValueError(f"atom must be 1 or 2, got {atom}")


def build_sigma_minus(atom: int, level: int) -> np.ndarray:
    """Lowering operator |1><level| of one atom, as a Dicke-basis matrix."""
    if level not in (2, 3):
        raise ValueError(f"level must be 2 or 3, got {level}")
    return operator_to_dicke(embed(_single_atom_ket_bra(1, level), atom))


def build_sigma_plus(atom: int, level: int) -> np.ndarray:
    return build_sigma_minus(atom, level).conj().T


def basis_state(label: str) -> np.ndarray:
    v = np.zeros(DIM, dtype=complex)
    v[INDEX[label]] = 1.0
    return v


def subspace_projector(subspace: int) -> np.ndarray:
    p = np.zeros((DIM, DIM))
    for i in SUBSPACES[subspace]:
        p[i, i] = 1.0
    return p


@dataclass(frozen=True)
class StateVector:
    """Amplitudes over the Dicke basis, possibly not normalized."""

    amp: np.ndarray
    norm2: float = field(init=False)

    def __post_init__(self) -> None:
        amp = np.array(self.amp, dtype=complex).reshape(DIM)
        amp.flags.writeable = False
        object.__setattr__(self, "amp", amp)
        object.__setattr__(self, "norm2", float(np.vdot(amp, amp).real))

    @classmethod
    def from_label(cls, label: str) -> "StateVector":
        return cls(basis_state(label))

    @classmethod
    def from_product(cls, v) -> "StateVector":
        return cls(product_to_dicke(v))

    def normalized(self) -> "StateVector":
        if self.norm2 <= 0:
            raise ValueError("cannot normalize a zero vector")
        return StateVector(self.amp / np.sqrt(self.norm2))

    def to_product(self) -> np.ndarray:
        return dicke_to_product(self.amp)

    def to_json(self) -> str:
        return json.dumps(
            {
                "basis": list(LABELS),
                "amplitudes": [[float(z.real), float(z.imag)] for z in self.amp],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "StateVector":
        data = json.loads(text)
        if list(data.get("basis", LABELS)) != list(LABELS):
            raise ValueError("state dump uses a different basis order")
        return cls(np.array([complex(re, im) for re, im in data["amplitudes"]]))

    def to_csv(self) -> str:
        lines = ["label,re,im"]
        lines += [f"{lab},{z.real!r},{z.imag!r}" for lab, z in zip(LABELS, self.amp)]
        return "\n".join(lines) + "\n"


def _amplitudes(psi) -> np.ndarray:
    if isinstance(psi, StateVector):
        return psi.amp
    return np.asarray(psi, dtype=complex)


def subspace_projection(psi, subspace: int) -> float:
    """Probability weight of ``psi`` in subspace 0 ({e2}), 1 or 2."""
    if subspace not in SUBSPACES:
        raise ValueError(f"subspace must be 0, 1 or 2, got {subspace}")
    amp = _amplitudes(psi)
    norm2 = float(np.vdot(amp, amp).real)
    if norm2 <= 0:
        raise ValueError("subspace projection of a zero-norm state")
    idx = list(SUBSPACES[subspace])
    return float(np.sum(np.abs(amp[idx]) ** 2) / norm2)


def subspace_populations(psi) -> np.ndarray:
    return np.array([subspace_projection(psi, k) for k in (0, 1, 2)])
