"""Physical parameters and the dipole-dipole coupling constant.

All quantities are dimensionless: hbar = 1, rates are in units of the
strong-transition Einstein coefficient A3 and times in units of 1/A3.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Below this distance the level shifts diverge; the trajectory engine refuses it.
MIN_SIMULATED_KR = 0.1


class ModelWarning(UserWarning):
    """Parameters fall outside the weak-shelving regime the model assumes."""


@dataclass(frozen=True)
class ModelParams:
    """Configuration of two driven V-type atoms a fixed distance apart.

    Attributes:
        a3: Einstein coefficient of the strong 1-3 transition.
        a2: Einstein coefficient of the metastable level 2. Only ``0`` is
            supported by the conditional dynamics; the field exists so the
            single-atom limit is explicit.
        omega2: Rabi frequency of the weak 1-2 laser.
        omega3: Rabi frequency of the strong 1-3 laser.
        kr: dimensionless separation k31 * r.
        theta3: angle between the 1-3 dipole moment and the interatomic axis.
        include_c3: switch off to get two independent atoms.
    """

    a3: float = 1.0
    a2: float = 0.0
    omega2: float = 0.01
    omega3: float = 0.5
    kr: float = 10.0
    theta3: float = math.pi / 2
    include_c3: bool = True

    def __post_init__(self) -> None:
        if not self.a3 > 0:
            raise ValueError(f"a3 must be positive, got {self.a3}")
        if self.a2 < 0:
            raise ValueError(f"a2 must be non-negative, got {self.a2}")
        if self.omega2 < 0 or self.omega3 < 0:
            raise ValueError("Rabi frequencies must be non-negative")
        if not self.kr > 0:
            raise ValueError(f"kr must be positive, got {self.kr}")
        if not 0.0 <= self.theta3 <= math.pi / 2 + 1e-12:
            raise ValueError(f"theta3 must lie in [0, pi/2], got {self.theta3}")
        if self.omega2 > 0 and not self.in_shelving_regime():
            warnings.warn(
                f"omega2={self.omega2} is not small against omega3={self.omega3} "
                f"and omega3**2/a3; dark periods may not be well defined",
                ModelWarning,
                stacklevel=2,
            )

    def in_shelving_regime(self, factor: float = 10.0) -> bool:
        """True when omega2 is ``factor`` times below both omega3 and omega3**2/a3."""
        return (
            self.omega2 * factor <= self.omega3
            and self.omega2 * factor <= self.omega3**2 / self.a3
        )

    @property
    def c3(self) -> complex:
        """Coupling constant C3 actually used by the model (0 when switched off)."""
        if not self.include_c3:
            return 0j
        return coupling_constant(self.kr, self.theta3, self.a3)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in names:
                continue
            if key == "include_c3":
                kwargs[key] = _as_bool(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def _as_bool(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in {"1", "true", "yes", "on"}
    return bool(value)


def coupling_constant(kr: float, theta: float, a: float = 1.0) -> complex:
    """Retarded dipole-dipole coupling constant C(kr, theta) for decay rate ``a``.

    Real part modifies the collective decay rates (a +- Re C), the imaginary
    part is a level shift.
    """
    if not kr > 0:
        raise ValueError(f"coupling constant is singular at kr={kr}; need kr > 0")
    cos2 = math.cos(theta) ** 2
    # 1/i = -i
    bracket = (-1j / kr) * (1.0 - cos2) + (1.0 / kr**2 + 1j / kr**3) * (1.0 - 3.0 * cos2)
    return 1.5 * a * complex(math.cos(kr), math.sin(kr)) * bracket


def coupling_curve(
    kr_grid: Sequence[float], theta: float = math.pi / 2
) -> list[tuple[float, float, float]]:
    """Tabulate ``(kr, Re C/A, Im C/A)`` on a strictly increasing grid."""
    grid = np.asarray(kr_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty kr grid")
    if np.any(grid <= 0):
        raise ValueError("all kr must be positive")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("kr grid must be strictly increasing")
    rows = []
    for kr in grid:
        c = coupling_constant(float(kr), theta, 1.0)
        rows.append((float(kr), c.real, c.imag))
    return rows


def kr_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive uniform grid; the end point is kept if it lands within step/1e6."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(math.floor((stop - start) / step + 1e-6)) + 1
    return start + step * np.arange(n)


def write_coupling_csv(rows: Iterable[tuple[float, float, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kr", "re_c_over_a", "im_c_over_a"])
        for kr, re, im in rows:
            writer.writerow([repr(float(kr)), repr(float(re)), repr(float(im))])
    return path
