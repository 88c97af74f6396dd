"""Master-equation reference used to check the trajectory ensembles.

The Liouvillian is the trace-preserving completion of the conditional
Hamiltonian and the reset map,

    L(rho) = -i (H rho - rho H^dag) + R(rho),

assembled explicitly on row-major vectorized 9x9 matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.integrate
import scipy.linalg
from scipy import stats

from . import _kernels
from .dynamics import ConditionalGenerator, build_h_cond, single_atom_h_cond
from .hilbert import DIM, LABELS, SUBSPACES, basis_state
from .model import ModelParams
from .trajectory import (
    ROOT_RTOL,
    T_CAP,
    EmissionRecord,
    ResetChannels,
    _Engine,
    _open_uniforms,
    initial_state,
    kernel_arrays,
    substream,
)

POSITIVITY_ABORT = 1e-8


class OracleError(RuntimeError):
    pass


def superoperator(h: np.ndarray, jumps: list[tuple[float, np.ndarray]]) -> np.ndarray:
    """Matrix of rho -> -i(h rho - rho h^dag) + sum_k w_k J_k rho J_k^dag."""
    n = h.shape[0]
    eye = np.eye(n)
    lv = -1j * np.kron(h, eye) + 1j * np.kron(eye, h.conj())
    for w, j in jumps:
        if w != 0:
            lv = lv + w * np.kron(j, j.conj())
    return lv


@dataclass(frozen=True)
class Liouvillian:
    params: ModelParams
    h: np.ndarray
    channels: ResetChannels
    matrix: np.ndarray

    @classmethod
    def from_params(cls, params: ModelParams) -> "Liouvillian":
        gen = build_h_cond(params)
        ch = ResetChannels.from_params(params)
        lv = superoperator(gen.h, [(ch.w_plus, ch.r_plus), (ch.w_minus, ch.r_minus)])
        return cls(params, gen.h, ch, lv)

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = self.matrix @ np.asarray(rho, dtype=complex).reshape(-1)
        return out.reshape(self.dim, self.dim)

    def restricted(self, subspace: int) -> np.ndarray:
        """Liouvillian matrix on density matrices supported in one subspace."""
        idx = list(SUBSPACES[subspace])
        sub = np.ix_(idx, idx)
        ch = self.channels
        jumps = [(ch.w_plus, ch.r_plus[sub]), (ch.w_minus, ch.r_minus[sub])]
        return superoperator(self.h[sub], jumps)

    def spectrum(self) -> np.ndarray:
        """Eigenvalues sorted by decreasing real part (0 first)."""
        ev = np.linalg.eigvals(self.matrix)
        return ev[np.argsort(-ev.real)]


def check_density(rho: np.ndarray, *, herm_tol=1e-10, trace_tol=1e-8, pos_tol=POSITIVITY_ABORT) -> None:
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > herm_tol:
        raise OracleError(f"density matrix not Hermitian (max deviation {herm:.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise OracleError(f"trace drifted to {tr!r}")
    lowest = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lowest < -pos_tol:
        raise OracleError(f"positivity violated: smallest eigenvalue {lowest:.3e}")


def evolve_density(
    liouvillian: Liouvillian | ModelParams,
    rho0: np.ndarray,
    times,
    *,
    rtol: float = 1e-9,
    atol: float = 1e-12,
    method: str = "DOP853",
) -> np.ndarray:
    """Integrate d rho/dt = L(rho); returns one density matrix per requested time."""
    lv = liouvillian if isinstance(liouvillian, Liouvillian) else Liouvillian.from_params(liouvillian)
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(ts < 0):
        raise ValueError("times must be non-negative")
    rho0 = np.asarray(rho0, dtype=complex)
    check_density(rho0)
    n = lv.dim
    out = np.empty((ts.size, n, n), dtype=complex)
    order = np.argsort(ts)
    t_sorted = ts[order]
    mat = lv.matrix
    positive = t_sorted > 0
    results = np.empty((ts.size, n * n), dtype=complex)
    results[~positive] = rho0.reshape(-1)
    if np.any(positive):
        sol = scipy.integrate.solve_ivp(
            lambda t, y: mat @ y,
            (0.0, float(t_sorted[-1])),
            rho0.reshape(-1),
            method=method,
            t_eval=t_sorted[positive],
            rtol=rtol,
            atol=atol,
        )
        if sol.status != 0:
            raise OracleError(f"integration failed at t={sol.t[-1] if sol.t.size else 0.0}: {sol.message}")
        results[positive] = sol.y.T
    for k, i in enumerate(order):
        rho = results[k].reshape(n, n)
        check_density(rho)
        out[i] = rho
    return out


def _null_vector(mat: np.ndarray, n: int, what: str) -> np.ndarray:
    _, s, vh = np.linalg.svd(mat)
    scale = max(s[0], 1.0)
    if s[-2] < 1e-10 * scale:
        raise OracleError(
            f"{what}: degenerate steady state (singular values {s[-1]:.2e}, {s[-2]:.2e}); "
            "restrict to a subspace"
        )
    rho = vh[-1].conj().reshape(n, n)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def _long_time_limit(mat: np.ndarray, rho0: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvals(mat)
    rates = np.abs(ev.real)
    slowest = rates[rates > 1e-9].min()
    t = 60.0 / slowest
    n = rho0.shape[0]
    rho = (scipy.linalg.expm(mat * t) @ rho0.reshape(-1)).reshape(n, n)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def steady_state(liouvillian: Liouvillian | ModelParams, subspace: int | None = None) -> np.ndarray:
    """Trace-one null vector of L, optionally restricted to one decoupled subspace.

    With omega2 = 0 the three subspaces do not talk to each other and the
    unrestricted steady state is not unique; this raises in that case.
    """
    lv = liouvillian if isinstance(liouvillian, Liouvillian) else Liouvillian.from_params(liouvillian)
    if subspace is None:
        rho = _null_vector(lv.matrix, lv.dim, "steady state")
    else:
        idx = list(SUBSPACES[subspace])
        m = len(idx)
        if m == 1:
            sub = np.ones((1, 1), dtype=complex)
        else:
            restricted = lv.restricted(subspace)
            try:
                sub = _null_vector(restricted, m, f"subspace {subspace} steady state")
            except OracleError:
                # subspace 1 keeps track of which atom is shelved; take the
                # limit reached from the uniform mixture over the subspace
                sub = _long_time_limit(restricted, np.eye(m, dtype=complex) / m)
        rho = np.zeros((lv.dim, lv.dim), dtype=complex)
        rho[np.ix_(idx, idx)] = sub
    residual = np.linalg.norm(lv.apply(rho))
    if residual > 1e-10:
        raise OracleError(f"steady-state residual {residual:.2e} exceeds 1e-10")
    return rho


def photon_rate(liouvillian: Liouvillian | ModelParams, rho: np.ndarray) -> float:
    """tr R(rho): emission probability per unit time."""
    lv = liouvillian if isinstance(liouvillian, Liouvillian) else Liouvillian.from_params(liouvillian)
    return float(np.trace(lv.channels.emission_operator() @ rho).real)


# --- single atom -----------------------------------------------------------

def single_atom_liouvillian(params: ModelParams, levels=(1, 2, 3)) -> np.ndarray:
    """Single V atom Liouvillian on the given levels (e.g. (1, 3) for the bare two-level atom)."""
    idx = [lv - 1 for lv in levels]
    h = single_atom_h_cond(params)[np.ix_(idx, idx)]
    lower = np.zeros((3, 3), dtype=complex)
    lower[0, 2] = 1.0
    return superoperator(h, [(params.a3, lower[np.ix_(idx, idx)])])


def single_atom_steady_state(params: ModelParams, levels=(1, 2, 3)) -> np.ndarray:
    n = len(levels)
    return _null_vector(single_atom_liouvillian(params, levels), n, "single-atom steady state")


def two_level_rate(params: ModelParams) -> float:
    """Steady photon rate of a resonantly driven two-level atom (levels 1 and 3)."""
    if params.omega3 == 0:
        return 0.0
    rho = single_atom_steady_state(params, levels=(1, 3))
    return float(params.a3 * rho[1, 1].real)


def single_atom_evolve(params: ModelParams, rho0: np.ndarray, times) -> np.ndarray:
    """Exact single-atom density matrices at ``times`` (via expm of the 9x9 generator)."""
    lv = single_atom_liouvillian(params)
    return np.array([(scipy.linalg.expm(lv * t) @ rho0.reshape(-1)).reshape(3, 3) for t in np.atleast_1d(times)])


def run_single_atom_trajectory(params: ModelParams, duration: float, seed: int, index: int | None = None,
                               initial_level: int = 1) -> np.ndarray:
    """Emission times of one isolated V atom (3x3 conditional dynamics)."""
    gen = ConditionalGenerator.from_matrix(single_atom_h_cond(params), params)
    args = kernel_arrays(gen)
    gamma = np.array(gen.gamma)
    lower = np.zeros((3, 3), dtype=complex)
    lower[0, 2] = 1.0
    psi = np.zeros(3, dtype=complex)
    psi[initial_level - 1] = 1.0
    rng = substream(seed, index)
    uniforms = _open_uniforms(rng, 8192)
    pos, t_now, n_out = 0, 0.0, 0
    times = np.empty(65536)
    chans = np.empty(65536, dtype=np.int8)
    surv = np.empty(65536)
    chunks = []
    while True:
        status, t_now, pos, n_out = _kernels.simulate_chunk(
            *args, gamma,
            lower, np.zeros((3, 3), dtype=complex), params.a3, 0.0, params.a3,
            psi, t_now, float(duration), uniforms, pos, times, chans, surv, n_out, 1e8, 1e-9,
        )
        if status == _kernels.NEED_RANDOM:
            uniforms = np.concatenate([uniforms[pos:], _open_uniforms(rng, 8192)])
            pos = 0
        elif status == _kernels.BUFFER_FULL:
            chunks.append(times.copy())
            n_out = 0
        elif status == _kernels.DONE:
            chunks.append(times[:n_out].copy())
            return np.concatenate(chunks)
        else:
            raise OracleError(f"single-atom trajectory failed with status {status}")


def independent_pair_times(params: ModelParams, duration: float, seed: int) -> np.ndarray:
    """Merged emission times of two isolated atoms, both starting in level 1."""
    a = run_single_atom_trajectory(params, duration, seed, 0)
    b = run_single_atom_trajectory(params, duration, seed, 1)
    return np.sort(np.concatenate([a, b]))


def interemission_ks(times_a: np.ndarray, times_b: np.ndarray):
    """Two-sample KS test on all inter-emission intervals of two records.

    Intervals within one record are correlated through the slow switching
    between fluorescence periods, so for shelving runs use
    :func:`thinned_intervals` over many records instead.
    """
    return stats.ks_2samp(np.diff(times_a), np.diff(times_b))


def interval_after(times: np.ndarray, t_star: float) -> float:
    """Interval between the first emission at or after ``t_star`` and the next one.

    Returns inf when the run ends first (censored: longer than observed).
    """
    k = int(np.searchsorted(times, t_star))
    return float(times[k + 1] - times[k]) if k + 1 < times.size else math.inf


def thinned_intervals(params: ModelParams, n: int, t_star: float, tail: float, seed: int,
                      *, pair: bool = True) -> np.ndarray:
    """One interval per independent run, so the samples are i.i.d.

    ``pair`` selects the two-atom simulator; otherwise two isolated single
    atoms are merged.
    """
    engine = _Engine(params) if pair else None
    out = np.empty(n)
    for k in range(n):
        if pair:
            times = engine.run("g", t_star + tail, seed, k, T_CAP, ROOT_RTOL).times
        else:
            times = np.sort(np.concatenate([
                run_single_atom_trajectory(params, t_star + tail, seed, 2 * k),
                run_single_atom_trajectory(params, t_star + tail, seed, 2 * k + 1),
            ]))
        out[k] = interval_after(times, t_star)
    return out


# --- ensemble comparison ---------------------------------------------------

def replay_states(record: EmissionRecord, grid, gen=None, channels=None):
    """Normalized conditional state at each grid time and per-event survivals."""
    gen = gen if gen is not None else build_h_cond(record.params)
    channels = channels if channels is not None else ResetChannels.from_params(record.params)
    grid = np.ascontiguousarray(np.asarray(grid, dtype=float))
    states = np.empty((grid.size, DIM), dtype=complex)
    surv = np.empty(len(record))
    psi0 = initial_state(record.initial) if record.initial != "custom" else basis_state("g")
    bad = _kernels.replay(
        *kernel_arrays(gen),
        np.ascontiguousarray(channels.r_plus), np.ascontiguousarray(channels.r_minus),
        psi0, np.ascontiguousarray(record.times, dtype=float),
        np.ascontiguousarray(record.channels, dtype=np.int8), grid, states, surv,
    )
    return states, surv, int(bad)


def ensemble_check(
    records: list[EmissionRecord],
    rho0: np.ndarray | None = None,
    times=(5.0, 10.0, 20.0, 35.0, 50.0),
    *,
    n_sigma: float = 4.0,
    min_trajectories: int = 100,
    channels: ResetChannels | None = None,
) -> dict:
    """Compare the trajectory-averaged state with the master equation at ``times``.

    ``channels`` overrides the reset operators used to replay the records
    (the oracle side always uses the correct ones).
    """
    if not records:
        raise ValueError("no records")
    params = records[0].params
    initial = records[0].initial
    for rec in records[1:]:
        if rec.params != params or rec.initial != initial:
            raise ValueError("records were generated with different parameters or initial states")
    grid = np.asarray(times, dtype=float)
    if np.any(grid > min(r.duration for r in records)):
        raise ValueError("check times exceed the simulated duration")
    if rho0 is None:
        psi0 = basis_state(initial)
        rho0 = np.outer(psi0, psi0.conj())
    gen = build_h_cond(params)
    ch = channels if channels is not None else ResetChannels.from_params(params)
    n = len(records)
    mean = np.zeros((grid.size, DIM, DIM), dtype=complex)
    sq_re = np.zeros((grid.size, DIM, DIM))
    sq_im = np.zeros((grid.size, DIM, DIM))
    # fixed reduction order: record index
    for rec in records:
        states, _, bad = replay_states(rec, grid, gen, ch)
        if bad >= 0:
            raise ValueError(f"record {rec.index}: channel at event {bad} annihilates the state")
        rho = np.einsum("ti,tj->tij", states, states.conj())
        mean += rho
        sq_re += rho.real**2
        sq_im += rho.imag**2
    mean /= n
    var_re = np.maximum(sq_re / n - mean.real**2, 0.0)
    var_im = np.maximum(sq_im / n - mean.imag**2, 0.0)
    se_re = np.sqrt(var_re / max(n - 1, 1))
    se_im = np.sqrt(var_im / max(n - 1, 1))
    exact = evolve_density(Liouvillian.from_params(params), rho0, grid)
    diff = mean - exact
    floor = 1e-12
    z_re = np.abs(diff.real) / np.maximum(se_re, floor)
    z_im = np.abs(diff.imag) / np.maximum(se_im, floor)
    # entries with no spread must agree to round-off
    z_re[(se_re < floor) & (np.abs(diff.real) < 1e-9)] = 0.0
    z_im[(se_im < floor) & (np.abs(diff.imag) < 1e-9)] = 0.0
    z = np.maximum(z_re, z_im)
    insufficient = n < min_trajectories
    max_z = float(z.max())
    passed = None if insufficient else bool(max_z <= n_sigma)
    worst = np.unravel_index(int(np.argmax(z)), z.shape)
    return {
        "n_trajectories": n,
        "times": grid.tolist(),
        "max_abs_deviation": [float(np.max(np.abs(d))) for d in diff],
        "max_z": max_z,
        "worst_entry": {
            "time": float(grid[worst[0]]),
            "row": LABELS[worst[1]],
            "col": LABELS[worst[2]],
            "trajectory_mean": [float(mean[worst].real), float(mean[worst].imag)],
            "master_equation": [float(exact[worst].real), float(exact[worst].imag)],
        },
        "z_scores": z.tolist(),
        "n_sigma": n_sigma,
        "insufficient_statistics": insufficient,
        "passed": passed,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1)


def liouvillian_gap(params: ModelParams) -> float:
    """Smallest nonzero |Re| eigenvalue of the two-atom Liouvillian."""
    ev = Liouvillian.from_params(params).spectrum()
    re = np.sort(np.abs(ev.real))
    return float(re[1])


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), math.ulp(1.0))


def subspace_dwell_time(params: ModelParams, subspace: int, t1: float = 200.0, t2: float = 400.0) -> float:
    """Mean residence time in a subspace predicted by the master equation.

    Starts from the omega2 = 0 equilibrium of the subspace, lets it relax
    under the full dynamics and reads the escape rate off the population
    decay between ``t1`` and ``t2``. No intensity binning is involved.
    """
    lv = Liouvillian.from_params(params)
    rho0 = steady_state(params.replace(omega2=0.0), subspace).reshape(-1)
    idx = list(SUBSPACES[subspace])
    pops = []
    for t in (t1, t2):
        rho = (scipy.linalg.expm(lv.matrix * t) @ rho0).reshape(DIM, DIM)
        pops.append(float(np.sum(np.diag(rho)[idx].real)))
    return (t2 - t1) / (math.log(pops[0]) - math.log(pops[1]))
