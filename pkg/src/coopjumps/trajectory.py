"""Quantum-jump trajectories: waiting times, two-channel resets, emission records."""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import _kernels
from .dynamics import (
    ConditionalGenerator,
    build_h_cond,
    no_photon_probability,
    waiting_time_density,
)
from .hilbert import DIM, INDEX, LABELS, StateVector, basis_state, build_sigma_minus
from .model import ModelParams

T_CAP = 1e8
ROOT_RTOL = 1e-9
RANDOM_BLOCK = 8192
EVENT_BLOCK = 65536


class SamplerError(RuntimeError):
    """An emission was attributed to a state that cannot emit."""


class DarkStateError(RuntimeError):
    """No emission within the waiting-time cap."""


class TrajectoryError(RuntimeError):
    """A trajectory aborted; ``record`` holds everything simulated so far."""

    def __init__(self, message: str, record: "EmissionRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class ResetChannels:
    """Pure-state decomposition of the reset map into R+ and R-."""

    r_plus: np.ndarray
    r_minus: np.ndarray
    w_plus: float
    w_minus: float

    @classmethod
    def from_params(cls, params: ModelParams) -> "ResetChannels":
        s13, s23 = build_sigma_minus(1, 3), build_sigma_minus(2, 3)
        rp = (s13 + s23) / math.sqrt(2.0)
        rm = (s13 - s23) / math.sqrt(2.0)
        re_c = params.c3.real
        return cls(rp, rm, params.a3 + re_c, params.a3 - re_c)

    @property
    def weights(self) -> tuple[float, float]:
        return self.w_plus, self.w_minus

    def channel_probabilities(self, psi) -> tuple[float, float]:
        v = _amp(psi)
        pp = self.w_plus * float(np.vdot(self.r_plus @ v, self.r_plus @ v).real)
        pm = self.w_minus * float(np.vdot(self.r_minus @ v, self.r_minus @ v).real)
        total = pp + pm
        if not total > 0:
            raise SamplerError("reset applied to a state with no emitting component")
        return pp / total, pm / total

    def emission_operator(self) -> np.ndarray:
        """Sum_k w_k R_k^dag R_k; its expectation is the emission rate."""
        return self.w_plus * self.r_plus.conj().T @ self.r_plus + self.w_minus * self.r_minus.conj().T @ self.r_minus


def _amp(psi) -> np.ndarray:
    if isinstance(psi, StateVector):
        return psi.amp
    return np.asarray(psi, dtype=complex)


def sample_waiting_time(
    gen: ConditionalGenerator,
    psi,
    u: float,
    *,
    t_cap: float = T_CAP,
    rtol: float = ROOT_RTOL,
) -> float:
    """Waiting time t* solving P0(t*) = u, i.e. inverse-transform sampling of w1."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    v = np.ascontiguousarray(_amp(psi))
    spectral, right, right_inv, lam, ladder, t0, h = kernel_arrays(gen)
    c = np.empty(v.size, dtype=complex)
    _kernels._prepare(spectral, right_inv, v, c)
    a3 = gen.params.a3 if gen.params is not None else 1.0
    t = _kernels.solve_waiting_time(
        spectral, right, lam, ladder, t0, h, np.array(gen.gamma), c, float(u), float(t_cap), float(a3), float(rtol),
    )
    if t < 0:
        raise DarkStateError(f"no emission before t_cap={t_cap:g}; effectively dark state")
    return float(t)


def kernel_arrays(gen: ConditionalGenerator) -> tuple:
    """Arguments ``(spectral, V, V^-1, eigenvalues, ladder, t0, H)`` of the compiled loops.

    Without a usable eigenbasis the loops propagate with
    ``ladder[k] = exp(-i H 2^k t0)``, built here by repeated squaring.
    """
    # writable copies: numba compiles read-only arrays as a separate signature
    n = gen.h.shape[0]
    h = np.array(gen.h, dtype=complex)
    spectral = gen.diagonalizable
    if spectral:
        return (spectral, np.array(gen.right), np.array(gen.right_inv),
                np.array(gen.eigenvalues), np.zeros((1, n, n), dtype=complex), 1.0, h)
    t0 = 0.25 / max(float(np.max(np.sum(np.abs(h), axis=1))), 1e-300)
    levels = max(1, int(math.ceil(math.log2(2.0 * T_CAP / t0))) + 1)
    ladder = np.empty((levels, n, n), dtype=complex)
    ladder[0] = scipy.linalg.expm(-1j * h * t0)
    for k in range(1, levels):
        ladder[k] = ladder[k - 1] @ ladder[k - 1]
    eye = np.eye(n, dtype=complex)
    return spectral, eye, eye.copy(), np.array(gen.eigenvalues), ladder, t0, h


def _solve_waiting_time_slow(gen, v, u, t_cap, rtol) -> float:
    # plain bisection on no_photon_probability; reference for the compiled solver
    lo, hi = 0.0, 1.0
    while no_photon_probability(gen, v, hi) > u:
        if hi >= t_cap:
            raise DarkStateError(f"no emission before t_cap={t_cap:g}; effectively dark state")
        lo, hi = hi, min(2.0 * hi, t_cap)
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if no_photon_probability(gen, v, mid) > u:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def apply_reset(channels: ResetChannels, psi, u: float | None = None, rng=None):
    """Pick R+ or R- for an emission from ``psi`` and return the normalized post-state.

    Returns ``(channel, state, (p_plus, p_minus))`` with channel +1 or -1.
    """
    p_plus, p_minus = channels.channel_probabilities(psi)
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).random()
    v = _amp(psi)
    if u < p_plus:
        chan, out = 1, channels.r_plus @ v
    else:
        chan, out = -1, channels.r_minus @ v
    return chan, StateVector(out).normalized(), (p_plus, p_minus)


def reset_density(channels_or_params, rho: np.ndarray) -> np.ndarray:
    """Unnormalized reset state R(rho) written with the atomic lowering operators."""
    params = channels_or_params if isinstance(channels_or_params, ModelParams) else None
    if params is None:
        w_plus, w_minus = channels_or_params.weights
        a3, re_c = 0.5 * (w_plus + w_minus), 0.5 * (w_plus - w_minus)
    else:
        a3, re_c = params.a3, params.c3.real
    s13, s23 = build_sigma_minus(1, 3), build_sigma_minus(2, 3)
    s13p, s23p = s13.conj().T, s23.conj().T
    return a3 * (s13 @ rho @ s13p + s23 @ rho @ s23p) + re_c * (s13 @ rho @ s23p + s23 @ rho @ s13p)


def reset_density_channels(channels: ResetChannels, rho: np.ndarray) -> np.ndarray:
    """Same map in the two-channel form w+ R+ rho R+^dag + w- R- rho R-^dag."""
    rp, rm = channels.r_plus, channels.r_minus
    return channels.w_plus * rp @ rho @ rp.conj().T + channels.w_minus * rm @ rho @ rm.conj().T


@dataclass
class EmissionRecord:
    """Photon emission times and reset channels of one trajectory."""

    params: ModelParams
    seed: int
    index: int | None
    initial: str
    duration: float
    times: np.ndarray
    channels: np.ndarray
    survival: np.ndarray | None = None
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def rate(self) -> float:
        return len(self) / self.duration

    def header(self) -> dict:
        head = {f"param.{k}": v for k, v in self.params.to_dict().items()}
        head.update(
            seed=self.seed,
            index="" if self.index is None else self.index,
            initial=self.initial,
            duration=repr(float(self.duration)),
            status=self.status,
        )
        return head

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        for key, value in self.header().items():
            buf.write(f"# {key}={value}\n")
        buf.write("time,channel\n")
        for t, c in zip(self.times, self.channels):
            buf.write(f"{float(t)!r},{'+' if c > 0 else '-'}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "EmissionRecord":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        head: dict[str, str] = {}
        times, chans = [], []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                head[key] = value
            elif line and not line.startswith("time"):
                t, c = line.split(",")
                times.append(float(t))
                chans.append(1 if c.strip() == "+" else -1)
        params = ModelParams.from_dict({k[6:]: v for k, v in head.items() if k.startswith("param.")})
        return cls(
            params=params,
            seed=int(head["seed"]),
            index=int(head["index"]) if head.get("index") else None,
            initial=head["initial"],
            duration=float(head["duration"]),
            times=np.array(times, dtype=float),
            channels=np.array(chans, dtype=np.int8),
            status=head.get("status", "ok"),
        )

    def save_npz(self, path: str | Path) -> None:
        np.savez(
            path,
            times=self.times,
            channels=self.channels,
            survival=self.survival if self.survival is not None else np.zeros(0),
            header=json.dumps(self.header()),
        )

    @classmethod
    def load_npz(cls, path: str | Path) -> "EmissionRecord":
        with np.load(path) as data:
            head = json.loads(str(data["header"]))
            survival = data["survival"]
            rec = cls(
                params=ModelParams.from_dict({k[6:]: v for k, v in head.items() if k.startswith("param.")}),
                seed=int(head["seed"]),
                index=int(head["index"]) if head["index"] != "" else None,
                initial=head["initial"],
                duration=float(head["duration"]),
                times=data["times"].copy(),
                channels=data["channels"].copy(),
                survival=survival.copy() if survival.size else None,
                status=head["status"],
            )
        return rec


def substream(seed: int, index: int | None = None) -> np.random.Generator:
    """Independent generator for trajectory ``index`` (hash of seed and index)."""
    if index is None:
        ss = np.random.SeedSequence(seed)
    else:
        ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(ss))


def _open_uniforms(rng: np.random.Generator, n: int) -> np.ndarray:
    # shift onto the open interval (0, 1)
    return rng.random(n) + 2.0**-54


def initial_state(initial) -> np.ndarray:
    if isinstance(initial, str):
        return basis_state(initial)
    return StateVector(initial).normalized().amp.copy()


class _Engine:
    """Cached arrays of one parameter set, ready for the compiled kernels."""

    def __init__(self, params: ModelParams, reset_sign: float = 1.0):
        self.params = params
        self.gen = build_h_cond(params)
        ch = ResetChannels.from_params(params)
        if reset_sign != 1.0:
            # mutation hook for validation: R- = (S13- - sign * S23-)/sqrt(2)
            s13, s23 = build_sigma_minus(1, 3), build_sigma_minus(2, 3)
            ch = ResetChannels(ch.r_plus, (s13 - reset_sign * s23) / math.sqrt(2.0), ch.w_plus, ch.w_minus)
        self.channels = ch
        self.kernel_args = kernel_arrays(self.gen)
        self.gamma = np.array(self.gen.gamma)
        self.rp = np.ascontiguousarray(ch.r_plus)
        self.rm = np.ascontiguousarray(ch.r_minus)

    def run(self, initial, duration: float, seed: int, index: int | None,
            t_cap: float = T_CAP, rtol: float = ROOT_RTOL) -> EmissionRecord:
        if not duration > 0:
            raise ValueError("duration must be positive")
        label = initial if isinstance(initial, str) else "custom"
        psi = initial_state(initial)
        rng = substream(seed, index)
        uniforms = _open_uniforms(rng, RANDOM_BLOCK)
        pos = 0
        t_now = 0.0
        chunks_t, chunks_c, chunks_s = [], [], []
        times = np.empty(EVENT_BLOCK)
        chans = np.empty(EVENT_BLOCK, dtype=np.int8)
        surv = np.empty(EVENT_BLOCK)
        n_out = 0
        a3 = self.params.a3
        while True:
            status, t_now, pos, n_out = _kernels.simulate_chunk(
                *self.kernel_args, self.gamma, self.rp, self.rm,
                self.channels.w_plus, self.channels.w_minus, a3,
                psi, t_now, float(duration), uniforms, pos,
                times, chans, surv, n_out, float(t_cap), float(rtol),
            )
            if status == _kernels.NEED_RANDOM:
                uniforms = np.concatenate([uniforms[pos:], _open_uniforms(rng, RANDOM_BLOCK)])
                pos = 0
                continue
            if status == _kernels.BUFFER_FULL:
                chunks_t.append(times.copy())
                chunks_c.append(chans.copy())
                chunks_s.append(surv.copy())
                n_out = 0
                continue
            chunks_t.append(times[:n_out].copy())
            chunks_c.append(chans[:n_out].copy())
            chunks_s.append(surv[:n_out].copy())
            break
        record = EmissionRecord(
            params=self.params,
            seed=seed,
            index=index,
            initial=label,
            duration=float(duration),
            times=np.concatenate(chunks_t),
            channels=np.concatenate(chunks_c),
            survival=np.concatenate(chunks_s),
        )
        if status == _kernels.DARK:
            record.status = f"aborted: no emission within t_cap={t_cap:g} after t={t_now:g}"
            raise TrajectoryError(record.status, record)
        if status == _kernels.NO_EMITTER:
            record.status = f"aborted: emission sampled from a non-emitting state at t={t_now:g}"
            raise TrajectoryError(record.status, record)
        return record


def run_trajectory(
    params: ModelParams,
    initial="g",
    duration: float = 1000.0,
    seed: int = 0,
    index: int | None = None,
    *,
    t_cap: float = T_CAP,
    rtol: float = ROOT_RTOL,
) -> EmissionRecord:
    """Simulate one emission record of length ``duration`` (units 1/A3)."""
    return _Engine(params).run(initial, duration, seed, index, t_cap, rtol)


def _ensemble_worker(args):
    params, initial, duration, seed, indices, reset_sign = args
    engine = _Engine(params, reset_sign)
    return [engine.run(initial, duration, seed, i) for i in indices]


def run_ensemble(
    params: ModelParams,
    initial="g",
    duration: float = 50.0,
    n: int = 100,
    seed: int = 0,
    *,
    workers: int = 1,
    reset_sign: float = 1.0,
) -> list[EmissionRecord]:
    """``n`` independent trajectories; trajectory i uses substream (seed, i).

    The result does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    if workers <= 1:
        return _ensemble_worker((params, initial, duration, seed, range(n), reset_sign))
    chunks = [list(range(n))[k::workers] for k in range(workers)]
    jobs = [(params, initial, duration, seed, idx, reset_sign) for idx in chunks if idx]
    records: list[EmissionRecord | None] = [None] * n
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for batch in pool.map(_ensemble_worker, jobs):
            for rec in batch:
                records[rec.index] = rec
    return records  # type: ignore[return-value]


def emission_rate(params: ModelParams, psi) -> float:
    """Instantaneous photon rate -dP0/dt at t = 0 for state ``psi``."""
    return waiting_time_density(build_h_cond(params), psi, 0.0)


__all__ = [
    "DIM",
    "INDEX",
    "LABELS",
    "DarkStateError",
    "EmissionRecord",
    "ResetChannels",
    "SamplerError",
    "TrajectoryError",
    "apply_reset",
    "emission_rate",
    "reset_density",
    "reset_density_channels",
    "run_ensemble",
    "run_trajectory",
    "sample_waiting_time",
    "substream",
]
