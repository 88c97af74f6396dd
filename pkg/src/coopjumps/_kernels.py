"""Compiled inner loops for trajectory sampling and replay.

Two propagation modes share the loops. With ``spectral`` set, amplitudes come
from the eigendecomposition of H_cond,
``psi(t) = V @ (exp(-i lam t) * (V^-1 @ psi))``, and the working vector ``c``
holds eigen-coefficients. Otherwise (defective or ill-conditioned H_cond)
``c`` is the state itself and ``exp(-i H t)`` is applied from a precomputed
ladder of propagators ``exp(-i H 2^k t0)`` plus a short Taylor remainder.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

DONE = 0
NEED_RANDOM = 1
BUFFER_FULL = 2
DARK = 3
NO_EMITTER = 4

_TINY = 1e-300


@njit(cache=True)
def _coeffs(right_inv, psi, out):
    n = psi.shape[0]
    for i in range(n):
        acc = 0j
        for j in range(n):
            acc += right_inv[i, j] * psi[j]
        out[i] = acc


@njit(cache=True)
def _amps(right, lam, c, t, out):
    n = c.shape[0]
    ph = np.empty(n, dtype=np.complex128)
    for m in range(n):
        ph[m] = c[m] * np.exp(-1j * lam[m] * t)
    for i in range(n):
        acc = 0j
        for m in range(n):
            acc += right[i, m] * ph[m]
        out[i] = acc


@njit(cache=True)
def _expm_apply(ladder, t0, h, c, t, out):
    """out = exp(-i h t) c using ladder[k] = exp(-i h 2^k t0) and a Taylor remainder."""
    n = c.shape[0]
    m = int(t // t0)
    r = t - m * t0
    v = np.empty(n, dtype=np.complex128)
    w = np.empty(n, dtype=np.complex128)
    term = np.empty(n, dtype=np.complex128)
    for i in range(n):
        v[i] = c[i]
        term[i] = c[i]
    # |h| r <= 1/4: degree 16 leaves < 1e-22
    for k in range(1, 17):
        _matvec(h, term, w)
        for i in range(n):
            term[i] = (-1j * r / k) * w[i]
            v[i] += term[i]
    top = ladder.shape[0] - 1
    while m >= (1 << top) * 2:
        _matvec(ladder[top], v, w)
        v[:] = w
        m -= 1 << top
    k = 0
    while m > 0:
        if m & 1:
            _matvec(ladder[k], v, w)
            v[:] = w
        m >>= 1
        k += 1
    for i in range(n):
        out[i] = v[i]


@njit(cache=True)
def _prepare(spectral, right_inv, psi, c):
    if spectral:
        _coeffs(right_inv, psi, c)
    else:
        for i in range(psi.shape[0]):
            c[i] = psi[i]


@njit(cache=True)
def _evolve(spectral, right, lam, ladder, t0, h, c, t, out):
    if spectral:
        _amps(right, lam, c, t, out)
    else:
        _expm_apply(ladder, t0, h, c, t, out)


@njit(cache=True)
def _norm2(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i].real * v[i].real + v[i].imag * v[i].imag
    return s


@njit(cache=True)
def _quad(gamma, v):
    n = v.shape[0]
    s = 0j
    for i in range(n):
        acc = 0j
        for j in range(n):
            acc += gamma[i, j] * v[j]
        s += np.conj(v[i]) * acc
    return s.real


@njit(cache=True)
def _matvec(m, v, out):
    n = v.shape[0]
    for i in range(n):
        acc = 0j
        for j in range(n):
            acc += m[i, j] * v[j]
        out[i] = acc


@njit(cache=True)
def solve_waiting_time(spectral, right, lam, ladder, t0, h, gamma, c, u, t_max, a3, rtol):
    """Root of P0(t) = u on (0, t_max]; returns -1 when P0(t_max) > u.

    Bracket by doubling from 1/a3, then safeguarded Newton on log P0.
    """
    n = c.shape[0]
    a = np.empty(n, dtype=np.complex128)
    log_u = math.log(u)
    lo = 0.0
    hi = min(1.0 / a3, t_max)
    while True:
        _evolve(spectral, right, lam, ladder, t0, h, c, hi, a)
        p = _norm2(a)
        if p <= u:
            break
        if hi >= t_max:
            return -1.0
        lo = hi
        hi = min(2.0 * hi, t_max)
    t = 0.5 * (lo + hi)
    for _ in range(200):
        _evolve(spectral, right, lam, ladder, t0, h, c, t, a)
        p = _norm2(a)
        f = math.log(max(p, _TINY)) - log_u
        if f > 0:
            lo = t
        else:
            hi = t
        w = _quad(gamma, a)
        t_new = -1.0
        if w > 0 and p > _TINY:
            t_new = t + f * p / w
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        step = abs(t_new - t)
        t = t_new
        if step <= rtol * t or hi - lo <= rtol * hi:
            break
    return t


@njit(cache=True)
def simulate_chunk(
    spectral, right, right_inv, lam, ladder, t0, h, gamma, rp, rm, wp, wm, a3,
    psi, t_now, t_end, uniforms, pos,
    times_out, chans_out, surv_out, n_out,
    t_cap, rtol,
):
    """Advance one trajectory until t_end, a full buffer or exhausted randoms.

    ``psi`` (normalized) is updated in place. Returns
    ``(status, t_now, pos, n_out)``.
    """
    n = psi.shape[0]
    c = np.empty(n, dtype=np.complex128)
    a = np.empty(n, dtype=np.complex128)
    bp = np.empty(n, dtype=np.complex128)
    bm = np.empty(n, dtype=np.complex128)
    while True:
        if n_out >= times_out.shape[0]:
            return BUFFER_FULL, t_now, pos, n_out
        if pos + 2 > uniforms.shape[0]:
            return NEED_RANDOM, t_now, pos, n_out
        u = uniforms[pos]
        remaining = t_end - t_now
        _prepare(spectral, right_inv, psi, c)
        limit = min(remaining, t_cap)
        tau = solve_waiting_time(spectral, right, lam, ladder, t0, h, gamma, c, u, limit, a3, rtol)
        if tau < 0:
            pos += 1
            if remaining > t_cap:
                return DARK, t_now, pos, n_out
            _evolve(spectral, right, lam, ladder, t0, h, c, remaining, a)
            norm = math.sqrt(_norm2(a))
            if norm > 0:
                for i in range(n):
                    psi[i] = a[i] / norm
            return DONE, t_end, pos, n_out
        _evolve(spectral, right, lam, ladder, t0, h, c, tau, a)
        _matvec(rp, a, bp)
        _matvec(rm, a, bm)
        pp = wp * _norm2(bp)
        pm = wm * _norm2(bm)
        total = pp + pm
        if not total > 0:
            return NO_EMITTER, t_now, pos, n_out
        u2 = uniforms[pos + 1]
        pos += 2
        if u2 * total < pp:
            chan = 1
            norm = math.sqrt(_norm2(bp))
            for i in range(n):
                psi[i] = bp[i] / norm
        else:
            chan = -1
            norm = math.sqrt(_norm2(bm))
            for i in range(n):
                psi[i] = bm[i] / norm
        t_now = t_now + tau
        times_out[n_out] = t_now
        chans_out[n_out] = chan
        surv_out[n_out] = u
        n_out += 1


@njit(cache=True)
def replay(spectral, right, right_inv, lam, ladder, t0, h, rp, rm, psi0, times, chans, grid, states_out, surv_out):
    """Rebuild the conditional state at sorted ``grid`` times from a record.

    ``states_out[k]`` is the normalized state at ``grid[k]`` (right after any
    emission at exactly that time); ``surv_out[j]`` the no-photon probability
    of the interval ending at emission j. Returns the index of the first
    event whose channel annihilates the state, or -1.
    """
    n = psi0.shape[0]
    psi = psi0.copy()
    c = np.empty(n, dtype=np.complex128)
    a = np.empty(n, dtype=np.complex128)
    b = np.empty(n, dtype=np.complex128)
    t_last = 0.0
    g = 0
    n_ev = times.shape[0]
    n_grid = grid.shape[0]
    _prepare(spectral, right_inv, psi, c)
    for j in range(n_ev + 1):
        t_next = times[j] if j < n_ev else math.inf
        while g < n_grid and grid[g] < t_next:
            _evolve(spectral, right, lam, ladder, t0, h, c, grid[g] - t_last, a)
            norm = math.sqrt(_norm2(a))
            for i in range(n):
                states_out[g, i] = a[i] / norm
            g += 1
        if j == n_ev:
            break
        _evolve(spectral, right, lam, ladder, t0, h, c, t_next - t_last, a)
        surv_out[j] = _norm2(a)
        if chans[j] > 0:
            _matvec(rp, a, b)
        else:
            _matvec(rm, a, b)
        norm = math.sqrt(_norm2(b))
        if not norm > 0:
            return j
        for i in range(n):
            psi[i] = b[i] / norm
        t_last = t_next
        _prepare(spectral, right_inv, psi, c)
    return -1
