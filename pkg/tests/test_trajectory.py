import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coopjumps.dynamics import build_h_cond, no_photon_probability, waiting_time_density
from coopjumps.hilbert import DIM, basis_state, build_sigma_minus
from coopjumps.model import ModelParams
from coopjumps.oracle import (
    independent_pair_times,
    interemission_ks,
    interval_after,
    photon_rate,
    steady_state,
    thinned_intervals,
    two_level_rate,
)
from coopjumps.trajectory import (
    DarkStateError,
    EmissionRecord,
    ResetChannels,
    SamplerError,
    TrajectoryError,
    _solve_waiting_time_slow,
    apply_reset,
    emission_rate,
    reset_density,
    reset_density_channels,
    run_ensemble,
    run_trajectory,
    sample_waiting_time,
    substream,
)

LASERS_OFF = ModelParams(omega2=0.0, omega3=0.0)


def random_state(rng):
    v = rng.normal(size=DIM) + 1j * rng.normal(size=DIM)
    return v / np.linalg.norm(v)


def random_density(rng):
    g = rng.normal(size=(DIM, DIM)) + 1j * rng.normal(size=(DIM, DIM))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def test_channels_are_symmetric_combinations():
    p = ModelParams(kr=2.0)
    ch = ResetChannels.from_params(p)
    s13, s23 = build_sigma_minus(1, 3), build_sigma_minus(2, 3)
    assert np.allclose(ch.r_plus, (s13 + s23) / math.sqrt(2))
    assert np.allclose(ch.r_minus, (s13 - s23) / math.sqrt(2))
    assert ch.weights == (1 + p.c3.real, 1 - p.c3.real)
    for kr in np.linspace(0.1, 40, 200):
        assert min(ResetChannels.from_params(ModelParams(kr=kr)).weights) >= 0


def test_waiting_time_closed_form():
    gen = build_h_cond(LASERS_OFF)
    assert sample_waiting_time(gen, basis_state("s23"), math.exp(-1)) == pytest.approx(1.0, rel=1e-9)
    assert sample_waiting_time(gen, basis_state("e3"), 0.25) == pytest.approx(math.log(4) / 2, rel=1e-9)


def test_waiting_time_near_one_is_short():
    gen = build_h_cond(ModelParams())
    assert sample_waiting_time(gen, basis_state("e3"), 1 - 1e-12) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.integers(0, 1000))
def test_waiting_time_monotone_and_inverts_p0(u1, u2, seed):
    gen = build_h_cond(ModelParams(kr=3.0))
    psi = random_state(np.random.default_rng(seed))
    t1, t2 = sample_waiting_time(gen, psi, u1), sample_waiting_time(gen, psi, u2)
    assert no_photon_probability(gen, psi, t1) == pytest.approx(u1, rel=1e-7)
    if u1 < u2:
        assert t1 >= t2


def test_waiting_time_slow_path_agrees():
    gen = build_h_cond(ModelParams())
    psi = basis_state("g")
    for u in (0.9, 0.5, 1e-3):
        assert _solve_waiting_time_slow(gen, psi, u, 1e8, 1e-11) == pytest.approx(sample_waiting_time(gen, psi, u), rel=1e-8)


def test_waiting_time_rejects_bad_u_and_dark_state():
    gen = build_h_cond(ModelParams(omega2=0.0))
    with pytest.raises(ValueError):
        sample_waiting_time(gen, basis_state("g"), 0.0)
    with pytest.raises(DarkStateError):
        sample_waiting_time(gen, basis_state("e2"), 0.5)


def test_reset_from_e3():
    p = ModelParams(kr=2.0)
    ch = ResetChannels.from_params(p)
    chan, state, (pp, pm) = apply_reset(ch, basis_state("e3"), u=0.0)
    re_c = p.c3.real
    assert pp / pm == pytest.approx((1 + re_c) / (1 - re_c), rel=1e-12)
    assert chan == 1 and np.allclose(state.amp, basis_state("s13"))
    chan, state, _ = apply_reset(ch, basis_state("e3"), u=0.999)
    assert chan == -1 and np.allclose(np.abs(state.amp), np.abs(basis_state("a13")))


def test_reset_from_s13_goes_to_ground():
    ch = ResetChannels.from_params(ModelParams(kr=5.0))
    for u in (0.0, 0.5, 0.999999):
        chan, state, probs = apply_reset(ch, basis_state("s13"), u=u)
        assert chan == 1 and probs == (1.0, 0.0)
        assert np.allclose(state.amp, basis_state("g"))


def test_reset_from_s23_without_coupling():
    ch = ResetChannels.from_params(ModelParams(include_c3=False))
    _, _, probs = apply_reset(ch, basis_state("s23"), u=0.1)
    assert probs == pytest.approx((0.5, 0.5), abs=1e-15)
    _, plus, _ = apply_reset(ch, basis_state("s23"), u=0.1)
    _, minus, _ = apply_reset(ch, basis_state("s23"), u=0.9)
    assert abs(np.vdot(basis_state("s12"), plus.amp)) == pytest.approx(1.0)
    assert abs(np.vdot(basis_state("a12"), minus.amp)) == pytest.approx(1.0)


@pytest.mark.parametrize("label", ["g", "e2", "s12", "a12"])
def test_reset_of_non_emitting_state_is_error(label):
    with pytest.raises(SamplerError):
        apply_reset(ResetChannels.from_params(ModelParams()), basis_state(label))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2 * math.pi), st.floats(0.1, 40))
def test_channel_probabilities_sum_and_phase_invariance(seed, phase, kr):
    ch = ResetChannels.from_params(ModelParams(kr=kr))
    psi = random_state(np.random.default_rng(seed))
    p = ch.channel_probabilities(psi)
    assert sum(p) == pytest.approx(1.0, abs=1e-14)
    assert ch.channel_probabilities(psi * np.exp(1j * phase)) == pytest.approx(p, abs=1e-14)


def test_reset_forms_agree_on_random_densities():
    rng = np.random.default_rng(5)
    for kr in (0.5, 2.0, 10.0):
        p = ModelParams(kr=kr)
        ch = ResetChannels.from_params(p)
        for _ in range(100):
            rho = random_density(rng)
            assert np.max(np.abs(reset_density(p, rho) - reset_density_channels(ch, rho))) <= 1e-12


def test_reset_density_examples():
    p = ModelParams(kr=2.0)
    g = basis_state("g")
    assert np.allclose(reset_density(p, np.outer(g, g)), 0)
    e3 = basis_state("e3")
    re_c = p.c3.real
    s13, a13 = basis_state("s13"), basis_state("a13")
    expected = (1 + re_c) * np.outer(s13, s13.conj()) + (1 - re_c) * np.outer(a13, a13.conj())
    assert np.allclose(reset_density(p, np.outer(e3, e3)), expected, atol=1e-15)


@pytest.mark.parametrize("kr", [0.3, 2.0, 10.0])
def test_reset_trace_equals_emission_rate(kr):
    p = ModelParams(kr=kr)
    gen = build_h_cond(p)
    rng = np.random.default_rng(6)
    for _ in range(200):
        psi = random_state(rng)
        tr = np.trace(reset_density(p, np.outer(psi, psi.conj()))).real
        assert abs(tr - waiting_time_density(gen, psi, 0.0)) <= 1e-9
        assert abs(tr - emission_rate(p, psi)) <= 1e-9


def test_dark_initial_state_never_emits():
    rec = run_trajectory(ModelParams(omega2=0.0), "e2", 1e6, seed=1)
    assert len(rec) == 0 and rec.status == "ok"


def test_record_invariants_and_determinism():
    p = ModelParams(kr=5.0)
    a = run_trajectory(p, "g", 2e4, seed=42)
    b = run_trajectory(p, "g", 2e4, seed=42)
    assert a.to_csv() == b.to_csv()
    assert np.array_equal(a.survival, b.survival)
    assert np.all(np.diff(a.times) > 0)
    assert a.duration >= a.times[-1]
    assert set(np.unique(a.channels)) <= {-1, 1}
    c = run_trajectory(p, "g", 2e4, seed=43)
    assert c.to_csv() != a.to_csv()


def test_record_round_trips(tmp_path):
    rec = run_trajectory(ModelParams(kr=3.0), "g", 2000.0, seed=7, index=3)
    back = EmissionRecord.from_csv(rec.to_csv(tmp_path / "r.csv") and tmp_path / "r.csv")
    assert np.array_equal(back.times, rec.times) and np.array_equal(back.channels, rec.channels)
    assert back.params == rec.params and back.seed == 7 and back.index == 3
    rec.save_npz(tmp_path / "r.npz")
    back = EmissionRecord.load_npz(tmp_path / "r.npz")
    assert np.array_equal(back.survival, rec.survival) and back.initial == "g"
    text = rec.to_csv()
    assert "# seed=7" in text and "# param.kr=3.0" in text and "time,channel" in text


def test_dark_abort_keeps_partial_record():
    with pytest.raises(TrajectoryError) as info:
        run_trajectory(ModelParams(omega2=0.0), "e2", 1e9, seed=0, t_cap=1e3)
    assert info.value.record.status.startswith("aborted")


def test_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        run_trajectory(ModelParams(), "g", 0.0, seed=0)


def test_substreams_distinct():
    a = substream(1, 0).random(4)
    assert not np.array_equal(a, substream(1, 1).random(4))
    assert np.array_equal(a, substream(1, 0).random(4))


def test_bright_subspace_rate_twice_single_atom():
    p = ModelParams(omega2=0.0, kr=10.0, omega3=0.5)
    rec = run_trajectory(p, "g", 1e5, seed=11)
    i1 = two_level_rate(p)
    oracle_rate = photon_rate(p, steady_state(p, subspace=2))
    assert rec.rate / (2 * i1) == pytest.approx(1.0, abs=0.05)
    assert rec.rate == pytest.approx(oracle_rate, rel=0.03)


def test_ensemble_single_equals_trajectory():
    p = ModelParams()
    (rec,) = run_ensemble(p, "g", 500.0, 1, seed=9)
    assert rec.to_csv() == run_trajectory(p, "g", 500.0, 9, index=0).to_csv()


def test_ensemble_independent_of_workers():
    p = ModelParams(kr=4.0)
    one = run_ensemble(p, "g", 300.0, 12, seed=3, workers=1)
    three = run_ensemble(p, "g", 300.0, 12, seed=3, workers=3)
    assert [r.to_csv() for r in one] == [r.to_csv() for r in three]


def test_ensemble_count_grows_at_steady_rate():
    p = ModelParams(omega2=0.0, kr=10.0)
    recs = run_ensemble(p, "g", 400.0, 400, seed=21)
    d = np.array([np.sum((r.times > 200) & (r.times <= 400)) for r in recs], dtype=float)
    slope = d.mean() / 200
    sigma = d.std(ddof=1) / math.sqrt(len(d)) / 200
    assert abs(slope - photon_rate(p, steady_state(p, subspace=2))) <= 3 * sigma


def test_no_coupling_matches_independent_atoms():
    # one interval per run: intervals inside one run are correlated through the period switching
    p = ModelParams(omega2=0.01, omega3=0.5, include_c3=False)
    pair = thinned_intervals(p, 400, 1000.0, 3000.0, seed=100)
    ref = thinned_intervals(p, 400, 1000.0, 3000.0, seed=200, pair=False)
    assert stats.ks_2samp(pair, ref).pvalue > 0.01


def test_independent_pair_times_merges_two_atoms():
    p = ModelParams(omega2=0.0, omega3=0.5)
    merged = independent_pair_times(p, 2e4, seed=3)
    assert np.all(np.diff(merged) >= 0)
    assert merged.size / 2e4 == pytest.approx(2 * two_level_rate(p), rel=0.05)
    assert interemission_ks(merged, merged).pvalue == 1.0


def test_interval_after():
    times = np.array([1.0, 2.0, 4.5, 9.0])
    assert interval_after(times, 1.5) == 2.5
    assert interval_after(times, 0.0) == 1.0
    assert interval_after(times, 5.0) == math.inf


def test_exceptional_point_uses_compiled_fallback():
    # omega3 = a3/2 with omega2 = 0 makes the (s12, s23) block a Jordan block
    p = ModelParams(omega2=0.0, omega3=0.5)
    gen = build_h_cond(p)
    assert not gen.diagonalizable
    for label in ("g", "s23", "a23"):
        psi = basis_state(label)
        for u in (0.9, 0.3, 1e-4):
            assert sample_waiting_time(gen, psi, u) == pytest.approx(
                _solve_waiting_time_slow(gen, psi, u, 1e8, 1e-12), rel=1e-8
            )


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5e4), st.integers(0, 1000))
def test_ladder_propagation_matches_expm(t, seed):
    import scipy.linalg

    from coopjumps import _kernels
    from coopjumps.trajectory import kernel_arrays

    gen = build_h_cond(ModelParams(omega2=0.0, omega3=0.5))
    args = kernel_arrays(gen)
    c = random_state(np.random.default_rng(seed))
    out = np.empty(DIM, dtype=complex)
    _kernels._expm_apply(args[4], args[5], args[6], c, t, out)
    ref = scipy.linalg.expm(-1j * gen.h * t) @ c
    assert np.max(np.abs(out - ref)) <= 1e-10
