import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from coopjumps.analysis import (
    AbsentClassError,
    CorruptedRecordError,
    InsufficientDataError,
    IntensityTrace,
    bin_intensity,
    classify_periods,
    count_double_jumps,
    duration_stats,
    level_histogram,
    period2_intensity,
    reference_intensity,
    segment_subspace_agreement,
    subspace_trace,
    trimodality,
    write_duration_csv,
    write_intensity_csv,
    write_subspace_csv,
)
from coopjumps.model import ModelParams
from coopjumps.trajectory import run_trajectory


def _trace(levels, dt=1.0):
    return IntensityTrace(dt, np.asarray(levels, dtype=float) * dt)


def _segments(seq):
    return [(int(c), int(e - s)) for c, s, e in zip(seq.classes, seq.starts, seq.ends)]


# --- binning ---------------------------------------------------------------

def test_empty_record_gives_zero_bins():
    tr = bin_intensity(np.zeros(0), 10.0, duration=100.0)
    assert len(tr) == 10 and tr.counts.sum() == 0


def test_simple_binning():
    tr = bin_intensity([0.5, 1.5, 2.5], 1.0, duration=3.0)
    assert tr.counts.tolist() == [1, 1, 1]
    assert tr.intensity.tolist() == [1.0, 1.0, 1.0]


def test_trailing_partial_bin_dropped():
    tr = bin_intensity([0.5, 1.5, 2.5, 3.1], 1.0, duration=3.5)
    assert tr.counts.tolist() == [1, 1, 1]
    assert tr.span == 3.0


@pytest.mark.parametrize("dt", [0.0, -1.0])
def test_bad_bin_width(dt):
    with pytest.raises(ValueError):
        bin_intensity([0.5], dt, duration=3.0)


def test_record_shorter_than_bin():
    with pytest.raises(ValueError):
        bin_intensity([0.5], 10.0, duration=3.0)


def test_poisson_bin_mean():
    rng = np.random.default_rng(12)
    rate, dt, duration = 0.3, 50.0, 2e6
    times = np.cumsum(rng.exponential(1 / rate, size=int(1.2 * rate * duration)))
    tr = bin_intensity(times, dt, duration=duration)
    mean = tr.counts.mean()
    assert abs(mean - rate * dt) < 3 * math.sqrt(rate * dt / len(tr))
    # counts conserved over the covered span
    assert tr.counts.sum() == np.sum(times < tr.span)


# --- reference intensity ---------------------------------------------------

def test_reference_intensity_limits():
    assert reference_intensity(ModelParams(omega2=0.0, omega3=0.0)) == 0.0
    assert reference_intensity(ModelParams(omega2=0.0, omega3=1e-4)) < 1e-7
    assert reference_intensity(ModelParams(omega2=0.0, omega3=1e3)) == pytest.approx(0.5, rel=1e-5)


def test_reference_intensity_frozen_value():
    # two-level Bloch steady state at Omega3 = A3 / 2: (1/16) / (1/8 + 1/4) = 1/6
    assert reference_intensity(ModelParams(omega2=0.01, omega3=0.5)) == pytest.approx(1 / 6, rel=1e-12)


# --- classification --------------------------------------------------------

def test_constant_dark_trace_is_one_segment():
    seq = classify_periods(_trace([0.0] * 7), 1.0)
    assert _segments(seq) == [(0, 7)]


def test_three_levels():
    seq = classify_periods(_trace([0, 0, 1, 1, 2, 2]), 1.0)
    assert _segments(seq) == [(0, 2), (1, 2), (2, 2)]
    assert count_double_jumps(seq) == 0


def test_threshold_edges():
    seq = classify_periods(_trace([0.49, 0.5, 1.49, 1.5]), 1.0)
    assert seq.bin_classes().tolist() == [0, 1, 1, 2]


def test_min_length_filter_absorbs_short_segments():
    levels = [0] * 6 + [1] + [0] * 3 + [2] * 2 + [1] * 8
    seq = classify_periods(_trace(levels), 1.0, min_length=3)
    # the 2-bin class-2 run joins the longer (merged) dark neighbour
    assert _segments(seq) == [(0, 12), (1, 8)]
    assert np.all(np.diff(seq.classes) != 0)


def test_rejects_nonpositive_i1():
    with pytest.raises(ValueError):
        classify_periods(_trace([0, 1]), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recovers_markov_switches(seed):
    rng = np.random.default_rng(seed)
    dt, i1 = 100.0, 1.0
    duration = 400 * dt
    # telegraph signal between 0 and i1; mean dwell 20 bins
    switches = [0.0]
    while switches[-1] < duration:
        switches.append(switches[-1] + max(rng.exponential(20 * dt), 3 * dt))
    # no switch in the last bins, so every true edge is observable
    switches = np.array([x for x in switches if x < duration - 3 * dt] + [duration])
    bright = np.arange(switches.size - 1) % 2 == 1
    times = []
    for k in np.flatnonzero(bright):
        a, b = switches[k], min(switches[k + 1], duration)
        n = rng.poisson(i1 * (b - a))
        times.append(rng.uniform(a, b, n))
    times = np.sort(np.concatenate(times)) if times else np.zeros(0)
    seq = classify_periods(bin_intensity(times, dt, duration), i1)
    # counts per bin ~ 100 +- 10: level gap well above 4x the noise
    true_edges = switches[1:-1] / dt
    found = seq.starts[1:]
    assert len(found) == len(true_edges)
    assert np.all(np.abs(found - true_edges) <= 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=60), st.floats(0.01, 100))
def test_classification_scale_invariant(levels, scale):
    counts = np.round(np.asarray(levels) * 40)
    # exact threshold ties may fall either way under float rescaling
    assume(np.all(np.abs(counts[:, None] / 40 - np.array([0.5, 1.5])) > 1e-9))
    base = classify_periods(IntensityTrace(40.0, counts), 1.0)
    scaled = classify_periods(IntensityTrace(40.0 * scale, counts), 1.0 / scale)
    assert np.array_equal(base.bin_classes(), scaled.bin_classes())


# --- duration statistics ---------------------------------------------------

def test_alternating_segments():
    levels = ([0] * 10 + [1] * 10) * 5
    st_ = duration_stats(classify_periods(_trace(levels), 1.0), dt=1.0)
    assert st_.t0 == 10 and st_.t1 == 10
    assert st_.counts[2] == 0 and math.isnan(st_.t2)
    assert st_.double_jumps == 0


def test_edges_discarded_and_errors():
    levels = [0] * 3 + [1] * 10 + [0] * 10 + [2] * 10 + [0] * 4
    st_ = duration_stats(classify_periods(_trace(levels), 1.0), dt=1.0)
    assert st_.counts == (1, 1, 1)
    assert st_.double_jumps == 2
    seq2 = classify_periods(_trace([0] * 5 + [1] * 5), 1.0)
    with pytest.raises(InsufficientDataError):
        duration_stats(seq2)
    with pytest.raises(InsufficientDataError):
        duration_stats([])


def test_standard_error_and_totals():
    rng = np.random.default_rng(4)
    lengths = rng.integers(2, 30, size=41)
    levels = np.concatenate([[k % 2] * n for k, n in enumerate(lengths)])
    seq = classify_periods(_trace(levels), 1.0)
    st_ = duration_stats(seq, dt=1.0)
    inner = lengths[1:-1]
    dark = inner[np.arange(1, 40) % 2 == 0]
    assert st_.t0 == pytest.approx(dark.mean())
    assert st_.standard_errors[0] == pytest.approx(dark.std(ddof=1) / math.sqrt(dark.size))
    covered = sum(m * n for m, n in zip(st_.means[:2], st_.counts[:2]))
    assert covered + lengths[0] + lengths[-1] == pytest.approx(seq.n_bins)


def test_short_period_warning():
    levels = ([0] * 3 + [1] * 3) * 5
    with pytest.warns(UserWarning, match="washed out"):
        duration_stats(classify_periods(_trace(levels), 1.0), dt=1.0)


def test_pooling_multiple_sequences():
    a = classify_periods(_trace([1] * 2 + [0] * 10 + [1] * 2), 1.0)
    b = classify_periods(_trace([1] * 2 + [0] * 20 + [1] * 2), 1.0)
    assert duration_stats([a, b], dt=1.0).t0 == 15


# --- period-2 intensity ----------------------------------------------------

def test_period2_intensity_exact_level():
    tr = _trace([0, 0, 2, 2, 2, 1], dt=50.0)
    seq = classify_periods(tr, 1.0)
    assert period2_intensity(seq, tr) == pytest.approx(2.0)


def test_period2_absent():
    tr = _trace([0, 1, 1, 0])
    with pytest.raises(AbsentClassError):
        period2_intensity(classify_periods(tr, 1.0), tr)


# --- level histogram -------------------------------------------------------

def test_trimodality_of_clean_levels():
    tr = _trace([0] * 30 + [1] * 30 + [2] * 30)
    res = trimodality(tr, 1.0)
    assert res["peaks"] == pytest.approx([1 / 3] * 3)
    assert res["valleys"] == [0.0, 0.0]
    edges, dens = level_histogram(tr, 1.0)
    assert np.sum(dens * np.diff(edges)) == pytest.approx(1.0)


# --- subspace replay -------------------------------------------------------

def test_dark_record_stays_in_subspace_zero():
    params = ModelParams(omega2=0.0, omega3=0.5, kr=5.0)
    rec = run_trajectory(params, "e2", duration=500.0, seed=0)
    assert len(rec) == 0
    sub = subspace_trace(rec, 10.0)
    assert np.allclose(sub.populations[:, 0], 1.0)


def test_populations_complete_and_match_params():
    params = ModelParams(omega2=0.05, omega3=0.5, kr=5.0)
    rec = run_trajectory(params, "g", duration=3000.0, seed=2)
    sub = subspace_trace(rec, 7.0, params)
    assert np.max(np.abs(sub.populations.sum(axis=1) - 1)) < 1e-10
    with pytest.raises(ValueError):
        subspace_trace(rec, 7.0, params.replace(kr=6.0))
    with pytest.raises(ValueError):
        subspace_trace(rec, 0.0)


def test_corrupted_record_detected():
    params = ModelParams(omega2=0.05, omega3=0.5, kr=5.0)
    rec = run_trajectory(params, "g", duration=500.0, seed=2)
    assert len(rec) > 10
    times = rec.times.copy()
    times[5] += 0.3
    bad = dataclasses.replace(rec, times=times)
    with pytest.raises(CorruptedRecordError):
        subspace_trace(bad, 5.0)


def test_segment_agreement_on_synthetic_data():
    from coopjumps.analysis import SubspaceTrace

    seq = classify_periods(_trace([0] * 4 + [2] * 4), 1.0)
    times = np.arange(0.0, 8.0, 0.5)
    pops = np.zeros((times.size, 3))
    pops[times < 4, 0] = 1.0
    pops[times >= 4, 2] = 1.0
    pops[(times >= 3.5) & (times < 4.5)] = [0.0, 1.0, 0.0]
    agree = segment_subspace_agreement(seq, SubspaceTrace(times, pops), trim_bins=1)
    assert agree[0] == 1.0 and agree[2] == 1.0 and math.isnan(agree[1])


# --- CSV -------------------------------------------------------------------

def test_csv_outputs(tmp_path):
    tr = _trace([0, 1, 2, 2], dt=2.0)
    seq = classify_periods(tr, 1.0)
    lines = write_intensity_csv(tr, seq, tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "t,intensity,class" and lines[3] == "4.0,2.0,2"
    st_ = duration_stats(classify_periods(_trace([0] * 10 + [1] * 10 + [0] * 10), 1.0), dt=1.0)
    lines = write_duration_csv([(2.0, st_)], tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "kr,T0,T1,T2,se0,se1,se2,n0,n1,n2,double_jumps"
    assert lines[1].split(",")[2] == "10.0"
    from coopjumps.analysis import SubspaceTrace

    sub = SubspaceTrace(np.array([0.0, 3.0]), np.array([[1.0, 0, 0], [0, 0, 1.0]]))
    lines = write_subspace_csv(sub, seq, tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,p0,p1,p2,class"
    assert lines[1].endswith(",0") and lines[2].endswith(",1")
