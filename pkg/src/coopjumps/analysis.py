"""Intensity traces, fluorescence-period classification and period statistics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hilbert import SUBSPACES
from .model import ModelParams
from .oracle import replay_states, two_level_rate
from .trajectory import EmissionRecord

# Bin widths used for trace plots and for duration statistics (units 1/A3).
TRACE_DT = 190.0
STATS_DT = 250.0
THRESHOLDS = (0.5, 1.5)


class InsufficientDataError(ValueError):
    pass


class AbsentClassError(LookupError):
    """The requested fluorescence class does not occur in the sequence."""


class CorruptedRecordError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityTrace:
    dt: float
    counts: np.ndarray

    @property
    def intensity(self) -> np.ndarray:
        """Photons per unit time 1/A3 in each bin."""
        return self.counts / self.dt

    @property
    def times(self) -> np.ndarray:
        """Bin start times."""
        return self.dt * np.arange(self.counts.size)

    @property
    def span(self) -> float:
        return self.dt * self.counts.size

    def __len__(self) -> int:
        return int(self.counts.size)


def bin_intensity(record_or_times, dt: float, duration: float | None = None) -> IntensityTrace:
    """Photon counts in consecutive bins of width ``dt``; a trailing partial bin is dropped."""
    if not dt > 0:
        raise ValueError("bin width must be positive")
    if isinstance(record_or_times, EmissionRecord):
        times = record_or_times.times
        duration = record_or_times.duration if duration is None else duration
    else:
        times = np.asarray(record_or_times, dtype=float)
        if duration is None:
            raise ValueError("duration required for raw emission times")
    n_bins = int(math.floor(duration / dt + 1e-12))
    if n_bins < 1:
        raise ValueError(f"duration {duration} shorter than one bin of {dt}")
    idx = np.floor(times / dt).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_bins)]
    counts = np.bincount(idx, minlength=n_bins)
    return IntensityTrace(float(dt), counts)


def reference_intensity(params: ModelParams) -> float:
    """Steady emission rate of one resonantly driven two-level atom (levels 1, 3)."""
    return two_level_rate(params)


@dataclass(frozen=True)
class PeriodSequence:
    """Contiguous fluorescence segments over the bins of a trace.

    ``starts``/``ends`` are bin indices, ``ends`` exclusive.
    """

    classes: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    i1: float
    thresholds: tuple[float, float]
    dt: float

    def __len__(self) -> int:
        return int(self.classes.size)

    @property
    def lengths(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def n_bins(self) -> int:
        return int(self.ends[-1]) if len(self) else 0

    def bin_classes(self) -> np.ndarray:
        return np.repeat(self.classes, self.lengths)

    def class_fraction(self, cls: int) -> float:
        """Fraction of covered time spent in class ``cls``."""
        if not len(self):
            return 0.0
        return float(self.lengths[self.classes == cls].sum() / self.n_bins)


def _runs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if labels.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return labels[starts].astype(np.int64), starts.astype(np.int64), ends.astype(np.int64)


def classify_bins(intensity: np.ndarray, i1: float, thresholds=THRESHOLDS) -> np.ndarray:
    lo, hi = thresholds[0] * i1, thresholds[1] * i1
    labels = np.zeros(intensity.size, dtype=np.int64)
    labels[intensity >= lo] = 1
    labels[intensity >= hi] = 2
    return labels


def classify_periods(
    trace: IntensityTrace,
    i1: float,
    min_length: int = 1,
    thresholds: tuple[float, float] = THRESHOLDS,
) -> PeriodSequence:
    """Label each bin dark (0), single (1) or double (2) intensity and merge runs.

    Segments shorter than ``min_length`` bins are absorbed by whichever
    neighbour is longer (the shortest offender first).
    """
    if not i1 > 0:
        raise ValueError("reference intensity must be positive")
    labels = classify_bins(trace.intensity, i1, thresholds)
    classes, starts, ends = _runs(labels)
    if min_length > 1:
        while classes.size > 1:
            lengths = ends - starts
            short = np.flatnonzero(lengths < min_length)
            if short.size == 0:
                break
            k = int(short[np.argmin(lengths[short])])
            left = lengths[k - 1] if k > 0 else -1
            right = lengths[k + 1] if k + 1 < classes.size else -1
            labels[starts[k]:ends[k]] = classes[k - 1] if left >= right else classes[k + 1]
            classes, starts, ends = _runs(labels)
    return PeriodSequence(classes, starts, ends, float(i1), tuple(thresholds), trace.dt)


@dataclass(frozen=True)
class DurationStats:
    """Mean durations T0, T1, T2 (units 1/A3) of interior segments."""

    means: tuple[float, float, float]
    standard_errors: tuple[float, float, float]
    counts: tuple[int, int, int]
    double_jumps: int
    dt: float

    @property
    def t0(self) -> float:
        return self.means[0]

    @property
    def t1(self) -> float:
        return self.means[1]

    @property
    def t2(self) -> float:
        return self.means[2]

    def as_row(self) -> dict:
        return {
            "T0": self.means[0], "T1": self.means[1], "T2": self.means[2],
            "se0": self.standard_errors[0], "se1": self.standard_errors[1], "se2": self.standard_errors[2],
            "n0": self.counts[0], "n1": self.counts[1], "n2": self.counts[2],
            "double_jumps": self.double_jumps,
        }


def count_double_jumps(seq: PeriodSequence) -> int:
    """Adjacent segment pairs that go straight between classes 0 and 2."""
    c = seq.classes
    if c.size < 2:
        return 0
    return int(np.sum(np.abs(np.diff(c)) == 2))


def duration_stats(seqs: PeriodSequence | Sequence[PeriodSequence], dt: float | None = None) -> DurationStats:
    """Pool the interior segments of one or more sequences into T0, T1, T2.

    The first and last segment of every sequence are cut by the observation
    window and are discarded.
    """
    if isinstance(seqs, PeriodSequence):
        seqs = [seqs]
    if not seqs:
        raise InsufficientDataError("no period sequences")
    dt = seqs[0].dt if dt is None else dt
    pooled: dict[int, list[np.ndarray]] = {0: [], 1: [], 2: []}
    jumps = 0
    usable = 0
    for seq in seqs:
        jumps += count_double_jumps(seq)
        if len(seq) < 3:
            continue
        usable += 1
        inner = slice(1, len(seq) - 1)
        lengths = seq.lengths[inner] * dt
        classes = seq.classes[inner]
        for k in (0, 1, 2):
            pooled[k].append(lengths[classes == k])
    if usable == 0:
        raise InsufficientDataError("need at least 3 segments to get interior periods")
    means, ses, counts = [], [], []
    for k in (0, 1, 2):
        d = np.concatenate(pooled[k]) if pooled[k] else np.zeros(0)
        counts.append(int(d.size))
        means.append(float(d.mean()) if d.size else math.nan)
        ses.append(float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.nan)
    finite = [m for m in means if math.isfinite(m)]
    if finite and min(finite) < 10 * dt:
        warnings.warn(
            f"mean period duration {min(finite):.0f} is below 10 bin widths ({10 * dt:.0f}); "
            "short periods may be washed out",
            stacklevel=2,
        )
    return DurationStats(tuple(means), tuple(ses), tuple(counts), jumps, float(dt))


def period2_intensity(seq: PeriodSequence, trace: IntensityTrace) -> float:
    """Mean intensity over all class-2 bins."""
    mask = seq.bin_classes() == 2
    if not mask.any():
        raise AbsentClassError("no double-intensity periods")
    return float(trace.counts[: mask.size][mask].sum() / (mask.sum() * trace.dt))


@dataclass(frozen=True)
class SubspaceTrace:
    times: np.ndarray
    populations: np.ndarray  # shape (n, 3)


def subspace_trace(record: EmissionRecord, grid_dt: float, params: ModelParams | None = None,
                   *, survival_tol: float = 1e-6) -> SubspaceTrace:
    """Replay a record and report the subspace populations on a regular grid."""
    if not grid_dt > 0:
        raise ValueError("grid spacing must be positive")
    if params is not None and params != record.params:
        raise ValueError("record was generated with different parameters")
    grid = np.arange(0.0, record.duration, grid_dt)
    states, surv, bad = replay_states(record, grid)
    if bad >= 0:
        raise CorruptedRecordError(f"event {bad}: recorded channel annihilates the replayed state")
    if record.survival is not None and record.survival.size == surv.size and surv.size:
        mismatch = np.max(np.abs(surv - record.survival))
        if mismatch > survival_tol:
            raise CorruptedRecordError(f"replayed no-photon probabilities differ by {mismatch:.2e}")
    probs = np.abs(states) ** 2
    pops = np.stack([probs[:, list(SUBSPACES[k])].sum(axis=1) for k in (0, 1, 2)], axis=1)
    pops /= pops.sum(axis=1, keepdims=True)
    return SubspaceTrace(grid, pops)


def segment_subspace_agreement(seq: PeriodSequence, sub: SubspaceTrace, trim_bins: int = 1) -> dict[int, float]:
    """Time-averaged population of subspace k over class-k segments.

    ``trim_bins`` bins are dropped at both ends of every segment.
    """
    dt = seq.dt
    totals = {0: 0.0, 1: 0.0, 2: 0.0}
    weights = {0: 0, 1: 0, 2: 0}
    for cls, start, end in zip(seq.classes, seq.starts, seq.ends):
        lo, hi = (start + trim_bins) * dt, (end - trim_bins) * dt
        if hi <= lo:
            continue
        mask = (sub.times >= lo) & (sub.times < hi)
        totals[int(cls)] += float(sub.populations[mask, int(cls)].sum())
        weights[int(cls)] += int(mask.sum())
    return {k: (totals[k] / weights[k] if weights[k] else math.nan) for k in (0, 1, 2)}


def level_histogram(trace: IntensityTrace, i1: float, width: float = 0.1, top: float = 3.0):
    """Histogram of bin intensities in units of I1; returns (edges, density)."""
    edges = np.arange(0.0, top + width / 2, width)
    hist, edges = np.histogram(trace.intensity / i1, bins=edges, density=True)
    return edges, hist


def trimodality(trace: IntensityTrace, i1: float, thresholds=THRESHOLDS, window: float = 0.25) -> dict:
    """Peak heights near 0, I1, 2 I1 and valley heights at the thresholds.

    Heights are fractions of bins whose intensity / I1 lies within
    ``window`` of each location.
    """
    x = trace.intensity / i1
    n = max(x.size, 1)

    def mass(centre):
        return float(np.sum(np.abs(x - centre) <= window) / n)

    return {
        "peaks": [mass(0.0), mass(1.0), mass(2.0)],
        "valleys": [mass(thresholds[0]), mass(thresholds[1])],
    }


# --- CSV output ------------------------------------------------------------

def write_intensity_csv(trace: IntensityTrace, seq: PeriodSequence | None, path: str | Path) -> Path:
    path = Path(path)
    classes = seq.bin_classes() if seq is not None else np.full(len(trace), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "intensity", "class"])
        for t, i, c in zip(trace.times, trace.intensity, classes):
            w.writerow([repr(float(t)), repr(float(i)), int(c)])
    return path


DURATION_COLUMNS = ["kr", "T0", "T1", "T2", "se0", "se1", "se2", "n0", "n1", "n2", "double_jumps"]


def write_duration_csv(rows: Iterable[tuple[float, DurationStats]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DURATION_COLUMNS)
        for kr, st in rows:
            row = st.as_row()
            w.writerow([repr(float(kr))] + [row[c] for c in DURATION_COLUMNS[1:]])
    return path


def write_subspace_csv(sub: SubspaceTrace, seq: PeriodSequence | None, path: str | Path) -> Path:
    path = Path(path)
    if seq is not None:
        bins = np.minimum((sub.times // seq.dt).astype(np.int64), max(seq.n_bins - 1, 0))
        classes = seq.bin_classes()[bins] if seq.n_bins else np.full(sub.times.size, -1)
        classes = np.where(sub.times < seq.n_bins * seq.dt, classes, -1)
    else:
        classes = np.full(sub.times.size, -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p0", "p1", "p2", "class"])
        for t, p, c in zip(sub.times, sub.populations, classes):
            w.writerow([repr(float(t)), repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(c)])
    return path
