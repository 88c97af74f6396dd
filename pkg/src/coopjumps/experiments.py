"""Batch experiments: Omega2 calibration, distance sweeps and validation runs."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    STATS_DT,
    AbsentClassError,
    DurationStats,
    InsufficientDataError,
    PeriodSequence,
    bin_intensity,
    classify_periods,
    duration_stats,
    reference_intensity,
)
from .dynamics import build_h_cond, dark_timescale, single_atom_h_cond
from .hilbert import DIM, embed, operator_to_dicke
from .model import ModelParams, coupling_constant, coupling_curve, kr_grid, write_coupling_csv
from .oracle import Liouvillian, ensemble_check
from .trajectory import (
    ResetChannels,
    emission_rate,
    reset_density,
    reset_density_channels,
    run_ensemble,
    run_trajectory,
)

log = logging.getLogger(__name__)

MODES = ("coupling", "simulate", "sweep", "calibrate", "validate")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one batch run."""

    mode: str = "sweep"
    params: ModelParams = field(default_factory=ModelParams)
    kr_start: float = 2.0
    kr_stop: float = 31.4
    kr_step: float = 0.25
    duration: float = 2e7
    trajectories: int = 10
    delta_t: float = STATS_DT
    min_length: int = 1
    seed: int = 0
    out: str = "out"
    workers: int = 1
    target_t0: float = 2000.0
    tolerance: float = 0.05
    calibrate: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kr_step <= 0:
            raise ValueError("kr grid step must be positive")
        if self.mode == "sweep" and self.duration < 100 * self.delta_t:
            warnings.warn("sweep duration is shorter than 100 averaging windows", stacklevel=2)

    @property
    def grid(self) -> np.ndarray:
        return kr_grid(self.kr_start, self.kr_stop, self.kr_step)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = self.params.to_dict()
        return d

    def identity(self) -> dict:
        """Entries that determine the sweep rows (output location excluded)."""
        d = self.to_dict()
        for key in ("out", "workers", "mode"):
            d.pop(key)
        d["version"] = __version__
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        params = data.pop("params", {})
        names = {f.name for f in dataclasses.fields(cls)}
        param_names = {f.name for f in dataclasses.fields(ModelParams)}
        flat_params = {k: data.pop(k) for k in list(data) if k in param_names}
        params = ModelParams.from_dict({**params, **flat_params}) if not isinstance(params, ModelParams) else params
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data and f.name != "params":
                kwargs[f.name] = _coerce(data[f.name], f.type)
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(params=params, **kwargs)


def _coerce(value, kind):
    if not isinstance(value, str):
        return value
    kind = str(kind)
    if "bool" in kind:
        return value.strip().lower() in {"1", "true", "yes", "on"}
    if "int" in kind:
        return int(float(value))
    if "float" in kind:
        return float(value)
    return value.strip()


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a ``key = value`` file (``#`` comments); keys as in :class:`ExperimentConfig`
    plus the :class:`ModelParams` fields."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[experiment]\n" + Path(path).read_text())
    return ExperimentConfig.from_dict(dict(parser["experiment"]))


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _kr_key(kr: float) -> int:
    return int(round(kr * 1_000_000))


# --- single parameter point --------------------------------------------------

@dataclass
class PointResult:
    params: ModelParams
    stats: DurationStats
    p2_intensity: float
    class_fractions: tuple[float, float, float]
    i1: float
    n_emissions: int


def _classify_one(args) -> tuple[PeriodSequence, int, int, int]:
    params, length, seed, index, dt, i1, min_length = args
    rec = run_trajectory(params, "g", length, seed, index)
    trace = bin_intensity(rec, dt)
    seq = classify_periods(trace, i1, min_length=min_length)
    mask = seq.bin_classes() == 2
    return seq, int(trace.counts[mask].sum()), int(mask.sum()), len(rec)


def measure_point(
    params: ModelParams,
    duration: float,
    trajectories: int,
    delta_t: float,
    seed: int,
    *,
    min_length: int = 1,
    workers: int = 1,
) -> PointResult:
    """Simulate ``trajectories`` records totalling ``duration`` and pool their periods."""
    i1 = reference_intensity(params)
    length = duration / trajectories
    jobs = [(params, length, seed, i, delta_t, i1, min_length) for i in range(trajectories)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_classify_one, jobs))
    else:
        results = [_classify_one(job) for job in jobs]
    seqs = [r[0] for r in results]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = duration_stats(seqs, delta_t)
    counts2 = sum(r[1] for r in results)
    bins2 = sum(r[2] for r in results)
    p2 = counts2 / (bins2 * delta_t) if bins2 else math.nan
    total_bins = sum(s.n_bins for s in seqs)
    fractions = tuple(
        float(sum(s.lengths[s.classes == k].sum() for s in seqs) / total_bins) for k in (0, 1, 2)
    )
    return PointResult(params, stats, p2, fractions, i1, sum(r[3] for r in results))


# --- calibration -------------------------------------------------------------

@dataclass
class CalibrationResult:
    omega2: float
    t0: float
    se: float
    samples: list[tuple[float, float, float]]


class CalibrationError(RuntimeError):
    pass


def _predicted_t0(omega2: float, omega3: float) -> float:
    # two independent atoms: the pair is dark while both are, i.e. half the single-atom time
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return 0.5 * dark_timescale(ModelParams(omega2=omega2, omega3=omega3, kr=10.0, include_c3=False))


def calibrate_omega2(
    omega3: float,
    target_t0: float = 2000.0,
    tolerance: float = 0.05,
    *,
    delta_t: float = STATS_DT,
    duration: float = 2e7,
    trajectories: int = 10,
    seed: int = 0,
    theta3: float = math.pi / 2,
    bracket: tuple[float, float] = (1e-4, 1e-1),
    min_length: int = 1,
    workers: int = 1,
    max_iter: int = 30,
) -> CalibrationResult:
    """Find omega2 giving mean dark-period duration ``target_t0`` for independent atoms.

    Log-scale bisection on measured T0. All measurements share one seed, so
    the sampled T0(omega2) curve is smooth. The outer bracket is checked with
    the single-atom dark timescale instead of by simulation (T0 at
    omega2 = 1e-4 is of order 1e7).
    """
    lo_lim, hi_lim = bracket
    pred_lo, pred_hi = _predicted_t0(lo_lim, omega3), _predicted_t0(hi_lim, omega3)
    if not pred_hi < target_t0 < pred_lo:
        raise CalibrationError(
            f"target T0={target_t0} outside bracket: T0({lo_lim})~{pred_lo:.3g}, T0({hi_lim})~{pred_hi:.3g}"
        )
    samples: list[tuple[float, float, float]] = []

    def measure(omega2: float) -> tuple[float, float]:
        params = ModelParams(omega2=omega2, omega3=omega3, kr=10.0, theta3=theta3, include_c3=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = measure_point(params, duration, trajectories, delta_t, seed,
                                min_length=min_length, workers=workers)
        samples.append((omega2, res.stats.t0, res.stats.standard_errors[0]))
        log.info("calibrate omega2=%.6g T0=%.1f +- %.1f", omega2, res.stats.t0, res.stats.standard_errors[0])
        return res.stats.t0, res.stats.standard_errors[0]

    # start from the dark-timescale estimate; widen until the measured values bracket the target
    guess = math.exp(0.5 * (math.log(lo_lim) + math.log(hi_lim)))
    a, b = lo_lim, hi_lim
    for _ in range(60):
        if _predicted_t0(guess, omega3) > target_t0:
            a = guess
        else:
            b = guess
        guess = math.sqrt(a * b)
    lo, hi = max(lo_lim, guess / 1.5), min(hi_lim, guess * 1.5)
    t_lo, _ = measure(lo)
    t_hi, _ = measure(hi)
    while t_lo < target_t0 and lo > lo_lim:
        hi, t_hi = lo, t_lo
        lo = max(lo_lim, lo / 2)
        t_lo, _ = measure(lo)
    while t_hi > target_t0 and hi < hi_lim:
        lo, t_lo = hi, t_hi
        hi = min(hi_lim, hi * 2)
        t_hi, _ = measure(hi)
    if not t_hi <= target_t0 <= t_lo:
        raise CalibrationError(
            f"target T0={target_t0} not bracketed: T0({lo:.3g})={t_lo:.4g}, T0({hi:.3g})={t_hi:.4g}"
        )
    best = min(samples, key=lambda s: abs(s[1] - target_t0))
    for _ in range(max_iter):
        if abs(best[1] - target_t0) <= tolerance * target_t0:
            break
        mid = math.sqrt(lo * hi)
        t_mid, _ = measure(mid)
        if t_mid > target_t0:
            lo = mid
        else:
            hi = mid
        best = min(samples, key=lambda s: abs(s[1] - target_t0))
        if hi / lo < 1.0005:
            break
    if abs(best[1] - target_t0) > tolerance * target_t0:
        raise CalibrationError(f"bisection stalled at T0={best[1]:.4g} (omega2={best[0]:.6g})")
    return CalibrationResult(best[0], best[1], best[2], samples)


# --- sweeps ------------------------------------------------------------------

SWEEP_COLUMNS = [
    "kr", "re_c_over_a", "im_c_over_a", "omega2",
    "T0", "T1", "T2", "se0", "se1", "se2", "n0", "n1", "n2", "double_jumps",
    "p2_intensity_over_i1", "f0", "f1", "f2", "status",
]


@dataclass
class SweepResult:
    config: ExperimentConfig
    rows: list[dict]

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])

    @property
    def ok_rows(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _sweep_point(args) -> dict:
    params, duration, trajectories, delta_t, seed, min_length = args
    c = coupling_constant(params.kr, params.theta3, 1.0)
    row = {"kr": params.kr, "re_c_over_a": c.real, "im_c_over_a": c.imag, "omega2": params.omega2}
    try:
        res = measure_point(params, duration, trajectories, delta_t, seed, min_length=min_length)
    except (InsufficientDataError, RuntimeError, ValueError) as exc:
        row.update({k: math.nan for k in SWEEP_COLUMNS if k not in row})
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace(",", ";")
        return row
    st = res.stats
    row.update(st.as_row())
    row["p2_intensity_over_i1"] = res.p2_intensity / res.i1 if res.i1 > 0 else math.nan
    row["f0"], row["f1"], row["f2"] = res.class_fractions
    row["status"] = "ok"
    return row


def _header_lines(config: ExperimentConfig) -> list[str]:
    return [f"# config={json.dumps(config.identity(), sort_keys=True)}"]


def read_sweep_csv(path: str | Path) -> tuple[dict | None, list[dict]]:
    path = Path(path)
    config = None
    lines = path.read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("# config="):
            config = json.loads(line[len("# config="):])
        elif not line.startswith("#"):
            body.append(line)
    rows = []
    for rec in csv.DictReader(body):
        row = {}
        for key, value in rec.items():
            if key == "status":
                row[key] = value
            elif key in ("n0", "n1", "n2", "double_jumps"):
                row[key] = int(float(value)) if value not in ("nan", "") else 0
            else:
                row[key] = float(value)
        rows.append(row)
    return config, rows


def run_sweep(config: ExperimentConfig, *, resume: bool = True, out_dir: str | Path | None = None) -> SweepResult:
    """Run every grid point, writing ``sweep.csv`` row by row in grid order.

    With ``resume`` an existing file written for the same configuration is
    reused: finished rows are kept and only the missing points are simulated.
    """
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    done: dict[int, dict] = {}
    if resume and path.exists():
        old_config, old_rows = read_sweep_csv(path)
        if old_config != json.loads(json.dumps(config.identity(), sort_keys=True)):
            raise ValueError(f"{path} was written with a different configuration; remove it or use another --out")
        done = {_kr_key(r["kr"]): r for r in old_rows if r["status"] == "ok"}
    params0 = config.params
    grid = config.grid
    jobs = []
    for kr in grid:
        if _kr_key(kr) in done:
            continue
        params = params0.replace(kr=float(kr))
        jobs.append((params, config.duration, config.trajectories, config.delta_t,
                     derive_seed(config.seed, _kr_key(kr)), config.min_length))
    results = iter([])
    pool = None
    if config.workers > 1 and jobs:
        pool = ProcessPoolExecutor(max_workers=config.workers)
        results = pool.map(_sweep_point, jobs)
    else:
        results = map(_sweep_point, jobs)
    rows = []
    try:
        with path.open("w", newline="") as fh:
            for line in _header_lines(config):
                fh.write(line + "\n")
            fh.write(",".join(SWEEP_COLUMNS) + "\n")
            fh.flush()
            for kr in grid:
                row = done.get(_kr_key(kr))
                if row is None:
                    row = next(results)
                    log.info("kr=%.3f T0=%.0f T1=%.0f T2=%.0f %s", row["kr"], row["T0"], row["T1"], row["T2"], row["status"])
                rows.append(row)
                fh.write(",".join(_fmt(row[c]) for c in SWEEP_COLUMNS) + "\n")
                fh.flush()
    finally:
        if pool is not None:
            pool.shutdown()
    result = SweepResult(config, rows)
    write_sweep_products(result, out)
    return result


def write_sweep_products(result: SweepResult, out: Path) -> None:
    """Duration table, coupling curve and two-column gnuplot files next to sweep.csv."""
    rows = result.rows
    with (out / "durations.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kr", "T0", "T1", "T2", "se0", "se1", "se2", "n0", "n1", "n2", "double_jumps"])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ("kr", "T0", "T1", "T2", "se0", "se1", "se2", "n0", "n1", "n2", "double_jumps")])
    krs = [r["kr"] for r in rows]
    if krs:
        write_coupling_csv(coupling_curve(krs, result.config.params.theta3), out / "coupling.csv")
    for name, col in (("t0", "T0"), ("t1", "T1"), ("t2", "T2"), ("rec3", "re_c_over_a")):
        with (out / f"{name}_vs_kr.dat").open("w") as fh:
            fh.write(f"# kr {col}\n")
            for r in rows:
                fh.write(f"{r['kr']!r} {r[col]!r}\n")


# --- validation ----------------------------------------------------------------

def _random_density(rng: np.random.Generator, n: int = DIM) -> np.ndarray:
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def _random_state(rng: np.random.Generator, n: int = DIM) -> np.ndarray:
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    return v / np.linalg.norm(v)


def independent_atoms_h(params: ModelParams) -> np.ndarray:
    """Dicke-basis tensor sum of two single-atom conditional Hamiltonians."""
    h1 = single_atom_h_cond(params)
    return operator_to_dicke(embed(h1, 1) + embed(h1, 2))


def validate(config: ExperimentConfig, *, reset_sign: float = 1.0, times=(5.0, 10.0, 20.0, 35.0, 50.0)) -> dict:
    """Oracle comparison plus the invariant suite; ``report['passed']`` is the verdict.

    ``reset_sign=-1`` corrupts the R- channel of the simulated trajectories
    (mutation check of the validation itself).
    """
    if config.trajectories < 1000:
        raise ValueError("validation needs at least 1000 trajectories")
    params = config.params
    rng = np.random.default_rng(derive_seed(config.seed, 7))
    checks: dict[str, dict] = {}

    gen = build_h_cond(params)
    ch = ResetChannels.from_params(params)
    lv = Liouvillian.from_params(params)

    dev = max(np.max(np.abs(reset_density(params, r) - reset_density_channels(ch, r)))
              for r in (_random_density(rng) for _ in range(100)))
    checks["reset_forms_agree"] = {"max_deviation": float(dev), "passed": bool(dev <= 1e-12)}

    tr = 0.0
    for _ in range(100):
        a = rng.normal(size=(DIM, DIM)) + 1j * rng.normal(size=(DIM, DIM))
        tr = max(tr, abs(np.trace(lv.apply(a + a.conj().T))))
    checks["trace_preservation"] = {"max_abs_trace": float(tr), "passed": bool(tr <= 1e-10)}

    worst = 0.0
    emission = ch.emission_operator()
    for _ in range(100):
        psi = _random_state(rng)
        worst = max(worst, abs(emission_rate(params, psi) - float(np.vdot(psi, emission @ psi).real)))
    checks["emission_rate_consistency"] = {"max_deviation": float(worst), "passed": bool(worst <= 1e-9)}

    free = params.replace(include_c3=False)
    fact = float(np.max(np.abs(build_h_cond(free).h - independent_atoms_h(free))))
    checks["independent_atom_factorization"] = {"max_deviation": fact, "passed": bool(fact <= 1e-12)}

    grid_t = np.linspace(0.0, 100.0, 201)
    increases = 0
    from .dynamics import no_photon_probability

    for _ in range(200):
        p0 = no_photon_probability(gen, _random_state(rng), grid_t)
        increases += int(np.any(np.diff(p0) > 1e-13))
    checks["norm_monotonicity"] = {"violations": increases, "passed": increases == 0}

    records = run_ensemble(params, "g", float(max(times)), config.trajectories, config.seed,
                           workers=config.workers, reset_sign=reset_sign)
    replay_channels = None
    if reset_sign != 1.0:
        from .hilbert import build_sigma_minus

        s13, s23 = build_sigma_minus(1, 3), build_sigma_minus(2, 3)
        replay_channels = ResetChannels(ch.r_plus, (s13 - reset_sign * s23) / math.sqrt(2.0), ch.w_plus, ch.w_minus)
    try:
        ens = ensemble_check(records, times=times, channels=replay_channels)
    except ValueError as exc:
        ens = {"passed": False, "error": str(exc)}
    checks["ensemble_vs_master_equation"] = ens

    passed = all(c.get("passed") is True for c in checks.values())
    return {"params": params.to_dict(), "seed": config.seed, "version": __version__,
            "checks": checks, "passed": passed}


def simulate(config: ExperimentConfig) -> dict:
    """One long trajectory with its intensity trace and period statistics."""
    from .analysis import (
        TRACE_DT,
        period2_intensity,
        subspace_trace,
        write_intensity_csv,
        write_subspace_csv,
    )

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    params = config.params
    rec = run_trajectory(params, "g", config.duration, config.seed)
    rec.save_npz(out / "record.npz")
    i1 = reference_intensity(params)
    dt = config.delta_t if config.delta_t else TRACE_DT
    trace = bin_intensity(rec, dt)
    seq = classify_periods(trace, i1, min_length=config.min_length)
    write_intensity_csv(trace, seq, out / "intensity.csv")
    summary = {"config": config.identity(), "n_emissions": len(rec), "i1": i1}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            summary["durations"] = duration_stats(seq).as_row()
    except InsufficientDataError as exc:
        summary["durations"] = str(exc)
    try:
        summary["p2_intensity_over_i1"] = period2_intensity(seq, trace) / i1
    except AbsentClassError:
        summary["p2_intensity_over_i1"] = None
    if config.duration <= 2e6:
        sub = subspace_trace(rec, dt / 4)
        write_subspace_csv(sub, seq, out / "subspaces.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
