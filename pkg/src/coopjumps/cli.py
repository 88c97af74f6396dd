"""Command-line entry point: ``coopjumps <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .experiments import (
    CalibrationError,
    ExperimentConfig,
    calibrate_omega2,
    load_config,
    run_sweep,
    simulate,
    validate,
)
from .model import coupling_curve, write_coupling_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("coopjumps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--kr", type=float, help="k31 r for single-point modes")
    p.add_argument("--kr-start", type=float)
    p.add_argument("--kr-stop", type=float)
    p.add_argument("--kr-step", type=float)
    p.add_argument("--omega2", type=float)
    p.add_argument("--omega3", type=float)
    p.add_argument("--theta3", type=float)
    p.add_argument("--delta-t", type=float, dest="delta_t")
    p.add_argument("--duration", type=float)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-coupling", action="store_true", help="drop the dipole-dipole coupling (independent atoms)")
    p.add_argument("--calibrate", action="store_true", help="sweep: calibrate omega2 first")
    p.add_argument("--no-resume", action="store_true", help="sweep: recompute every grid point")
    p.add_argument("--reset-sign", type=float, default=1.0, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopjumps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    helps = {
        "coupling": "Re/Im of the coupling constant over the kr grid",
        "simulate": "one long trajectory: intensity trace, periods, subspaces",
        "sweep": "mean period durations over the kr grid",
        "calibrate": "find omega2 giving the target dark-period duration",
        "validate": "trajectory ensemble against the master equation plus invariants",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _flags(p)
        if name == "calibrate":
            p.add_argument("--target-t0", type=float, dest="target_t0")
            p.add_argument("--tolerance", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig(mode=args.mode)
    data = base.to_dict()
    data["mode"] = args.mode
    params = dict(data.pop("params"))
    for key in ("seed", "out", "kr_start", "kr_stop", "kr_step", "delta_t", "duration",
                "trajectories", "workers", "target_t0", "tolerance"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    for key in ("kr", "omega2", "omega3", "theta3"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if args.no_coupling:
        params["include_c3"] = False
    if args.calibrate:
        data["calibrate"] = True
    if args.mode == "validate" and args.trajectories is None and not args.config:
        # 1e4 sits at the edge for the rarely populated metastable entries
        data["trajectories"] = 100_000
    data.update(params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ExperimentConfig.from_dict(data)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _run(config: ExperimentConfig, args) -> int:
    out = Path(config.out)
    if config.mode == "coupling":
        out.mkdir(parents=True, exist_ok=True)
        rows = coupling_curve(config.grid, config.params.theta3)
        write_coupling_csv(rows, out / "coupling.csv")
        with (out / "rec_vs_kr.dat").open("w") as fh:
            fh.write("# kr Re(C)/A\n")
            for kr, re, _ in rows:
                fh.write(f"{kr!r} {re!r}\n")
        _write_json(out / "config.json", config.to_dict())
        return EXIT_OK
    if config.mode == "simulate":
        summary = simulate(config)
        print(json.dumps(summary.get("durations"), default=_json_default))
        return EXIT_OK
    if config.mode == "calibrate":
        res = calibrate_omega2(
            config.params.omega3, config.target_t0, config.tolerance, delta_t=config.delta_t,
            duration=config.duration, trajectories=config.trajectories, seed=config.seed,
            theta3=config.params.theta3, workers=config.workers,
        )
        payload = {"omega2": res.omega2, "t0": res.t0, "se": res.se,
                   "samples": res.samples, "config": config.to_dict()}
        _write_json(out / "calibration.json", payload)
        print(f"omega2={res.omega2:.6g} T0={res.t0:.1f} +- {res.se:.1f}")
        return EXIT_OK
    if config.mode == "sweep":
        if config.calibrate:
            res = calibrate_omega2(
                config.params.omega3, config.target_t0, config.tolerance, delta_t=config.delta_t,
                duration=config.duration, trajectories=config.trajectories, seed=config.seed,
                theta3=config.params.theta3, workers=config.workers,
            )
            log.info("calibrated omega2=%.6g (T0=%.1f)", res.omega2, res.t0)
            config = ExperimentConfig.from_dict({**config.to_dict(), "calibrate": False,
                                                 "params": config.params.replace(omega2=res.omega2).to_dict()})
        result = run_sweep(config, resume=not args.no_resume)
        failed = [r for r in result.rows if r["status"] != "ok"]
        print(f"{len(result.rows)} grid points, {len(failed)} failed -> {out / 'sweep.csv'}")
        return EXIT_NUMERICAL if failed else EXIT_OK
    if config.mode == "validate":
        report = validate(config, reset_sign=args.reset_sign)
        _write_json(out / "validation.json", report)
        for name, check in report["checks"].items():
            print(f"{'PASS' if check.get('passed') else 'FAIL'} {name}")
        return EXIT_OK if report["passed"] else EXIT_VALIDATION
    raise UsageError(f"unknown mode {config.mode}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = resolve_config(args)
    except (ValueError, TypeError, OSError, UsageError) as exc:
        print(f"coopjumps: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _run(config, args)
    except (UsageError, ValueError) as exc:
        print(f"coopjumps: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"coopjumps: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
