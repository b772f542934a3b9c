"""Command-line front end: simulate, calibrate, fisher, estimate, report.

Exit codes: 0 success, 2 configuration or input error, 3 simulation guard
limit, 4 calibration fit failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .calibration import EMISSION_LAWS, CalibrationCurves, CalibrationError, fit_model
from .config import (
    ConfigError,
    RunConfig,
    parse_angle,
    parse_phi_spec,
    sha256_file,
    validate,
)
from .estimation import (
    FisherCurve,
    ResourceAccount,
    aggregate_samples,
    bootstrap_sem,
    fisher_curve,
    fisher_information,
    sample_estimates,
)
from .model import ModelDomainError, eta_min, worst_case_eta_min
from .report import build_report
from .simulator import FringeScan, SimulationLimitError, simulate_scan

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_FIT = 4

THREADS_ENV = "NOONMETRO_THREADS"
DEFAULT_FISHER_PHIS = "0:pi:1000"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return RunConfig.read(args.config, seed=getattr(args, "seed", None))


def _read_calibration(path) -> CalibrationCurves:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read calibration {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"calibration {path} is not valid JSON: {exc}") from None
    validate(data, "calibration")
    return CalibrationCurves.from_dict(data)


def _read_scan(path) -> FringeScan:
    try:
        return FringeScan.read_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read scan {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed scan {path}: {exc}") from None


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    phases = parse_phi_spec(args.phis) if args.phis else cfg.phases()
    events = args.events if args.events is not None else cfg.experiment["events_per_phase"]
    source = cfg.source()
    try:
        scan = simulate_scan(source, phases, int(events), workers=args.workers)
    except SimulationLimitError as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIMULATION) from None
    meta = dict(scan.metadata)
    meta["config"] = cfg.resolved
    scan = dataclasses.replace(scan, metadata=meta)
    _write(args.out, scan.to_csv())
    print(f"wrote {len(scan)} rows, {int(scan.totals().sum())} recorded events, "
          f"seed {source.seed} -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    scan = _read_scan(args.scan)
    pair_prob = None
    if args.config:
        pair_prob = float(_load_config(args).resolved["source"]["pair_prob"])
    try:
        curves = fit_model(scan, xi=args.xi, pair_prob=pair_prob,
                           emission=args.emission, weighted=args.weighted)
    except (CalibrationError, ModelDomainError) as exc:
        raise CliError(f"calibration failed: {exc}", EXIT_FIT) from None
    meta = dict(curves.meta)
    meta["inputs"] = {"scan": {"file": Path(args.scan).name, "sha256": sha256_file(args.scan)}}
    meta["options"] = {"xi": args.xi, "pair_prob": pair_prob, "emission": args.emission,
                       "weighted": args.weighted}
    curves = dataclasses.replace(curves, meta=meta)
    data = curves.to_dict()
    validate(data, "calibration")
    _write(args.out, _dump(data))
    m = curves.model
    print(f"v = {m.visibility:.5f} +- {curves.visibility_err:.5f}, "
          f"eta_t = {m.eta_t.mean:.4f}, eta_r = {m.eta_r.mean:.4f}, xi = {m.xi:.5f}, "
          f"converged = {curves.converged} -> {args.out}")
    return EXIT_OK


def cmd_fisher(args) -> int:
    curves = _read_calibration(args.calibration)
    phis = parse_phi_spec(args.phis)
    curve = fisher_curve(curves, phis, worst_case=args.worst_case)
    _write(args.out, curve.to_csv())
    mask = curve.violation_mask()
    print(f"F max = {curve.fisher.max():.4f}; {int(mask.sum())} of {len(phis)} phases "
          f"above the adjusted SNL -> {args.out}")
    return EXIT_OK


def _estimates_path(out: Path) -> Path:
    return out.with_name(out.stem + "_samples.csv")


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    exp = cfg.experiment
    curves = _read_calibration(args.calibration)
    if args.phi_true is not None:
        phi_true = parse_angle(args.phi_true)
    elif "phi_true" in exp:
        phi_true = float(exp["phi_true"])
    else:
        raise ConfigError("no true phase: pass --phi-true or set experiment.phi_true")
    lo, hi = 0.0, math.pi / 2
    if not lo <= phi_true <= hi:
        raise ConfigError(f"phi_true must lie in [0, pi/2], got {phi_true}")
    k = int(args.k if args.k is not None else exp["k"])
    s = int(args.s if args.s is not None else exp["s"])
    B = int(args.bootstrap if args.bootstrap is not None else exp["bootstrap_B"])
    if k < 1 or s < 2:
        raise ConfigError("need k >= 1 and s >= 2")
    source = cfg.source()
    try:
        ests, _ = sample_estimates(source, curves, phi_true, k, s, workers=args.workers, lo=lo, hi=hi)
    except SimulationLimitError as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIMULATION) from None

    model = curves.model
    if args.eta_min == "worst":
        em = worst_case_eta_min(model)
    else:
        em = float(eta_min(model, phi_true))
    account = ResourceAccount(k, model.xi, em)
    fisher = float(fisher_information(curves, phi_true))
    batch = aggregate_samples(ests, k=k, account=account, fisher=fisher or None,
                              phi_true=phi_true, lo=lo, hi=hi)
    boot_note = None
    if s >= 10:
        boot = bootstrap_sem(batch.estimates, B=B, seed=source.seed)
        batch = dataclasses.replace(batch, bootstrap_sem=boot.sem, sem_ci=(boot.ci_low, boot.ci_high))
    else:
        boot_note = "bootstrap skipped: fewer than 10 samples"
    out = Path(args.out)
    csv_path = _estimates_path(out)
    meta = {
        "seed": source.seed,
        "config_hash": cfg.digest,
        "config": cfg.resolved,
        "rng": source.metadata()["rng"],
        "eta_min": em,
        "eta_min_mode": args.eta_min,
        "xi": model.xi,
        "fisher": fisher,
        "bootstrap_B": B if boot_note is None else None,
        "search_range": [lo, hi],
        "inputs": {"calibration": {"file": Path(args.calibration).name,
                                   "sha256": sha256_file(args.calibration)}},
    }
    if boot_note:
        meta["note"] = boot_note
    batch = dataclasses.replace(batch, meta=meta)
    data = batch.to_dict(estimates_file=csv_path.name)
    validate(data, "phase_batch")
    _write(csv_path, batch.estimates_csv())
    _write(out, _dump(data))
    verdict = "below" if batch.below_snl else "not below"
    print(f"phi_true = {phi_true:.6f}: mean = {batch.mean:.6f}, sem = {batch.sem:.3e}, "
          f"snl_sem = {batch.snl_sem:.3e} ({verdict} SNL), "
          f"{len(batch.boundary_ids)} boundary estimates -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    missing = [name for name, value in (("fringe", args.scan), ("calibration", args.calibration),
                                        ("fisher", args.fisher), ("estimates", args.estimates))
               if not value]
    if missing:
        raise ConfigError("missing report section(s): " + ", ".join(missing))
    scan = _read_scan(args.scan)
    curves = _read_calibration(args.calibration)
    try:
        fisher = FisherCurve.read_csv(args.fisher)
    except OSError as exc:
        raise ConfigError(f"missing report section fisher: cannot read {args.fisher}: "
                          f"{exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed fisher input {args.fisher}: {exc}") from None
    batches = []
    for path in args.estimates:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"missing report section estimates: cannot read {path}: "
                              f"{exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"estimates {path} is not valid JSON: {exc}") from None
        validate(data, "phase_batch")
        batches.append(data)

    def ref(path):
        return {"file": Path(path).name, "sha256": sha256_file(path)}

    inputs = {
        "fringe": ref(args.scan),
        "calibration": ref(args.calibration),
        "fisher": ref(args.fisher),
        "estimates": [ref(p) for p in args.estimates],
    }
    config_hash = _load_config(args).digest if args.config else None
    report = build_report(scan, curves, fisher, batches, inputs, config_hash)
    validate(report, "report")
    _write(args.out, _dump(report))
    below = report["snl"]["below_snl_phases"]
    print(f"report with {len(batches)} estimate batches; {len(below)} below SNL -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noonmetro",
        description="Two-photon NOON-state phase sensing: simulate, calibrate, estimate, report.",
    )
    parser.add_argument("--version", action="version", version=f"noonmetro {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=False):
        p.add_argument("--out", required=True, help="output file")
        if config:
            p.add_argument("--config", help="run configuration JSON")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")

    def add_workers(p):
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or 1)")

    p = sub.add_parser("simulate", help="simulate a fringe scan")
    common(p, seed=True)
    p.add_argument("--phis", help="start:stop:steps or comma list; 'deg' suffix for degrees")
    p.add_argument("--events", type=int, help="recorded events per phase")
    add_workers(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit calibration curves to a scan")
    p.add_argument("scan", help="scan CSV")
    common(p)
    p.add_argument("--xi", type=float, help="fix the double-pair ratio instead of estimating it")
    p.add_argument("--emission", choices=EMISSION_LAWS, default="poisson",
                   help="pair-number law used when pair_prob is unknown")
    p.add_argument("--weighted", action="store_true", help="weight residuals by binomial errors")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fisher", help="Fisher information curve with SNL levels")
    p.add_argument("--calibration", required=True)
    common(p, config=False)
    p.add_argument("--phis", default=DEFAULT_FISHER_PHIS)
    p.add_argument("--worst-case", action="store_true",
                   help="adjusted SNL from the smallest eta_min over all phases")
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("estimate", help="repeated phase estimation at a fixed phase")
    p.add_argument("--calibration", required=True)
    common(p, seed=True)
    p.add_argument("--phi-true", help="true phase (radians, or with 'deg' suffix)")
    p.add_argument("--k", type=int, help="recorded trials per sample")
    p.add_argument("--s", type=int, help="number of samples")
    p.add_argument("--bootstrap", type=int, help="bootstrap resamples B")
    p.add_argument("--eta-min", choices=("worst", "local"), default="worst",
                   help="eta_min for the SNL benchmark")
    add_workers(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="bundle pipeline outputs into one JSON report")
    common(p)
    p.add_argument("--scan")
    p.add_argument("--calibration")
    p.add_argument("--fisher")
    p.add_argument("--estimates", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "workers", 1) is None:
            args.workers = default_workers()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ModelDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # remaining domain violations stem from user input
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
