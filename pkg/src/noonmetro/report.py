"""Plot-ready report bundle tying the pipeline outputs together."""
from __future__ import annotations

import platform

import numpy as np
import scipy

from .calibration import CalibrationCurves
from .estimation import FisherCurve
from .simulator import FringeScan

REPORT_VERSION = 1


def violation_intervals(phis, mask) -> list[list[float]]:
    """Contiguous [first, last] phase ranges where ``mask`` holds."""
    phis = np.asarray(phis, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    out = []
    start = None
    for i, hit in enumerate(mask):
        if hit and start is None:
            start = i
        if start is not None and (not hit or i == len(mask) - 1):
            stop = i if hit else i - 1
            out.append([float(phis[start]), float(phis[stop])])
            start = None
    return out


def versions() -> dict:
    from . import __version__

    return {
        "noonmetro": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def fringe_section(scan: FringeScan, curves: CalibrationCurves) -> dict:
    """Measured fractions with error bars next to the calibrated curves."""
    phis = scan.phis
    counts = scan.counts_array()
    totals = counts.sum(axis=1)
    p = counts / totals[:, None]
    err = np.sqrt(p * (1 - p) / totals[:, None])
    model = curves.probs(phis)
    return {
        "phi_rad": phis.tolist(),
        "counts": counts.astype(int).tolist(),
        "p11": p[:, 0].tolist(),
        "p20": p[:, 1].tolist(),
        "p02": p[:, 2].tolist(),
        "p11_err": err[:, 0].tolist(),
        "p20_err": err[:, 1].tolist(),
        "p02_err": err[:, 2].tolist(),
        "model_p11": model[0].tolist(),
        "model_p20": model[1].tolist(),
        "model_p02": model[2].tolist(),
    }


def fisher_section(curve: FisherCurve) -> dict:
    return {
        "phi_rad": curve.phis.tolist(),
        "fisher": curve.fisher.tolist(),
        "f_lo": curve.f_lo.tolist(),
        "f_hi": curve.f_hi.tolist(),
        "snl": curve.snl,
        "snl_adjusted": curve.snl_adjusted.tolist(),
        "violation_intervals": violation_intervals(curve.phis, curve.violation_mask()),
    }


_BATCH_KEYS = ("phi_true", "mean", "sd", "sem", "sem_ci", "bootstrap_sem", "snl_sem",
               "crb_sem", "k", "s", "k_tilde_ratio", "below_snl", "seed", "estimates_file")


def estimate_entry(batch: dict) -> dict:
    entry = {key: batch.get(key) for key in _BATCH_KEYS}
    entry["boundary_count"] = batch.get("boundary_flags", {}).get("count", 0)
    return entry


def build_report(scan: FringeScan, curves: CalibrationCurves, fisher: FisherCurve,
                 batches: list[dict], inputs: dict, config_hash: str | None = None) -> dict:
    """Assemble the bundle; ``inputs`` maps each section to its file and digest."""
    entries = sorted((estimate_entry(b) for b in batches),
                     key=lambda e: (e["phi_true"] is None, e["phi_true"] or 0.0))
    below = [e["phi_true"] for e in entries if e["below_snl"]]
    seeds = sorted({e["seed"] for e in entries if e.get("seed") is not None})
    if "seed" in scan.metadata:
        scan_seed = scan.metadata["seed"]
    else:
        scan_seed = None
    return {
        "version": REPORT_VERSION,
        "fringe": fringe_section(scan, curves),
        "calibration": curves.to_dict(),
        "fisher": fisher_section(fisher),
        "estimates": entries,
        "snl": {
            "n_batches": len(entries),
            "below_snl_phases": below,
            "phase_range_below_snl": [min(below), max(below)] if below else None,
        },
        "provenance": {
            "inputs": inputs,
            "config_hash": config_hash,
            "scan_seed": scan_seed,
            "estimate_seeds": seeds,
            "versions": versions(),
        },
    }
