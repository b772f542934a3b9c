"""Fisher information, resource accounting and repeated phase estimation."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize

from . import rng as rngmod
from .calibration import CalibrationCurves
from .model import (
    InterferometerModel,
    eta_min as model_eta_min,
    linear_coefficients,
    recorded_probs,
    worst_case_eta_min,
)
from .simulator import EventCounts, SourceConfig, simulate_trials

N_PHOTONS = 2
FD_STEP = 1e-5
ZERO_PROB = 1e-12
Z95 = 1.959963984540054
FISHER_HEADER = ["phi_rad", "fisher", "f_lo", "f_hi", "snl", "snl_adjusted"]
SCHEMA_VERSION = 1


def _as_model(curves) -> InterferometerModel:
    return curves.model if isinstance(curves, CalibrationCurves) else curves


def _probs(model, phi):
    return recorded_probs(model, phi, multipair=True).normalized()


def probs_and_derivative(model: InterferometerModel, phi):
    """Closed-form p_i(phi) and dp_i/dphi for constant transmissions.

    The single-pair probabilities are linear in cos(2 phi); the double-pair
    admixture and the renormalisation are differentiated by the chain rule.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    a, b = linear_coefficients(model)
    c = np.cos(2 * phi)
    dc = -2.0 * np.sin(2 * phi)
    P = a[:3, None] + b[:3, None] * c
    dP = b[:3, None] * dc
    Pn = 1.0 - (a[3] + b[3] * c)
    dPn = -b[3] * dc
    xi = model.xi
    if xi > 0:
        none = Pn * Pn
        dnone = 2 * Pn * dPn
        t = (P[1] + Pn) ** 2 - none
        dt = 2 * (P[1] + Pn) * (dP[1] + dPn) - dnone
        r = (P[2] + Pn) ** 2 - none
        dr = 2 * (P[2] + Pn) * (dP[2] + dPn) - dnone
        D = np.stack([1 - none - t - r, t, r])
        dD = np.stack([-dnone - dt - dr, dt, dr])
        w = 1.0 / (1.0 + xi)
        P = w * P + (1 - w) * D
        dP = w * dP + (1 - w) * dD
    S = P.sum(axis=0)
    dS = dP.sum(axis=0)
    p = P / S
    dp = (dP * S - P * dS) / S**2
    return p, dp


def _fd_derivative(model, phi, h=FD_STEP):
    return (_probs(model, phi + h) - _probs(model, phi - h)) / (2 * h)


def fisher_information(curves, phi, method: str = "auto"):
    """Fisher information per recorded trial, sum_i (dp_i/dphi)^2 / p_i.

    ``method`` is "analytic" (constant transmissions only), "fd" (central
    differences, step 1e-5 rad) or "auto".  A term whose p_i vanishes is
    replaced by its limit 2 p_i'' (p_i has a double zero there), which is
    finite, instead of being floored.
    """
    model = _as_model(curves)
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=float))
    if method == "auto":
        method = "analytic" if model.constant_transmission else "fd"
    if method == "analytic":
        p, dp = probs_and_derivative(model, phi_arr)

        def second(x):
            h = 1e-5
            return (probs_and_derivative(model, x + h)[1] - probs_and_derivative(model, x - h)[1]) / (2 * h)
    elif method == "fd":
        p = _probs(model, phi_arr)
        dp = _fd_derivative(model, phi_arr)

        def second(x):
            h = 1e-4
            return (_probs(model, x + h) - 2 * _probs(model, x) + _probs(model, x - h)) / h**2
    else:
        raise ValueError(f"unknown method {method!r}")

    small = p < ZERO_PROB
    safe = np.where(small, 1.0, p)
    terms = np.where(small, 0.0, dp**2 / safe)
    if np.any(small):
        cols = np.flatnonzero(small.any(axis=0))
        p2 = second(phi_arr[cols])
        limit = np.clip(2.0 * p2, 0.0, None)
        sub = terms[:, cols]
        sub[small[:, cols]] = limit[small[:, cols]]
        terms[:, cols] = sub
    F = terms.sum(axis=0)
    return float(F[0]) if np.ndim(phi) == 0 else F


@dataclass(frozen=True)
class ResourceAccount:
    """Actual trials behind k recorded ones: k_tilde = k (1 + xi) / eta_min."""

    k: int
    xi: float
    eta_min: float
    photon_number: int = N_PHOTONS

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if not 0 < self.eta_min <= 1:
            raise ValueError("eta_min must lie in (0, 1]")

    @property
    def ratio(self) -> float:
        """k_tilde / k."""
        return (1.0 + self.xi) / self.eta_min

    @property
    def k_tilde(self) -> float:
        return self.k * (1.0 + self.xi) / self.eta_min

    @property
    def resources(self) -> float:
        return self.photon_number * self.k_tilde

    @property
    def f_snl(self) -> float:
        return self.photon_number * self.k_tilde / self.k

    def n_total(self, s: int) -> float:
        return total_resources(self.k_tilde, s, self.photon_number)


def snl_adjusted(k: int, xi: float, eta_min: float) -> ResourceAccount:
    return ResourceAccount(int(k), float(xi), float(eta_min))


def total_resources(k_tilde: float, s: int, photon_number: int = N_PHOTONS) -> float:
    """Classical resources N * k_tilde * s behind s samples."""
    return photon_number * k_tilde * s


def snl_sem(n_tot: float) -> float:
    """Standard deviation of the mean at the shot-noise limit."""
    if n_tot < 1:
        raise ValueError("n_tot must be at least 1")
    return 1.0 / math.sqrt(n_tot)


@dataclass(frozen=True)
class FisherCurve:
    phis: np.ndarray
    fisher: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    snl: float
    snl_adjusted: np.ndarray

    def __post_init__(self):
        if np.any(self.fisher < -1e-9) or np.any(self.fisher > N_PHOTONS**2 + 1e-6):
            raise ValueError("Fisher information outside [0, N^2]")

    def violation_mask(self) -> np.ndarray:
        return self.fisher > self.snl_adjusted

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FISHER_HEADER)
        for row in zip(self.phis, self.fisher, self.f_lo, self.f_hi, self.snl_adjusted):
            phi, f, lo, hi, adj = (repr(float(x)) for x in row)
            w.writerow([phi, f, lo, hi, repr(float(self.snl)), adj])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def read_csv(cls, path) -> "FisherCurve":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError("empty Fisher curve")
        col = {k: np.array([float(r[k]) for r in rows]) for k in FISHER_HEADER}
        return cls(col["phi_rad"], col["fisher"], col["f_lo"], col["f_hi"],
                   float(col["snl"][0]), col["snl_adjusted"])


def fisher_curve(curves, phis, worst_case: bool = False) -> FisherCurve:
    """Fisher information on a grid with a 95% band and both SNL levels.

    The band propagates calibration uncertainties to first order by
    symmetric +-1 sigma perturbation of each parameter.  The adjusted SNL
    uses eta_min at each phase, or its minimum over all phases with
    ``worst_case``.
    """
    if not isinstance(curves, CalibrationCurves):
        curves = CalibrationCurves.from_model(curves)
    model = curves.model
    phis = np.asarray(phis, dtype=float)
    F = fisher_information(curves, phis)
    var = np.zeros_like(F)
    for plus, minus in curves.perturbed():
        var += (0.5 * (fisher_information(plus, phis) - fisher_information(minus, phis))) ** 2
    half = Z95 * np.sqrt(var)
    if worst_case:
        em = np.full_like(phis, worst_case_eta_min(model))
    else:
        em = model_eta_min(model, phis)
    adj = N_PHOTONS * (1.0 + model.xi) / em
    return FisherCurve(phis, F, np.clip(F - half, 0.0, None), F + half, float(N_PHOTONS), adj)


@dataclass(frozen=True)
class PhaseEstimate:
    phi: float
    objective: float
    boundary: bool


class PhaseEstimator:
    """Least-squares match of measured fractions to the calibration curves.

    A fixed grid over the search range is scanned and the best grid point
    refined by bounded Brent search to 1e-9 rad; ties go to the smaller
    phase.
    """

    def __init__(self, curves, lo: float = 0.0, hi: float = math.pi / 2,
                 grid_points: int = 2000, xtol: float = 1e-9):
        self.model = _as_model(curves)
        self.lo, self.hi, self.xtol = float(lo), float(hi), xtol
        self.grid = np.linspace(self.lo, self.hi, grid_points)
        self.grid_probs = _probs(self.model, self.grid)

    def objective(self, phi, measured) -> float:
        return float(np.sum((measured - _probs(self.model, phi)) ** 2))

    def __call__(self, counts) -> PhaseEstimate:
        measured = _measured_fractions(counts)
        obj = np.sum((self.grid_probs - measured[:, None]) ** 2, axis=0)
        i = int(np.argmin(obj))
        a = self.grid[max(i - 1, 0)]
        b = self.grid[min(i + 1, len(self.grid) - 1)]
        best_phi, best_obj = float(self.grid[i]), float(obj[i])
        res = optimize.minimize_scalar(
            lambda x: self.objective(x, measured), bounds=(a, b), method="bounded",
            options={"xatol": self.xtol},
        )
        if res.fun < best_obj:
            best_phi, best_obj = float(res.x), float(res.fun)
        for edge in (self.lo, self.hi):
            if abs(best_phi - edge) < 10 * self.xtol:
                edge_obj = self.objective(edge, measured)
                if edge_obj <= best_obj:
                    best_phi, best_obj = edge, edge_obj
        boundary = best_phi <= self.lo + self.xtol or best_phi >= self.hi - self.xtol
        return PhaseEstimate(best_phi, best_obj, bool(boundary))


def _measured_fractions(counts) -> np.ndarray:
    if isinstance(counts, EventCounts):
        if counts.total < 1:
            raise ValueError("need at least one recorded event")
        return counts.probabilities()
    c = np.asarray(counts, dtype=float)
    if c.shape != (3,) or np.any(c < 0) or c.sum() <= 0:
        raise ValueError("counts must be three non-negative numbers with a positive sum")
    return c / c.sum()


def estimate_phase(counts, curves, lo: float = 0.0, hi: float = math.pi / 2) -> PhaseEstimate:
    return PhaseEstimator(curves, lo, hi)(counts)


@dataclass(frozen=True)
class BootstrapResult:
    sem: float
    ci_low: float
    ci_high: float


def bootstrap_sem(estimates: Sequence[float], B: int = 10_000, seed: int = 0,
                  chunk: int = 256) -> BootstrapResult:
    """Nonparametric bootstrap of the standard deviation of the mean.

    The point value is the spread of the resampled means; the interval is
    the 95% percentile range of the per-resample sd/sqrt(s).
    """
    x = np.asarray(estimates, dtype=float)
    s = len(x)
    if s < 10:
        raise ValueError("bootstrap needs at least 10 estimates")
    if B < 1000:
        raise ValueError("bootstrap needs at least 1000 resamples")
    # spreads are shift invariant; shifting by a sample value keeps constant input exactly zero
    x = x - x[0]
    rng = rngmod.substream(seed, rngmod.BOOTSTRAP)
    means = np.empty(B)
    sems = np.empty(B)
    done = 0
    while done < B:
        b = min(chunk, B - done)
        sample = x[rng.integers(0, s, size=(b, s))]
        means[done:done + b] = sample.mean(axis=1)
        sems[done:done + b] = sample.std(axis=1, ddof=1) / math.sqrt(s)
        done += b
    lo, hi = np.percentile(sems, [2.5, 97.5])
    return BootstrapResult(float(means.std(ddof=1)), float(lo), float(hi))


@dataclass(frozen=True)
class PhaseEstimateBatch:
    estimates: tuple[float, ...]
    mean: float
    sd: float
    sem: float
    k: int | None = None
    sem_ci: tuple[float, float] | None = None
    bootstrap_sem: float | None = None
    snl_sem: float | None = None
    crb_sem: float | None = None
    k_tilde_ratio: float | None = None
    phi_true: float | None = None
    boundary_ids: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def s(self) -> int:
        return len(self.estimates)

    @property
    def below_snl(self) -> bool | None:
        return None if self.snl_sem is None else self.sem < self.snl_sem

    def to_dict(self, estimates_file: str | None = None) -> dict:
        d = {
            "version": SCHEMA_VERSION,
            "estimates_file": estimates_file,
            "mean": self.mean,
            "sd": self.sd,
            "sem": self.sem,
            "sem_ci": list(self.sem_ci) if self.sem_ci else None,
            "bootstrap_sem": self.bootstrap_sem,
            "snl_sem": self.snl_sem,
            "crb_sem": self.crb_sem,
            "k": self.k,
            "s": self.s,
            "k_tilde_ratio": self.k_tilde_ratio,
            "below_snl": self.below_snl,
            "boundary_flags": {"count": len(self.boundary_ids), "sample_ids": list(self.boundary_ids)},
            **self.meta,
        }
        if self.phi_true is not None:
            d["phi_true"] = self.phi_true
        return d

    def to_json(self, estimates_file: str | None = None) -> str:
        return json.dumps(self.to_dict(estimates_file), indent=2, sort_keys=True) + "\n"

    def estimates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "phi_est_rad"])
        for j, phi in enumerate(self.estimates):
            w.writerow([j, repr(float(phi))])
        return buf.getvalue()


def aggregate_samples(estimates, *, k: int | None = None, account: ResourceAccount | None = None,
                      fisher: float | None = None, phi_true: float | None = None,
                      lo: float = 0.0, hi: float = math.pi / 2) -> PhaseEstimateBatch:
    """Mean, standard error and benchmarks for s phase estimates.

    With a resource ``account`` the shot-noise benchmark 1/sqrt(N k_tilde s)
    is attached; with the Fisher information at the phase the Cramer-Rao
    level 1/sqrt(s k F) is attached.
    """
    boundary = tuple(j for j, e in enumerate(estimates)
                     if isinstance(e, PhaseEstimate) and e.boundary)
    values = np.array([e.phi if isinstance(e, PhaseEstimate) else float(e) for e in estimates])
    s = len(values)
    if s < 2:
        raise ValueError("need at least two estimates")
    if np.any(values < lo) or np.any(values > hi):
        raise ValueError("estimates outside the search range")
    mean = float(values.mean())
    sd = float(values.std(ddof=1))
    sem = sd / math.sqrt(s)
    if account is not None:
        k = account.k if k is None else k
    snl = snl_sem(account.n_total(s)) if account is not None else None
    crb = 1.0 / math.sqrt(s * k * fisher) if (fisher and k) else None
    return PhaseEstimateBatch(
        estimates=tuple(float(v) for v in values), mean=mean, sd=sd, sem=sem, k=k,
        snl_sem=snl, crb_sem=crb,
        k_tilde_ratio=account.ratio if account is not None else None,
        phi_true=phi_true, boundary_ids=boundary,
    )


def sample_estimates(config: SourceConfig, curves, phi_true: float, k: int, s: int,
                     workers: int = 1, lo: float = 0.0, hi: float = math.pi / 2):
    """Simulate s samples of k recorded trials and estimate each phase.

    Sample j draws from substream (seed, samples, j), so results do not
    depend on ``workers``.
    """
    estimator = PhaseEstimator(curves, lo, hi)

    def one(j):
        counts = simulate_trials(config, phi_true, k, rngmod.substream(config.seed, rngmod.SAMPLES, j))
        return estimator(counts), counts

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(s)))
    else:
        out = [one(j) for j in range(s)]
    return [e for e, _ in out], [c for _, c in out]
