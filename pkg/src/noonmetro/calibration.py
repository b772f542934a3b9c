"""Recover interferometer parameters from fringe scans.

The fit runs in stages:

1. ``fit_visibility``: sinusoid fit to the normalised coincidence fringe.
2. ``fit_model``: a global least-squares fit of (v, eta_t, eta_r) to all
   three normalised fringes, then per-phase (eta_t, eta_r) with v held at
   its global value.  The per-phase transmissions become the tabulated
   profile of the fitted model.  (With both transmissions free at every
   phase the visibility cannot be identified, hence the split.)
3. ``estimate_xi``: double-pair fraction from detections per pulse.

Uncertainties come from propagating multinomial count noise through the
fit (sandwich covariance).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .model import (
    MAX_PROFILE_RATIO,
    MAX_XI,
    InterferometerModel,
    TransmissionProfile,
    ideal_outcome_probs,
    lossy_event_probs,
    mix_double_pairs,
    recorded_probs,
)
from .simulator import EventCounts, FringeScan

SCHEMA_VERSION = 1
MIN_PHASES = 8
MAX_PHASE_OFFSET = 0.05
PROFILE_SIGMA_MAX = 0.002
EMISSION_LAWS = ("poisson", "thermal")


class CalibrationError(RuntimeError):
    """A fit failed or its input cannot support calibration."""


class TransmissionRatios(NamedTuple):
    eta_r: float
    eta_t: float
    eta_r_err: float
    eta_t_err: float


@dataclass(frozen=True)
class VisibilityFit:
    v: float
    v_err: float
    phase_offset: float
    baseline: float
    mean: float
    residual: float


@dataclass(frozen=True)
class CalibrationCurves:
    """Fitted model with uncertainties.

    ``eta_t_err`` / ``eta_r_err`` line up with the points of the model's
    transmission profiles.
    """

    model: InterferometerModel
    visibility_err: float = 0.0
    eta_t_err: tuple[float, ...] = (0.0,)
    eta_r_err: tuple[float, ...] = (0.0,)
    xi_err: float = 0.0
    residual: float = 0.0
    converged: bool = True
    offsets: dict = field(default_factory=lambda: {"phase": 0.0, "baseline": 0.0})
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        errs = (self.visibility_err, self.xi_err, *self.eta_t_err, *self.eta_r_err)
        if any(not np.isfinite(e) or e < 0 for e in errs):
            raise ValueError("uncertainties must be finite and non-negative")
        if len(self.eta_t_err) != len(self.model.eta_t.values) or \
                len(self.eta_r_err) != len(self.model.eta_r.values):
            raise ValueError("transmission errors must match the profile points")

    @classmethod
    def from_model(cls, model: InterferometerModel, **kwargs) -> "CalibrationCurves":
        """Curves that take ``model`` as exact (zero uncertainty by default)."""
        kwargs.setdefault("eta_t_err", (0.0,) * len(model.eta_t.values))
        kwargs.setdefault("eta_r_err", (0.0,) * len(model.eta_r.values))
        return cls(model=model, **kwargs)

    def probs(self, phi) -> np.ndarray:
        """Calibration curves p11, p20, p02 (double pairs included)."""
        return recorded_probs(self.model, phi, multipair=True).normalized()

    def perturbed(self) -> list[tuple[InterferometerModel, InterferometerModel]]:
        """(+1 sigma, -1 sigma) model pairs, one per uncertain parameter."""
        m = self.model
        pairs = []
        if self.visibility_err > 0:
            pairs.append((
                m.replace(visibility=min(1.0, m.visibility + self.visibility_err)),
                m.replace(visibility=max(0.0, m.visibility - self.visibility_err)),
            ))
        for arm, err in (("eta_t", self.eta_t_err), ("eta_r", self.eta_r_err)):
            # the whole profile moves together so its shape stays valid
            e = float(np.sqrt(np.mean(np.square(err))))
            if e > 0:
                prof = getattr(m, arm)
                pairs.append((m.replace(**{arm: prof.shifted(e)}),
                              m.replace(**{arm: prof.shifted(-e)})))
        return pairs

    def to_dict(self) -> dict:
        m = self.model

        def arm(prof, err):
            return {"phis": list(prof.phis), "values": list(prof.values), "errors": list(err)}

        return {
            "version": SCHEMA_VERSION,
            "visibility": m.visibility,
            "visibility_err": self.visibility_err,
            "eta_t": arm(m.eta_t, self.eta_t_err),
            "eta_r": arm(m.eta_r, self.eta_r_err),
            "xi": m.xi,
            "xi_err": self.xi_err,
            "dark_prob": m.dark_prob,
            "fit": {
                "residual": self.residual,
                "converged": self.converged,
                "offsets": dict(self.offsets),
                **self.meta,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="")

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationCurves":
        model = InterferometerModel(
            visibility=float(d["visibility"]),
            eta_t=TransmissionProfile(tuple(d["eta_t"]["phis"]), tuple(d["eta_t"]["values"])),
            eta_r=TransmissionProfile(tuple(d["eta_r"]["phis"]), tuple(d["eta_r"]["values"])),
            xi=float(d.get("xi", 0.0)),
            dark_prob=float(d.get("dark_prob", 0.0)),
        )
        fit = dict(d.get("fit", {}))
        residual = float(fit.pop("residual", 0.0))
        converged = bool(fit.pop("converged", True))
        offsets = fit.pop("offsets", {"phase": 0.0, "baseline": 0.0})
        return cls(
            model=model,
            visibility_err=float(d.get("visibility_err", 0.0)),
            eta_t_err=tuple(d["eta_t"].get("errors", [0.0] * len(model.eta_t.values))),
            eta_r_err=tuple(d["eta_r"].get("errors", [0.0] * len(model.eta_r.values))),
            xi_err=float(d.get("xi_err", 0.0)),
            residual=residual,
            converged=converged,
            offsets=offsets,
            meta=fit,
        )

    @classmethod
    def read_json(cls, path) -> "CalibrationCurves":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def transmissions_at_zero(counts: EventCounts) -> TransmissionRatios:
    """Arm transmissions from the coincidence ratios at zero phase.

    With perfect interference c20 at phi = 0 only arises when the reflected
    photon of a coincidence pair is lost, so c11/(c11 + c20) measures eta_r
    (and likewise for eta_t).  Binomial standard errors are attached.
    """
    c11, c20, c02 = counts.c11, counts.c20, counts.c02
    if c11 <= 0:
        raise CalibrationError("no coincidences at phi=0; transmission ratios undefined")
    eta_r = c11 / (c11 + c20)
    eta_t = c11 / (c11 + c02)
    err_r = np.sqrt(eta_r * (1 - eta_r) / (c11 + c20))
    err_t = np.sqrt(eta_t * (1 - eta_t) / (c11 + c02))
    return TransmissionRatios(eta_r, eta_t, float(err_r), float(err_t))


def check_coverage(scan: FringeScan) -> None:
    n = len(scan)
    phis = scan.phis
    if n < MIN_PHASES:
        raise CalibrationError(
            f"insufficient phase coverage: {n} phases, at least {MIN_PHASES} needed")
    span = phis[-1] - phis[0]
    if span < np.pi * (1 - 1 / n) - 1e-9:
        raise CalibrationError(
            f"insufficient phase coverage: phases span {span:.3f} rad, "
            "a full fringe period (pi) is required")
    if np.any(scan.totals() <= 0):
        raise CalibrationError("scan contains rows without recorded events")


def fit_visibility(scan: FringeScan, max_offset: float = MAX_PHASE_OFFSET) -> VisibilityFit:
    """Contrast of the normalised coincidence fringe.

    Fits ``M (1 + v cos(2 phi + phi0))`` by linear least squares in the
    basis (1, cos 2phi, sin 2phi).  A free additive baseline would be
    degenerate with M and v, so it is fixed at zero and v is the fringe
    contrast (max - min)/(max + min).
    """
    check_coverage(scan)
    phi = scan.phis
    y = scan.probabilities()[:, 0]
    X = np.column_stack([np.ones_like(phi), np.cos(2 * phi), np.sin(2 * phi)])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(len(y) - 3, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)

    mean, b, c = beta
    if mean <= 0:
        raise CalibrationError("coincidence fringe has non-positive mean")
    amp = float(np.hypot(b, c))
    v = amp / mean
    if amp > 0:
        grad = np.array([-amp / mean**2, b / (amp * mean), c / (amp * mean)])
        v_err = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    else:
        v_err = float(np.sqrt(0.5 * (cov[1, 1] + cov[2, 2]))) / mean
    offset = float(np.arctan2(-c, b)) if amp > 0 else 0.0

    if not np.isfinite(v) or v > 1.0 + 3.0 * v_err + 1e-9:
        raise CalibrationError(f"fitted visibility {v:.6f} +- {v_err:.2g} outside [0, 1]")
    if v > 3.0 * v_err and abs(offset) > max_offset:
        raise CalibrationError(f"fringe phase offset {offset:.4f} rad exceeds {max_offset}")
    return VisibilityFit(float(v), v_err, offset, 0.0, float(mean), float(np.sqrt(sigma2)))


def _model_probs(v, eta_t, eta_r, phi, xi=0.0):
    rec = lossy_event_probs(ideal_outcome_probs(phi, v), eta_t, eta_r)
    if xi > 0:
        rec = mix_double_pairs(rec, xi)
    return rec.normalized()


def _multinomial_cov(p, n):
    return (np.diag(p) - np.outer(p, p)) / n


def _sandwich(J, sigma_blocks, weights=None):
    """Covariance of a least-squares estimate under known data covariance."""
    if weights is not None:
        J = J * weights[:, None]
    n_par = J.shape[1]
    S = np.zeros((J.shape[0], J.shape[0]))
    for i, block in enumerate(sigma_blocks):
        S[3 * i:3 * i + 3, 3 * i:3 * i + 3] = block
    if weights is not None:
        S = S * np.outer(weights, weights)
    JtJ = J.T @ J
    sv = np.linalg.svd(J, compute_uv=False)
    if len(sv) < n_par or sv[-1] <= 1e-8 * sv[0]:
        return None
    inv = np.linalg.inv(JtJ)
    return inv @ J.T @ S @ J @ inv


def _seed_transmissions(scan: FringeScan):
    """Starting transmissions from the row closest to a fringe maximum."""
    phi = scan.phis
    dist = np.abs(np.angle(np.exp(2j * phi))) / 2
    row = scan.rows[int(np.argmin(dist))]
    try:
        eta_r, eta_t, _, _ = transmissions_at_zero(row.counts)
    except CalibrationError:
        return 0.8, 0.8
    return float(np.clip(eta_t, 0.05, 1.0)), float(np.clip(eta_r, 0.05, 1.0))


def fit_model(scan: FringeScan, *, xi: float | None = None, xi_err: float = 0.0,
              pair_prob: float | None = None, emission: str = "poisson",
              weighted: bool = False, profile_sigma_max: float = PROFILE_SIGMA_MAX,
              max_nfev: int = 100_000) -> CalibrationCurves:
    """Calibrate visibility, per-phase transmissions and xi from a scan.

    ``xi`` may be supplied directly; otherwise it is estimated from the
    detections per pulse recorded in the scan (see ``estimate_xi``) and the
    fringe fit is repeated with the double-pair admixture until xi settles.
    With ``weighted=True`` residuals are scaled by their binomial standard
    error instead of the default unweighted least squares.
    """
    vis = fit_visibility(scan)
    phi = scan.phis
    totals = scan.totals()
    pulses = scan.pulses()

    if xi is not None:
        xi_source = "supplied"
        xi_hat = float(xi)
    elif np.all(pulses > 0):
        xi_source = "pair_prob" if pair_prob is not None else f"{emission} emission law"
        xi_hat = 0.0
    else:
        xi_source = "unavailable (no pulse counts)"
        xi_hat = 0.0

    xi_used = float(np.clip(xi_hat, 0.0, MAX_XI))
    for _ in range(5):
        glob = _fit_global(scan, vis, xi_used, weighted, max_nfev)
        if xi_source in ("supplied",) or xi_source.startswith("unavailable"):
            break
        base = InterferometerModel(glob["v"], glob["eta_t"], glob["eta_r"])
        xi_hat, xi_err = estimate_xi(totals, pulses, CalibrationCurves.from_model(base), phi,
                                     pair_prob=pair_prob, emission=emission)
        xi_next = float(np.clip(xi_hat, 0.0, MAX_XI))
        if abs(xi_next - xi_used) <= 1e-3 * max(xi_err, 1e-12):
            xi_used = xi_next
            break
        xi_used = xi_next

    v, et, er = glob["v"], glob["eta_t"], glob["eta_r"]
    per_phase = _fit_per_phase(scan, v, et, er, xi_used)
    eta_t_prof, eta_t_err, eta_r_prof, eta_r_err, profile_meta = _build_profiles(
        phi, per_phase, (et, glob["eta_t_err"]), (er, glob["eta_r_err"]), profile_sigma_max)
    model = InterferometerModel(v, eta_t_prof, eta_r_prof, xi=xi_used)

    meta = {
        "objective": "weighted" if weighted else "unweighted",
        "n_phases": len(phi),
        "iterations": glob["nfev"],
        "global": {k: glob[k] for k in ("v", "v_err", "eta_t", "eta_t_err", "eta_r", "eta_r_err")},
        "fringe_visibility": vis.v,
        "fringe_visibility_err": vis.v_err,
        "xi_raw": float(xi_hat),
        "xi_source": xi_source,
        **profile_meta,
    }
    return CalibrationCurves(
        model=model, visibility_err=glob["v_err"],
        eta_t_err=eta_t_err, eta_r_err=eta_r_err, xi_err=float(xi_err),
        residual=glob["residual"], converged=glob["converged"],
        offsets={"phase": vis.phase_offset, "baseline": vis.baseline}, meta=meta,
    )


def _fit_global(scan, vis, xi, weighted, max_nfev):
    """Constant (v, eta_t, eta_r) fitted to all three normalised fringes."""
    phi = scan.phis
    probs = scan.probabilities()
    totals = scan.totals()
    y = probs.T.ravel()  # class-major: all p11, then p20, then p02
    w = None
    if weighted:
        var = np.maximum(probs * (1 - probs) / totals[:, None], 1e-18)
        w = (1.0 / np.sqrt(var)).T.ravel()

    def resid(theta):
        r = _model_probs(theta[0], theta[1], theta[2], phi, xi).ravel() - y
        return r * w if w is not None else r

    et0, er0 = _seed_transmissions(scan)
    v_grid = np.clip(vis.v + np.linspace(-0.05, 0.05, 11), 0.0, 1.0)
    x0 = min((np.array([vg, et0, er0]) for vg in v_grid),
             key=lambda s: float(np.sum(resid(s) ** 2)))
    sol = optimize.least_squares(
        resid, x0, bounds=([0.0, 1e-6, 1e-6], [1.0, 1.0, 1.0]), method="trf",
        x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev,
    )
    v, et, er = (float(x) for x in sol.x)
    model_p = _model_probs(v, et, er, phi, xi)
    blocks = [_multinomial_cov(model_p[:, j], totals[j]) for j in range(len(phi))]
    # reorder Jacobian rows to phase-major to match the covariance blocks
    order = np.arange(3 * len(phi)).reshape(3, -1).T.ravel()
    cov = _sandwich(sol.jac[order], blocks, None if w is None else w[order])
    if cov is None:
        raise CalibrationError("global fit is rank deficient")
    v_err, et_err, er_err = (float(np.sqrt(max(c, 0.0))) for c in np.diag(cov))
    return {
        "v": v, "eta_t": et, "eta_r": er,
        "v_err": v_err, "eta_t_err": et_err, "eta_r_err": er_err,
        "residual": float(np.sum((model_p.T.ravel() - y) ** 2)),
        "converged": bool(sol.success), "nfev": int(sol.nfev),
    }


def _fit_per_phase(scan: FringeScan, v, et0, er0, xi=0.0):
    """Per-row (eta_t, eta_r) at fixed visibility with propagated errors."""
    out = []
    for row in scan.rows:
        p_hat = row.counts.probabilities()
        n = row.counts.total

        def resid(x, phi=row.phi):
            return _model_probs(v, x[0], x[1], phi, xi) - p_hat

        sol = optimize.least_squares(
            resid, [et0, er0], bounds=([1e-6, 1e-6], [1.0, 1.0]), method="trf",
            xtol=1e-15, ftol=1e-15, gtol=1e-15,
        )
        p_fit = _model_probs(v, sol.x[0], sol.x[1], row.phi, xi)
        cov = _sandwich(sol.jac, [_multinomial_cov(p_fit, n)])
        if cov is None:
            errs = (1.0, 1.0)
        else:
            errs = tuple(min(float(np.sqrt(max(c, 0.0))), 1.0) for c in np.diag(cov))
        out.append((float(sol.x[0]), errs[0], float(sol.x[1]), errs[1]))
    return np.array(out)


def _build_profiles(phi, per_phase, glob_t, glob_r, sigma_max):
    """Tabulate well-conditioned per-phase transmissions.

    Rows whose transmissions are poorly determined (near the coincidence
    minima) are left out and bridged by interpolation.  If the surviving
    points still vary by more than the 2% model limit, the constant global
    values are used instead and the fit is flagged.
    """
    good = (per_phase[:, 1] <= sigma_max) & (per_phase[:, 3] <= sigma_max)
    meta = {"ill_conditioned_phases": [float(p) for p in phi[~good]]}
    const = (TransmissionProfile.constant(glob_t[0]), (glob_t[1],),
             TransmissionProfile.constant(glob_r[0]), (glob_r[1],))
    if good.sum() < 2:
        meta.update(profile="constant", transmission_variation=0.0, variation_ok=True)
        return (*const, meta)
    vt, vr = per_phase[good, 0], per_phase[good, 2]
    variation = float(max(vt.max() / vt.min(), vr.max() / vr.min()) - 1.0)
    meta["transmission_variation"] = variation
    if variation > MAX_PROFILE_RATIO - 1.0:
        meta.update(profile="constant", variation_ok=False)
        return (*const, meta)
    pg = phi[good]
    meta.update(profile="tabulated", variation_ok=True)
    return (TransmissionProfile(tuple(pg), tuple(vt)), tuple(per_phase[good, 1]),
            TransmissionProfile(tuple(pg), tuple(vr)), tuple(per_phase[good, 3]), meta)


def _emission_pair_prob(xi, emission):
    """Single-pair probability implied by xi under an emission law."""
    if emission == "poisson":
        mu = 2.0 * xi  # P2/P1 = mu/2
        return mu * np.exp(-mu)
    if emission == "thermal":
        lam = xi  # P2/P1 = lambda
        return (1.0 - lam) * lam
    raise ValueError(f"unknown emission law {emission!r}; choose from {EMISSION_LAWS}")


def _detection_prob(xi, pair_prob, none1, dark):
    """Per-pulse probability of at least one click.

    ``none1`` is the probability that a single pair produces no click; two
    independent pairs both stay dark with ``none1**2``.
    """
    p1 = pair_prob
    p2 = pair_prob * xi
    p0 = 1.0 - p1 - p2
    return 1.0 - (1.0 - dark) ** 2 * (p0 + p1 * none1 + p2 * none1**2)


def estimate_xi(total_detections, pulses, curves: CalibrationCurves, phi, *,
                pair_prob: float | None = None, emission: str = "poisson"):
    """Double-pair fraction from the recorded detections per pulse.

    Arguments may be arrays (one entry per scan row) and are then solved
    jointly.  With ``pair_prob`` known independently the relation is linear
    in xi and solved directly.  Otherwise xi and the single-pair probability
    are tied together by the ``emission`` photon-number law and xi is found
    by root finding.  Returns ``(xi, xi_err)``; xi is not clipped at zero so
    a pure single-pair source gives an estimate scattered around 0.
    """
    det = np.atleast_1d(np.asarray(total_detections, dtype=float))
    n = np.atleast_1d(np.asarray(pulses, dtype=float))
    phis = np.atleast_1d(np.asarray(phi, dtype=float))
    if np.any(n <= 0):
        raise ValueError("pulses must be positive")
    rate = det.sum() / n.sum()
    if rate >= 0.5:
        raise ValueError(f"detection rate {rate:.3f} per pulse is too close to saturation")
    model = curves.model
    none1 = recorded_probs(model, phis).Pnone
    dark = model.dark_prob

    if pair_prob is not None:
        # detections = sum n_j (a_j + b_j xi)
        a = _detection_prob(0.0, pair_prob, none1, dark)
        b = _detection_prob(1.0, pair_prob, none1, dark) - a
        xi = (det.sum() - n @ a) / (n @ b)
        r = a + b * xi
        sd = np.sqrt(np.sum(n * np.clip(r, 0, 1) * (1 - np.clip(r, 0, 1))))
        return float(xi), float(sd / (n @ b))

    def expected(x):
        return n @ _detection_prob(x, _emission_pair_prob(x, emission), none1, dark)

    target = det.sum()
    hi = 0.5
    if expected(0.0) >= target:
        xi = 0.0
    elif expected(hi) <= target:
        raise CalibrationError("detection rate too high for the emission model")
    else:
        xi = optimize.brentq(lambda x: expected(x) - target, 0.0, hi, xtol=1e-14, rtol=1e-12)
    h = max(1e-7, 1e-4 * xi)
    slope = (expected(xi + h) - expected(max(xi - h, 0.0))) / (xi + h - max(xi - h, 0.0))
    r = _detection_prob(xi, _emission_pair_prob(xi, emission), none1, dark)
    sd = np.sqrt(np.sum(n * r * (1 - r)))
    return float(xi), float(sd / slope)
