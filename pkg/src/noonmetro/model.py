"""Analytic model of the lossy N=2 NOON polarisation interferometer.

Two photons pass a birefringent phase ``phi`` and are split onto a
transmitted (t) and a reflected (r) output.  Before loss the pair leaves as
one photon per output (``11``), both transmitted (``20``) or both reflected
(``02``).  Each photon then survives independently with the efficiency of
its output arm, and the non-number-resolving detectors click on one or more
photons.  Everything here is a pure function of its arguments and accepts
scalar or array phases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi
NORM_TOL = 1e-12
MAX_PROFILE_RATIO = 1.02
MAX_XI = 0.1
MAX_DARK_PROB = 1e-3


class ModelDomainError(ValueError):
    """A model parameter lies outside its physical or validity range."""


def reduce_phase(phi):
    """Map a phase onto the two-photon fringe period [0, pi)."""
    return np.mod(phi, np.pi)


def _check_efficiency(value, name):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr > 1.0):
        raise ModelDomainError(f"{name} must lie in (0, 1], got {value!r}")


def _check_visibility(v):
    if not np.isfinite(v) or v < 0.0 or v > 1.0:
        raise ModelDomainError(f"visibility must lie in [0, 1], got {v!r}")


@dataclass(frozen=True)
class TransmissionProfile:
    """Arm efficiency, either constant or tabulated against phase.

    Tabulated profiles are linearly interpolated and wrap around with period
    2*pi, so a single point behaves like a constant.
    """

    phis: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        phis = tuple(float(p) for p in self.phis)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "phis", phis)
        object.__setattr__(self, "values", values)
        if len(phis) == 0 or len(phis) != len(values):
            raise ModelDomainError("profile needs matching, non-empty phis and values")
        _check_efficiency(values, "transmission")
        if len(phis) > 1:
            arr = np.asarray(phis)
            if np.any(np.diff(arr) <= 0) or arr[0] < 0.0 or arr[-1] >= TWO_PI:
                raise ModelDomainError("profile phases must increase strictly within [0, 2pi)")
        if max(values) / min(values) > MAX_PROFILE_RATIO + 1e-12:
            raise ModelDomainError(
                f"transmission varies by {max(values) / min(values) - 1:.4f} (limit 0.02)"
            )

    @classmethod
    def constant(cls, value: float) -> "TransmissionProfile":
        return cls((0.0,), (float(value),))

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def variation(self) -> float:
        """Worst-case relative spread, max/min - 1."""
        return max(self.values) / min(self.values) - 1.0

    def __call__(self, phi):
        if self.is_constant:
            return np.full_like(np.asarray(phi, dtype=float), self.values[0])
        x = np.asarray(self.phis)
        y = np.asarray(self.values)
        return np.interp(np.mod(phi, TWO_PI), x, y, period=TWO_PI)

    def shifted(self, delta) -> "TransmissionProfile":
        """Profile with ``delta`` (scalar or per-point) added, clipped into (0, 1]."""
        vals = np.clip(np.asarray(self.values) + delta, 1e-9, 1.0)
        return TransmissionProfile(self.phis, tuple(vals))

    def to_dict(self) -> dict:
        return {"phis": list(self.phis), "values": list(self.values)}

    @classmethod
    def from_obj(cls, obj) -> "TransmissionProfile":
        if isinstance(obj, TransmissionProfile):
            return obj
        if isinstance(obj, dict):
            return cls(tuple(obj["phis"]), tuple(obj["values"]))
        return cls.constant(float(obj))


@dataclass(frozen=True)
class InterferometerModel:
    visibility: float
    eta_t: TransmissionProfile
    eta_r: TransmissionProfile
    xi: float = 0.0
    dark_prob: float = 0.0
    photon_number: int = 2

    def __post_init__(self):
        object.__setattr__(self, "eta_t", TransmissionProfile.from_obj(self.eta_t))
        object.__setattr__(self, "eta_r", TransmissionProfile.from_obj(self.eta_r))
        _check_visibility(self.visibility)
        if not 0.0 <= self.xi <= MAX_XI:
            raise ModelDomainError(f"xi must lie in [0, {MAX_XI}], got {self.xi!r}")
        if not 0.0 <= self.dark_prob <= MAX_DARK_PROB:
            raise ModelDomainError(f"dark_prob must lie in [0, 1e-3], got {self.dark_prob!r}")
        if self.photon_number != 2:
            raise ModelDomainError("only N=2 NOON states are modelled")

    @property
    def constant_transmission(self) -> bool:
        return self.eta_t.is_constant and self.eta_r.is_constant

    def transmissions(self, phi):
        return self.eta_t(phi), self.eta_r(phi)

    def replace(self, **changes) -> "InterferometerModel":
        fields_ = dict(
            visibility=self.visibility, eta_t=self.eta_t, eta_r=self.eta_r,
            xi=self.xi, dark_prob=self.dark_prob, photon_number=self.photon_number,
        )
        fields_.update(changes)
        return InterferometerModel(**fields_)

    def to_dict(self) -> dict:
        def arm(p):
            return p.values[0] if p.is_constant else p.to_dict()

        return {
            "visibility": self.visibility,
            "eta_t": arm(self.eta_t),
            "eta_r": arm(self.eta_r),
            "xi": self.xi,
            "dark_prob": self.dark_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterferometerModel":
        return cls(
            visibility=float(d["visibility"]),
            eta_t=TransmissionProfile.from_obj(d["eta_t"]),
            eta_r=TransmissionProfile.from_obj(d["eta_r"]),
            xi=float(d.get("xi", 0.0)),
            dark_prob=float(d.get("dark_prob", 0.0)),
        )


@dataclass(frozen=True)
class OutcomeDistribution:
    q11: np.ndarray
    q20: np.ndarray
    q02: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.q11, self.q20, self.q02])


@dataclass(frozen=True)
class RecordedDistribution:
    """Per-pair recorded-event probabilities and their renormalised form."""

    P11: np.ndarray
    P20: np.ndarray
    P02: np.ndarray
    Pnone: np.ndarray
    p11: np.ndarray = field(init=False)
    p20: np.ndarray = field(init=False)
    p02: np.ndarray = field(init=False)

    def __post_init__(self):
        detected = self.P11 + self.P20 + self.P02
        object.__setattr__(self, "p11", self.P11 / detected)
        object.__setattr__(self, "p20", self.P20 / detected)
        object.__setattr__(self, "p02", self.P02 / detected)

    @property
    def detected(self):
        return 1.0 - self.Pnone

    def normalized(self) -> np.ndarray:
        """Array of shape (3, ...) holding p11, p20, p02."""
        return np.stack([self.p11, self.p20, self.p02])

    def raw(self) -> np.ndarray:
        """Array of shape (4, ...) holding P11, P20, P02, Pnone."""
        return np.stack([self.P11, self.P20, self.P02, self.Pnone])


@dataclass(frozen=True)
class OutcomeEfficiencies:
    eta11: np.ndarray
    eta20: np.ndarray
    eta02: np.ndarray

    def minimum(self):
        return np.minimum(np.minimum(self.eta11, self.eta20), self.eta02)


def ideal_outcome_probs(phi, v: float) -> OutcomeDistribution:
    """Pre-loss outcome probabilities; coincidences peak at phi = 0."""
    _check_visibility(v)
    c = v * np.cos(2.0 * np.asarray(phi, dtype=float))
    q11 = 0.5 * (1.0 + c)
    q_single = 0.25 * (1.0 - c)
    return OutcomeDistribution(q11, q_single, q_single.copy())


def lossy_event_probs(q: OutcomeDistribution, eta_t, eta_r) -> RecordedDistribution:
    _check_efficiency(eta_t, "eta_t")
    _check_efficiency(eta_r, "eta_r")
    lt = 1.0 - np.asarray(eta_t, dtype=float)
    lr = 1.0 - np.asarray(eta_r, dtype=float)
    P11 = q.q11 * (1.0 - lt) * (1.0 - lr)
    P20 = q.q20 * (1.0 - lt * lt) + q.q11 * (1.0 - lt) * lr
    P02 = q.q02 * (1.0 - lr * lr) + q.q11 * (1.0 - lr) * lt
    Pnone = q.q11 * lt * lr + q.q20 * lt * lt + q.q02 * lr * lr
    return RecordedDistribution(P11, P20, P02, Pnone)


def recorded_probs(model: InterferometerModel, phi, multipair: bool = False) -> RecordedDistribution:
    """Recorded-event probabilities of the model at ``phi``.

    By default this is the single-pair distribution.  With ``multipair`` the
    double-pair admixture of weight ``xi`` is mixed in, giving the per-emission
    distribution a pulsed source actually produces.
    """
    eta_t, eta_r = model.transmissions(phi)
    rec = lossy_event_probs(ideal_outcome_probs(phi, model.visibility), eta_t, eta_r)
    if multipair and model.xi > 0:
        return mix_double_pairs(rec, model.xi)
    return rec


def double_pair_probs(rec: RecordedDistribution) -> RecordedDistribution:
    """Click statistics of two independent pairs seen by click detectors."""
    n = rec.Pnone
    none = n * n
    t_only = (rec.P20 + n) ** 2 - none
    r_only = (rec.P02 + n) ** 2 - none
    return RecordedDistribution(1.0 - none - t_only - r_only, t_only, r_only, none)


def mix_double_pairs(rec: RecordedDistribution, xi: float) -> RecordedDistribution:
    w = 1.0 / (1.0 + xi)
    d = double_pair_probs(rec)
    return RecordedDistribution(
        w * rec.P11 + (1 - w) * d.P11,
        w * rec.P20 + (1 - w) * d.P20,
        w * rec.P02 + (1 - w) * d.P02,
        w * rec.Pnone + (1 - w) * d.Pnone,
    )


def outcome_efficiencies(eta_t, eta_r) -> OutcomeEfficiencies:
    """Probability that each outcome class yields at least one detected photon."""
    _check_efficiency(eta_t, "eta_t")
    _check_efficiency(eta_r, "eta_r")
    lt = 1.0 - np.asarray(eta_t, dtype=float)
    lr = 1.0 - np.asarray(eta_r, dtype=float)
    return OutcomeEfficiencies(1.0 - lt * lr, 1.0 - lt * lt, 1.0 - lr * lr)


def eta_min(model: InterferometerModel, phi):
    eta_t, eta_r = model.transmissions(phi)
    return outcome_efficiencies(eta_t, eta_r).minimum()


def worst_case_eta_min(model: InterferometerModel, n_grid: int = 4096) -> float:
    """Lowest outcome efficiency over the whole phase range.

    For tabulated profiles the extremes sit on grid nodes, which are
    included alongside a uniform grid.
    """
    grid = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    nodes = np.union1d(np.asarray(model.eta_t.phis), np.asarray(model.eta_r.phis))
    return float(np.min(eta_min(model, np.concatenate([grid, nodes]))))


def resch_criterion(eta: float, v: float, n: int = 2) -> float:
    """eta**n * v**2 * n; a quantum advantage needs this above one."""
    return eta**n * v**2 * n


def linear_coefficients(model: InterferometerModel):
    """Coefficients (a, b) with P_i = a_i + b_i * cos(2 phi) for constant arms.

    Rows are P11, P20, P02 and the detected total, used for analytic
    derivatives.
    """
    if not model.constant_transmission:
        raise ModelDomainError("closed-form coefficients need constant transmissions")
    et, er = model.eta_t.values[0], model.eta_r.values[0]
    v = model.visibility
    lt, lr = 1.0 - et, 1.0 - er
    # q11 = (1 + v c)/2, q20 = q02 = (1 - v c)/4
    w11 = np.array([et * er, et * lr, er * lt])
    w_single = np.array([0.0, 1.0 - lt * lt, 0.0]), np.array([0.0, 0.0, 1.0 - lr * lr])
    a = 0.5 * w11 + 0.25 * (w_single[0] + w_single[1])
    b = v * (0.5 * w11 - 0.25 * (w_single[0] + w_single[1]))
    a = np.append(a, a.sum())
    b = np.append(b, b.sum())
    return a, b
