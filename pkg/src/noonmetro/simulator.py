"""Seeded Monte Carlo of the pulsed pair source and the two click detectors."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .model import TWO_PI, InterferometerModel, ideal_outcome_probs, recorded_probs

DEFAULT_PAIR_PROB = 0.0046
DEFAULT_REP_RATE_HZ = 81e6
DEFAULT_MAX_PULSES = 10**10

SCAN_HEADER = ["phi_rad", "c11", "c20", "c02", "pulses", "pairs_true"]

NONE, C11, C20, C02 = 0, 1, 2, 3
_LABELS = {NONE: None, C11: "C11", C20: "C20", C02: "C02"}


class SimulationLimitError(RuntimeError):
    """The pulse guard limit was reached before the requested events."""


@dataclass(frozen=True)
class SourceConfig:
    """Pair source plus interferometer.

    ``pair_prob`` is the per-pulse probability of exactly one pair; a double
    pair occurs with probability ``pair_prob * xi``.  The default 0.0046 is
    an operational choice giving plausible event rates, not a measured value.
    """

    model: InterferometerModel
    pair_prob: float = DEFAULT_PAIR_PROB
    seed: int = 0
    rep_rate_hz: float = DEFAULT_REP_RATE_HZ
    max_pulses: int = DEFAULT_MAX_PULSES

    def __post_init__(self):
        rngmod.check_seed(self.seed)
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError(f"pair_prob must lie in [0, 1], got {self.pair_prob}")
        if self.pair_prob * (1.0 + self.model.xi) > 1.0 + 1e-15:
            raise ValueError("pair_prob * (1 + xi) must not exceed 1")
        if self.rep_rate_hz <= 0:
            raise ValueError("rep_rate_hz must be positive")
        if self.max_pulses < 1:
            raise ValueError("max_pulses must be at least 1")

    @property
    def emission_probs(self) -> tuple[float, float, float]:
        """Probabilities of 0, 1 and 2 pairs in a pulse."""
        p1 = self.pair_prob
        p2 = self.pair_prob * self.model.xi
        return max(0.0, 1.0 - p1 - p2), p1, p2

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "rng": rngmod.ALGORITHM,
            "pair_prob": self.pair_prob,
            "rep_rate_hz": self.rep_rate_hz,
            "max_pulses": self.max_pulses,
            "model": self.model.to_dict(),
        }


@dataclass(frozen=True)
class EventCounts:
    c11: int
    c20: int
    c02: int
    pulses: int = 0
    pairs_generated: int = 0

    def __post_init__(self):
        for name in ("c11", "c20", "c02", "pulses", "pairs_generated"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.pulses and self.total > self.pulses:
            raise ValueError("more recorded events than pulses")

    @property
    def total(self) -> int:
        return self.c11 + self.c20 + self.c02

    @property
    def no_event(self) -> int:
        return self.pulses - self.total

    def as_array(self) -> np.ndarray:
        return np.array([self.c11, self.c20, self.c02], dtype=float)

    def probabilities(self) -> np.ndarray:
        """Recorded-event fractions P11, P20, P02."""
        return self.as_array() / self.total

    def __add__(self, other: "EventCounts") -> "EventCounts":
        return EventCounts(
            self.c11 + other.c11, self.c20 + other.c20, self.c02 + other.c02,
            self.pulses + other.pulses, self.pairs_generated + other.pairs_generated,
        )


@dataclass(frozen=True)
class ScanRow:
    phi: float
    counts: EventCounts


@dataclass(frozen=True)
class FringeScan:
    rows: tuple[ScanRow, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        phis = self.phis
        if len(phis) == 0:
            raise ValueError("a scan needs at least one row")
        if phis[0] < 0.0 or phis[-1] >= TWO_PI or np.any(np.diff(phis) <= 0):
            raise ValueError("scan phases must increase strictly within [0, 2pi)")

    def __len__(self):
        return len(self.rows)

    @property
    def phis(self) -> np.ndarray:
        return np.array([r.phi for r in self.rows], dtype=float)

    def counts_array(self) -> np.ndarray:
        """Counts of shape (rows, 3) in the order c11, c20, c02."""
        return np.array([r.counts.as_array() for r in self.rows])

    def totals(self) -> np.ndarray:
        return np.array([r.counts.total for r in self.rows], dtype=float)

    def pulses(self) -> np.ndarray:
        return np.array([r.counts.pulses for r in self.rows], dtype=float)

    def probabilities(self) -> np.ndarray:
        c = self.counts_array()
        return c / c.sum(axis=1, keepdims=True)

    def row_at(self, phi: float, atol: float = 1e-12) -> ScanRow:
        for row in self.rows:
            if abs(row.phi - phi) <= atol:
                return row
        raise KeyError(f"no scan row at phi={phi}")

    @classmethod
    def from_expected(cls, model: InterferometerModel, phases, events) -> "FringeScan":
        """Noise-free scan whose counts are the expected values, rounded."""
        probs = recorded_probs(model, np.asarray(phases, dtype=float), multipair=True).normalized()
        rows = []
        for j, phi in enumerate(phases):
            c = np.rint(probs[:, j] * events).astype(np.int64)
            rows.append(ScanRow(float(phi), EventCounts(int(c[0]), int(c[1]), int(c[2]))))
        return cls(tuple(rows), {"source": "expected"})

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# noonmetro fringe scan v1\n")
        if "seed" in self.metadata:
            buf.write(f"# rng: {self.metadata.get('rng', '')}; seed={self.metadata['seed']}\n")
        if "config" in self.metadata:
            buf.write("# config: " + json.dumps(self.metadata["config"], sort_keys=True,
                                                separators=(",", ":")) + "\n")
        buf.write("# pairs_true: simulator ground truth, oracle-only; "
                  "ignored by calibration and estimation\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCAN_HEADER)
        for r in self.rows:
            c = r.counts
            w.writerow([repr(float(r.phi)), c.c11, c.c20, c.c02, c.pulses, c.pairs_generated])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def from_csv(cls, text: str) -> "FringeScan":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        missing = set(SCAN_HEADER[:4]) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"scan CSV is missing columns: {sorted(missing)}")
        rows = []
        for rec in reader:
            counts = EventCounts(
                int(rec["c11"]), int(rec["c20"]), int(rec["c02"]),
                int(rec.get("pulses") or 0),
                # oracle column kept for bookkeeping only
                int(rec.get("pairs_true") or 0),
            )
            rows.append(ScanRow(float(rec["phi_rad"]), counts))
        meta = {}
        for ln in text.splitlines():
            if ln.startswith("# rng: ") and "; seed=" in ln:
                algo, seed = ln[len("# rng: "):].rsplit("; seed=", 1)
                meta["rng"], meta["seed"] = algo, int(seed)
            elif ln.startswith("# config: "):
                meta["config"] = json.loads(ln[len("# config: "):])
        return cls(tuple(rows), meta)

    @classmethod
    def read_csv(cls, path) -> "FringeScan":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def simulate_pulse(config: SourceConfig, phi: float, rng: np.random.Generator) -> str | None:
    """One laser pulse, photon by photon.

    Returns "C11", "C20", "C02" or None.  This is the readable reference;
    the batch routines below sample the same distribution in bulk.
    """
    model = config.model
    p0, p1, p2 = config.emission_probs
    u = rng.random()
    n_pairs = 0 if u < p0 else (1 if u < p0 + p1 else 2)
    eta_t, eta_r = (float(x) for x in model.transmissions(phi))
    q = ideal_outcome_probs(phi, model.visibility)
    q11, q20 = float(q.q11), float(q.q20)

    click_t = click_r = False
    for _ in range(n_pairs):
        w = rng.random()
        if w < q11:
            photons = ("t", "r")
        elif w < q11 + q20:
            photons = ("t", "t")
        else:
            photons = ("r", "r")
        for arm in photons:
            if arm == "t" and rng.random() < eta_t:
                click_t = True
            elif arm == "r" and rng.random() < eta_r:
                click_r = True
    if rng.random() < model.dark_prob:
        click_t = True
    if rng.random() < model.dark_prob:
        click_r = True
    return _LABELS[int(_classify(click_t, click_r))]


def _classify(click_t, click_r):
    return np.where(click_t & click_r, C11, np.where(click_t, C20, np.where(click_r, C02, NONE)))


def _pair_clicks(rng, n, q11, q20, eta_t, eta_r):
    """Click indicators on (t, r) caused by one pair in each of ``n`` pulses."""
    w = rng.random(n)
    n_t = np.where(w < q11, 1, np.where(w < q11 + q20, 2, 0))
    n_r = 2 - n_t
    # at least one of n photons survives with probability 1 - (1 - eta)^n
    surv_t = (1.0 - (1.0 - eta_t) ** np.arange(3))[n_t]
    surv_r = (1.0 - (1.0 - eta_r) ** np.arange(3))[n_r]
    return rng.random(n) < surv_t, rng.random(n) < surv_r


def _active_prob(config: SourceConfig) -> float:
    p0, _, _ = config.emission_probs
    d = config.model.dark_prob
    return 1.0 - p0 * (1.0 - d) ** 2


def _simulate_active(config: SourceConfig, phi: float, n: int, rng: np.random.Generator):
    """Sample ``n`` pulses conditioned on something happening.

    A pulse is active if it emits a pair or a detector fires a dark count.
    Returns (event class codes, pairs per pulse).
    """
    model = config.model
    p0, p1, p2 = config.emission_probs
    d = model.dark_prob
    w_dark_only = p0 * (1.0 - (1.0 - d) ** 2)
    cum = np.cumsum([w_dark_only, p1, p2])
    m = np.searchsorted(cum / cum[-1], rng.random(n), side="right")

    eta_t, eta_r = (float(x) for x in model.transmissions(phi))
    q = ideal_outcome_probs(phi, model.visibility)
    q11, q20 = float(q.q11), float(q.q20)

    click_t, click_r = _pair_clicks(rng, n, q11, q20, eta_t, eta_r)
    has_pair = m >= 1
    click_t &= has_pair
    click_r &= has_pair
    t2, r2 = _pair_clicks(rng, n, q11, q20, eta_t, eta_r)
    click_t |= t2 & (m == 2)
    click_r |= r2 & (m == 2)

    if d > 0.0:
        dark_t = rng.random(n) < d
        dark_r = rng.random(n) < d
        # dark-only pulses must click somewhere: draw the pattern conditionally
        idle = m == 0
        n_idle = int(idle.sum())
        if n_idle:
            cum = np.cumsum([d * (1 - d), (1 - d) * d, d * d])
            pattern = np.searchsorted(cum / cum[-1], rng.random(n_idle), side="right")
            dark_t[idle] = pattern != 1
            dark_r[idle] = pattern != 0
        click_t |= dark_t
        click_r |= dark_r
    return _classify(click_t, click_r), m


_CHUNK = 1 << 20


def simulate_pulses(config: SourceConfig, phi: float, n_pulses: int,
                    rng: np.random.Generator | None = None) -> EventCounts:
    """Run a fixed number of pulses and tally the recorded events."""
    if rng is None:
        rng = rngmod.substream(config.seed, rngmod.PULSES)
    n_pulses = int(n_pulses)
    p_active = _active_prob(config)
    n_active = int(rng.binomial(n_pulses, p_active)) if p_active > 0 else 0
    tally = np.zeros(4, dtype=np.int64)
    pairs = 0
    left = n_active
    while left > 0:
        n = min(left, _CHUNK)
        cls, m = _simulate_active(config, phi, n, rng)
        tally += np.bincount(cls, minlength=4)
        pairs += int(m.sum())
        left -= n
    return EventCounts(int(tally[C11]), int(tally[C20]), int(tally[C02]), n_pulses, pairs)


def simulate_trials(config: SourceConfig, phi: float, k: int,
                    rng: np.random.Generator | None = None) -> EventCounts:
    """Pulse the source until exactly ``k`` events have been recorded.

    Idle pulses are skipped in bulk with geometric gaps, which leaves the
    pulse count distributed exactly as in a pulse-by-pulse run.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if rng is None:
        rng = rngmod.substream(config.seed, rngmod.PULSES)
    p_active = _active_prob(config)
    if p_active <= 0.0:
        raise SimulationLimitError("source never emits and detectors never fire: "
                                   "no event can be recorded")
    tally = np.zeros(4, dtype=np.int64)
    pulses = 0
    pairs = 0
    remaining = k
    hit_rate = 0.5
    while remaining > 0:
        n = min(_CHUNK, int(1.1 * remaining / hit_rate) + 64)
        gaps = rng.geometric(p_active, size=n)
        cls, m = _simulate_active(config, phi, n, rng)
        recorded = np.flatnonzero(cls != NONE)
        hit_rate = max(len(recorded) / n, 1e-6)
        if len(recorded) >= remaining:
            stop = recorded[remaining - 1] + 1
            gaps, cls, m = gaps[:stop], cls[:stop], m[:stop]
        pulses += int(gaps.sum())
        pairs += int(m.sum())
        tally += np.bincount(cls, minlength=4)
        remaining = k - int(tally[1:].sum())
        if pulses > config.max_pulses:
            raise SimulationLimitError(
                f"guard limit of {config.max_pulses} pulses reached with "
                f"{k - remaining} of {k} events recorded"
            )
    return EventCounts(int(tally[C11]), int(tally[C20]), int(tally[C02]), pulses, pairs)


def simulate_scan(config: SourceConfig, phases, events_per_phase: int,
                  workers: int = 1) -> FringeScan:
    """One row per phase, each drawn from its own (seed, row) substream."""
    phases = [float(p) for p in phases]
    if not phases:
        raise ValueError("phase list is empty")

    def row(i):
        rng = rngmod.substream(config.seed, rngmod.SCAN, i)
        return ScanRow(phases[i], simulate_trials(config, phases[i], events_per_phase, rng))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, range(len(phases))))
    else:
        rows = [row(i) for i in range(len(phases))]
    meta = config.metadata()
    meta["events_per_phase"] = int(events_per_phase)
    return FringeScan(tuple(rows), meta)
