"""Run configuration, phase-list parsing and schema validation."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .model import InterferometerModel
from .simulator import (
    DEFAULT_MAX_PULSES,
    DEFAULT_PAIR_PROB,
    DEFAULT_REP_RATE_HZ,
    SourceConfig,
)

CONFIG_VERSION = 1

DEFAULT_SOURCE = {
    "pair_prob": DEFAULT_PAIR_PROB,
    "seed": 0,
    "rep_rate_hz": DEFAULT_REP_RATE_HZ,
    "max_pulses": DEFAULT_MAX_PULSES,
}
DEFAULT_EXPERIMENT = {
    "k": 10_000,
    "s": 14_520,
    "phases": "0:2pi:100",
    "events_per_phase": 250_000,
    "bootstrap_B": 10_000,
}
DEFAULT_MODEL = {"xi": 0.0, "dark_prob": 0.0}


class ConfigError(ValueError):
    """Invalid configuration or command-line input."""


def load_schema(name: str) -> dict:
    text = resources.files("noonmetro").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def validate(obj, name: str) -> None:
    """Validate ``obj`` against a shipped schema, raising ConfigError."""
    try:
        jsonschema.validate(obj, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{name} validation failed at {where}: {exc.message}") from None


_PI_TOKEN = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)?)\*?pi(?:/(\d+\.?\d*))?$")


def parse_angle(token: str) -> float:
    """Angle in radians from a token such as ``0.7``, ``pi/2``, ``2pi`` or ``45deg``."""
    t = token.strip().lower().replace(" ", "")
    if not t:
        raise ConfigError("empty angle")
    if t.endswith("deg"):
        try:
            return math.radians(float(t[:-3]))
        except ValueError:
            raise ConfigError(f"bad angle {token!r}") from None
    m = _PI_TOKEN.match(t)
    if m:
        coef = m.group(1)
        if coef in ("", "+"):
            coef = "1"
        elif coef == "-":
            coef = "-1"
        value = float(coef) * math.pi
        if m.group(2):
            value /= float(m.group(2))
        return value
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"bad angle {token!r}") from None


def parse_phi_spec(spec) -> np.ndarray:
    """Phases from ``start:stop:steps`` (half-open, like a range) or a comma list.

    Angles are radians unless a token carries a ``deg`` suffix.
    """
    if isinstance(spec, (list, tuple, np.ndarray)):
        return np.asarray([float(x) for x in spec], dtype=float)
    spec = str(spec).strip()
    if spec.count(":") == 2:
        a, b, n = spec.split(":")
        try:
            steps = int(n)
        except ValueError:
            raise ConfigError(f"step count must be an integer in {spec!r}") from None
        if steps < 1:
            raise ConfigError("step count must be at least 1")
        start, stop = parse_angle(a), parse_angle(b)
        return start + (stop - start) * np.arange(steps) / steps
    if ":" in spec:
        raise ConfigError(f"phase range must look like start:stop:steps, got {spec!r}")
    return np.asarray([parse_angle(t) for t in spec.split(",") if t.strip()], dtype=float)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration with every default filled in."""

    resolved: dict

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> "RunConfig":
        validate(raw, "run_config")
        d = copy.deepcopy(raw)
        resolved = {
            "version": d.get("version", CONFIG_VERSION),
            "model": {**DEFAULT_MODEL, **d["model"]},
            "source": {**DEFAULT_SOURCE, **d.get("source", {})},
            "experiment": {**DEFAULT_EXPERIMENT, **d.get("experiment", {})},
        }
        if seed is not None:
            resolved["source"]["seed"] = int(seed)
        cfg = cls(resolved)
        cfg.model()  # domain checks beyond the schema
        cfg.source()
        return cfg

    @classmethod
    def read(cls, path, seed: int | None = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, seed=seed)

    @property
    def seed(self) -> int:
        return int(self.resolved["source"]["seed"])

    @property
    def experiment(self) -> dict:
        return self.resolved["experiment"]

    @property
    def digest(self) -> str:
        return sha256_text(canonical_json(self.resolved))

    def model(self) -> InterferometerModel:
        try:
            return InterferometerModel.from_dict(self.resolved["model"])
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid model: {exc}") from None

    def source(self) -> SourceConfig:
        src = self.resolved["source"]
        try:
            return SourceConfig(
                model=self.model(),
                pair_prob=float(src["pair_prob"]),
                seed=int(src["seed"]),
                rep_rate_hz=float(src["rep_rate_hz"]),
                max_pulses=int(src["max_pulses"]),
            )
        except ValueError as exc:
            raise ConfigError(f"invalid source: {exc}") from None

    def phases(self) -> np.ndarray:
        return parse_phi_spec(self.experiment["phases"])
