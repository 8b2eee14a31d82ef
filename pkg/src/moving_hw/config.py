"""Scenario files: flat ``key = value`` text with dotted namespaces.

Example::

    scenario = solve-periodic
    geometry.kind = annulus
    geometry.R0 = 2.0
    geometry.R1 = 1.0
    motion.name = pulsating_annulus
    motion.amplitude = 0.05
    time.T = 1.0
    beta.kind = radial
    beta.flux = 0.1
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from moving_hw.errors import ParseError, ValidationError
from moving_hw.motions import BUILTIN_MOTIONS

SCENARIOS = ("verify-geometry", "decompose", "differentiate", "solve-periodic", "estimate-constant")
GEOMETRIES = ("annulus", "ball", "torus", "file")
BETA_KINDS = ("none", "radial")
FORCING_KINDS = ("none", "swirl", "uniform", "smooth")


def _positive(value: float) -> bool:
    return value > 0


def _non_negative(value: float) -> bool:
    return value >= 0


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


_SCHEMA: dict[str, _Key] = {
    "scenario": _Key(str, None, lambda v: v in SCENARIOS, f"must be one of {', '.join(SCENARIOS)}"),
    "geometry.kind": _Key(str, "annulus", lambda v: v in GEOMETRIES, f"must be one of {', '.join(GEOMETRIES)}"),
    "geometry.R0": _Key(float, 2.0, _positive, "must be positive"),
    "geometry.R1": _Key(float, 1.0, _positive, "must be positive"),
    "geometry.R": _Key(float, 1.0, _positive, "must be positive"),
    "geometry.major_R": _Key(float, 2.0, _positive, "must be positive"),
    "geometry.minor_r": _Key(float, 0.5, _positive, "must be positive"),
    "geometry.path": _Key(str, ""),
    "motion.name": _Key(str, "identity", lambda v: v in BUILTIN_MOTIONS, f"must be one of {', '.join(BUILTIN_MOTIONS)}"),
    "motion.lambda0": _Key(float, 1.0, _positive, "must be positive"),
    "motion.amplitude": _Key(float, 0.1, _non_negative, "must be non-negative"),
    "motion.period": _Key(float, 1.0, _positive, "must be positive"),
    "motion.R0": _Key(float, None, _positive, "must be positive"),
    "motion.R1": _Key(float, None, _positive, "must be positive"),
    "mesh.resolution": _Key(int, 16, lambda v: 2 <= v <= 64, "must lie in [2, 64]"),
    "time.T": _Key(float, None, _positive, "must be positive"),
    "time.steps": _Key(int, 128, lambda v: v >= 64, "must be at least 64 (dt ≤ T/64)"),
    "time.samples": _Key(int, 9, lambda v: v >= 1, "must be at least 1"),
    "time.anchors": _Key(_floats, (0.0,), lambda v: len(v) > 0, "must list at least one time"),
    "galerkin.m": _Key(int, 16, lambda v: 1 <= v <= 64, "must lie in [1, 64]"),
    "galerkin.max_iters": _Key(int, 50, lambda v: 1 <= v <= 500, "must lie in [1, 500]"),
    "cutoff.rho": _Key(float, 0.25, lambda v: 0 < v <= 0.5, "must lie in (0, 0.5]"),
    "cutoff.delta": _Key(float, 0.1, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "cutoff.d_star": _Key(float, 0.5, _positive, "must be positive"),
    "beta.kind": _Key(str, "none", lambda v: v in BETA_KINDS, f"must be one of {', '.join(BETA_KINDS)}"),
    "beta.flux": _Key(float, 0.0),
    "beta.modulation": _Key(float, 0.0, lambda v: abs(v) < 1, "must lie in (-1, 1)"),
    "forcing.kind": _Key(str, "none", lambda v: v in FORCING_KINDS, f"must be one of {', '.join(FORCING_KINDS)}"),
    "forcing.amplitude": _Key(float, 1.0),
    "tol.periodic": _Key(float, 1e-6, _positive, "must be positive"),
    "tol.solenoidal": _Key(float, 1e-6, _positive, "must be positive"),
    "tol.derivative_eps": _Key(float, 1e-2, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "probes.n": _Key(int, 8, lambda v: v >= 8, "must be at least 8"),
    "output.dir": _Key(str, "out"),
    "output.vtk_stride": _Key(int, 16, lambda v: v >= 1, "must be at least 1"),
}


@dataclass(frozen=True)
class RunConfig:
    """A validated scenario configuration.

    ``values`` holds every schema key with defaults filled in; the typed
    properties are views on it.
    """

    values: dict[str, Any]
    explicit: frozenset[str] = field(default_factory=frozenset)

    def __getitem__(self, key: str) -> Any:
        """Return the value of a dotted key."""
        return self.values[key]

    @property
    def scenario(self) -> str:
        """Selected scenario."""
        return self.values["scenario"]

    @property
    def resolution(self) -> int:
        """Mesh resolution."""
        return self.values["mesh.resolution"]

    @property
    def period_T(self) -> float:
        """Period of the time grid."""
        return self.values["time.T"]

    @property
    def steps(self) -> int:
        """Time steps per period."""
        return self.values["time.steps"]

    @property
    def dt(self) -> float:
        """Time step T/steps."""
        return self.period_T / self.steps

    @property
    def output_dir(self) -> Path:
        """Directory that receives the artifacts."""
        return Path(self.values["output.dir"])

    def motion_params(self) -> dict[str, float]:
        """Parameters handed to `make_motion`; radii default to the geometry's."""
        params = {"period": self.values["motion.period"]}
        for name in ("lambda0", "amplitude"):
            params[name] = self.values[f"motion.{name}"]
        params["R0"] = self.values["motion.R0"] if self.values["motion.R0"] is not None else self.values["geometry.R0"]
        params["R1"] = self.values["motion.R1"] if self.values["motion.R1"] is not None else self.values["geometry.R1"]
        return params

    def summary(self) -> dict[str, Any]:
        """Flat dictionary of every setting, for reports and traces."""
        return {key: list(value) if isinstance(value, tuple) else value for key, value in sorted(self.values.items())}


def _split_lines(text: str) -> tuple[dict[str, tuple[str, int]], list[tuple[int, str]]]:
    entries: dict[str, tuple[str, int]] = {}
    problems: list[tuple[int, str]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append((number, f"line {number}: expected 'key = value', got {raw.strip()!r}"))
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            problems.append((number, f"line {number}: empty key or value"))
        elif key in entries:
            problems.append((number, f"line {number}: duplicate key '{key}' (first on line {entries[key][1]})"))
        else:
            entries[key] = (value, number)
    return entries, problems


def parse_config(text: str) -> RunConfig:
    """Parse and validate a scenario file.

    Raises:
        ParseError: for malformed lines, with their line numbers.
        ValidationError: listing every unknown key, bad value and range violation.
    """
    entries, problems = _split_lines(text)
    if problems:
        raise ParseError("; ".join(message for _, message in problems), lines=[number for number, _ in problems])

    violations: list[str] = []
    values: dict[str, Any] = {key: entry.default for key, entry in _SCHEMA.items()}
    for key, (raw, number) in entries.items():
        entry = _SCHEMA.get(key)
        if entry is None:
            violations.append(f"{key} (line {number}): unknown key")
            continue
        try:
            value = entry.parse(raw)
        except ValueError:
            violations.append(f"{key} (line {number}): cannot read {raw!r} as {getattr(entry.parse, '__name__', 'value')}")
            continue
        if entry.check is not None and not entry.check(value):
            violations.append(f"{key} (line {number}): {entry.rule}, got {raw}")
            continue
        values[key] = value

    if values["scenario"] is None:
        violations.append(f"scenario: missing, must be one of {', '.join(SCENARIOS)}")
    if values["time.T"] is None:
        values["time.T"] = values["motion.period"]
    if values["geometry.kind"] == "annulus" and not values["geometry.R0"] > values["geometry.R1"]:
        violations.append(f"geometry.R0: must exceed geometry.R1, got {values['geometry.R0']} <= {values['geometry.R1']}")
    if values["geometry.kind"] == "torus" and not values["geometry.major_R"] > values["geometry.minor_r"]:
        violations.append("geometry.major_R: must exceed geometry.minor_r")
    if values["geometry.kind"] == "file" and not values["geometry.path"]:
        violations.append("geometry.path: required when geometry.kind = file")
    if values["motion.name"] == "pulsating_annulus" and values["geometry.kind"] != "annulus":
        violations.append("motion.name: pulsating_annulus needs geometry.kind = annulus")
    if values["motion.name"] == "dilation" and values["motion.amplitude"] >= values["motion.lambda0"]:
        violations.append("motion.amplitude: must be below motion.lambda0 so that λ(t) > 0")
    if values["motion.name"] != "identity":
        ratio = values["time.T"] / values["motion.period"]
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            violations.append(f"time.T: the motion period {values['motion.period']} must divide T = {values['time.T']}")
    if values["scenario"] == "solve-periodic" and values["beta.kind"] == "radial" and values["geometry.kind"] == "ball":
        violations.append("beta.kind: radial data needs a domain with an inner boundary")
    if violations:
        raise ValidationError(violations)
    return RunConfig(values=values, explicit=frozenset(entries))


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a scenario file; ``overrides`` are appended as extra ``key = value`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    if overrides:
        lines = [line for line in text.splitlines() if line.split("#", 1)[0].split("=", 1)[0].strip() not in overrides]
        text = "\n".join(lines + [f"{key} = {value}" for key, value in overrides.items()])
    return parse_config(text)
