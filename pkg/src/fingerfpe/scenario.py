"""Scenario files: a small key = value format with exhaustive defaults.

A scenario fully describes one experiment; defaults reproduce the standard
case-study setup, so the shipped scenario files are a handful of lines.
Values are scalars, integers, or comma-separated vectors:

    # target expectations, one per joint
    mu_ref = 0.3, -0.5
    sigma_ref = 0.05, 0.05

Unknown keys, wrong arities, and out-of-range values are rejected with the
offending key and line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .finger_model import (
    DEFAULT_SHAPE_TABLE,
    FingerGeometry,
    LogNormalShape,
    ParameterShapes,
)
from .fpe_mpc import MpcConfig, ReferenceSpec
from .fpe_solver import Grid2D


class ScenarioError(ValueError):
    """A scenario file failed to parse or validate."""


def _pair(table_key: str, index: int) -> tuple[float, float]:
    table = DEFAULT_SHAPE_TABLE[table_key]
    return (table[0][index], table[1][index])


@dataclass
class Scenario:
    """One experiment: model, grid, controller, reference, and ensemble."""

    mu_ref: tuple[float, float] = None  # required; no meaningful default
    sigma_ref: tuple[float, float] = (0.05, 0.05)
    mu_ini: tuple[float, float] = (0.0, 0.0)
    sigma_ini: tuple[float, float] = (0.05, 0.05)

    grid_lower: tuple[float, float] = (-1.5, -1.5)
    grid_upper: tuple[float, float] = (1.5, 1.5)
    grid_points: int = 21

    dt: float = 0.1
    total_time: float = 10.0
    input_lower: float = 0.0
    input_upper: float = 5.0
    horizon_steps: int = 1
    optimizer_restarts: int = 4
    optimizer_tolerance: float = 1e-10
    optimizer_max_evals: int = 120

    link_length: float = 30e-3
    joint_length: float = 15e-3
    tendon_offsets: tuple[float, float, float] = (8e-3, 5e-3, 8e-3)
    link_mass: float = 5e-3
    link_inertia: float | None = None

    kv_mu: tuple[float, float] = _pair("k_v", 0)
    kv_sigma: tuple[float, float] = _pair("k_v", 1)
    cv_mu: tuple[float, float] = _pair("c_v", 0)
    cv_sigma: tuple[float, float] = _pair("c_v", 1)
    cp_mu: tuple[float, float] = _pair("c_p", 0)
    cp_sigma: tuple[float, float] = _pair("c_p", 1)

    sweep_mu_values: tuple[float, ...] = (-0.5, -0.3, 0.0, 0.3, 0.5)
    ensemble_size: int = 200
    seed: int = 12345
    dt_fine: float = 1e-3

    def grid(self) -> Grid2D:
        return Grid2D(
            lower=self.grid_lower, upper=self.grid_upper,
            points_per_dim=self.grid_points,
        )

    def geometry(self) -> FingerGeometry:
        return FingerGeometry(
            link_length=self.link_length,
            joint_length=self.joint_length,
            tendon_offsets=self.tendon_offsets,
            link_mass=self.link_mass,
            link_inertia=self.link_inertia,
        )

    def shapes(self) -> ParameterShapes:
        mk = lambda mus, sigmas: tuple(
            LogNormalShape(m, s) for m, s in zip(mus, sigmas)
        )
        return ParameterShapes(
            k_v=mk(self.kv_mu, self.kv_sigma),
            c_v=mk(self.cv_mu, self.cv_sigma),
            c_p=mk(self.cp_mu, self.cp_sigma),
        )

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(
            dt=self.dt,
            horizon_steps=self.horizon_steps,
            total_time=self.total_time,
            input_lower=self.input_lower,
            input_upper=self.input_upper,
            optimizer_restarts=self.optimizer_restarts,
            optimizer_tolerance=self.optimizer_tolerance,
            optimizer_max_evals=self.optimizer_max_evals,
        )

    def reference(self) -> ReferenceSpec:
        return ReferenceSpec(mu_ref=self.mu_ref, sigma_ref=self.sigma_ref)


_VECTOR_KEYS = {
    "mu_ref": 2, "sigma_ref": 2, "mu_ini": 2, "sigma_ini": 2,
    "grid_lower": 2, "grid_upper": 2, "tendon_offsets": 3,
    "kv_mu": 2, "kv_sigma": 2, "cv_mu": 2, "cv_sigma": 2,
    "cp_mu": 2, "cp_sigma": 2, "sweep_mu_values": None,
}
_INT_KEYS = {
    "grid_points", "horizon_steps", "optimizer_restarts",
    "optimizer_max_evals", "ensemble_size", "seed",
}
_FLOAT_KEYS = {
    "dt", "total_time", "input_lower", "input_upper", "optimizer_tolerance",
    "link_length", "joint_length", "link_mass", "link_inertia", "dt_fine",
}
_POSITIVE_KEYS = {
    "sigma_ref", "sigma_ini", "dt", "tendon_offsets", "link_length",
    "joint_length", "link_mass", "link_inertia", "dt_fine",
    "optimizer_tolerance",
}
_NONNEGATIVE_KEYS = {"kv_sigma", "cv_sigma", "cp_sigma", "total_time"}


def parse_scenario_text(text: str, source: str = "<string>") -> Scenario:
    """Parse scenario text into a fully-defaulted Scenario."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"{source}:{lineno}: expected 'key = value'")
        key, _, payload = line.partition("=")
        key, payload = key.strip(), payload.strip()
        if key in values:
            raise ScenarioError(f"{source}:{lineno}: duplicate key '{key}'")
        if key in _VECTOR_KEYS:
            arity = _VECTOR_KEYS[key]
            try:
                vec = tuple(float(tok) for tok in payload.split(","))
            except ValueError:
                raise ScenarioError(
                    f"{source}:{lineno}: key '{key}' needs numeric values"
                ) from None
            if arity is not None and len(vec) != arity:
                raise ScenarioError(
                    f"{source}:{lineno}: key '{key}' needs {arity} values, "
                    f"got {len(vec)}"
                )
            values[key] = vec
        elif key in _INT_KEYS:
            try:
                values[key] = int(payload)
            except ValueError:
                raise ScenarioError(
                    f"{source}:{lineno}: key '{key}' needs an integer"
                ) from None
        elif key in _FLOAT_KEYS:
            if key == "link_inertia" and payload.lower() == "auto":
                values[key] = None
                continue
            try:
                values[key] = float(payload)
            except ValueError:
                raise ScenarioError(
                    f"{source}:{lineno}: key '{key}' needs a number"
                ) from None
        else:
            raise ScenarioError(f"{source}:{lineno}: unknown key '{key}'")
        _check_range(key, values[key], source, lineno)

    if "mu_ref" not in values:
        raise ScenarioError(f"{source}: missing required key 'mu_ref'")
    scenario = Scenario(**values)
    _validate(scenario, source)
    return scenario


def _check_range(key: str, value, source: str, lineno: int) -> None:
    items = value if isinstance(value, tuple) else (value,)
    if key in _POSITIVE_KEYS and any(
        v is not None and v <= 0 for v in items
    ):
        raise ScenarioError(
            f"{source}:{lineno}: key '{key}' must be strictly positive"
        )
    if key in _NONNEGATIVE_KEYS and any(v < 0 for v in items):
        raise ScenarioError(f"{source}:{lineno}: key '{key}' must be >= 0")


def _validate(scenario: Scenario, source: str) -> None:
    from .fpe_solver import gaussian_pdf

    try:
        grid = scenario.grid()
        scenario.geometry()
        scenario.shapes()
        scenario.mpc_config()
        scenario.reference()
        # Both Gaussians must actually fit the grid; catching this here
        # turns a bad configuration into a parse-time diagnostic.
        gaussian_pdf(grid, scenario.mu_ref, scenario.sigma_ref)
        gaussian_pdf(grid, scenario.mu_ini, scenario.sigma_ini)
    except ValueError as exc:
        raise ScenarioError(f"{source}: {exc}") from exc
    if scenario.ensemble_size < 1:
        raise ScenarioError(f"{source}: key 'ensemble_size' must be >= 1")
    steps = scenario.dt / scenario.dt_fine
    if abs(steps - round(steps)) > 1e-9:
        raise ScenarioError(f"{source}: key 'dt_fine' must divide dt")


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario_text(text, source=str(path))


def serialize_scenario(scenario: Scenario) -> str:
    """Canonical full echo; parsing it reproduces the scenario exactly."""
    lines = []
    for f in fields(Scenario):
        value = getattr(scenario, f.name)
        if value is None:
            rendered = "auto"
        elif isinstance(value, tuple):
            rendered = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            rendered = repr(value)
        elif isinstance(value, int):
            rendered = repr(value)
        else:
            rendered = repr(float(value))
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
