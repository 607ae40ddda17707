"""One-step-horizon MPC over the gridded joint-angle density.

At each control step the controller predicts the density one step ahead
under candidate tendon tensions (drift/diffusion fields built from the
median parameters), scores the prediction by the plain nodewise
sum-of-squares distance to a fixed reference Gaussian, and box-constrains
the tensions to the actuator range.  The minimizer is a deterministic
multi-start Nelder-Mead search; exact ties (the antagonistic tendon pair
spans a torque null space) are broken toward the smallest tension vector.

The controller never measures the plant: it propagates its own nominal
trajectory (median parameters) to supply the running torque integral that
enters the reduced drift, so the emitted input sequence is pure
feedforward.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import Bounds, minimize

from .finger_model import (
    FingerGeometry,
    ParameterShapes,
    ReducedModel,
)
from .fpe_solver import (
    Grid2D,
    GridPdf,
    SchemeViolationError,
    gaussian_pdf,
    l2_distance,
    step_detailed,
)
from .integrate import nominal_trajectory_step

#: Scaled unit-cube corners used as deterministic optimizer restarts.
_RESTART_CORNERS = (
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 1.0, 1.0),
)


@dataclass(frozen=True)
class MpcConfig:
    """Controller timing, bounds, and optimizer settings."""

    dt: float = 0.1
    horizon_steps: int = 1
    total_time: float = 10.0
    input_lower: float = 0.0
    input_upper: float = 5.0
    optimizer_restarts: int = 4
    optimizer_tolerance: float = 1e-10
    optimizer_max_evals: int = 120

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.total_time < 0:
            raise ValueError("total_time must be nonnegative")
        if not (0 <= self.input_lower < self.input_upper):
            raise ValueError("need 0 <= input_lower < input_upper")
        if self.optimizer_restarts < 0:
            raise ValueError("optimizer_restarts must be >= 0")
        if self.optimizer_tolerance <= 0 or self.optimizer_max_evals < 10:
            raise ValueError("bad optimizer settings")

    @property
    def n_steps(self) -> int:
        return int(round(self.total_time / self.dt))


@dataclass(frozen=True)
class ReferenceSpec:
    """Mean and per-axis width of the reference Gaussian."""

    mu_ref: tuple[float, float]
    sigma_ref: tuple[float, float] = (0.05, 0.05)

    def __post_init__(self):
        if len(self.mu_ref) != 2 or len(self.sigma_ref) != 2:
            raise ValueError("mu_ref and sigma_ref must be 2-vectors")
        if any(s <= 0 for s in self.sigma_ref):
            raise ValueError("sigma_ref must be strictly positive")


@dataclass
class StepContext:
    """Everything one control step needs to score a candidate input."""

    model: ReducedModel
    mesh: np.ndarray
    p_k: GridPdf
    p_km1: GridPdf | None
    eta: np.ndarray
    reference: GridPdf
    config: MpcConfig
    warm_start: np.ndarray | None = None


@dataclass
class EpisodeResult:
    """Traces of one closed-prediction, open-loop run."""

    inputs: np.ndarray
    pdf_snapshots: list[GridPdf]
    objective_trace: np.ndarray
    nominal_state_trace: np.ndarray
    eta_trace: np.ndarray
    initial_objective: float
    final_objective: float
    mass_drifts: np.ndarray
    conservation_errors: np.ndarray
    min_values: np.ndarray
    euler_fallbacks: int
    wall_time: float


@dataclass
class SweepResult:
    """Final objectives over a grid of reference expectations."""

    mu_values: tuple[float, ...]
    finals: np.ndarray
    initials: np.ndarray


def build_reference(grid: Grid2D, spec: ReferenceSpec) -> GridPdf:
    """Reference Gaussian on the grid, unit discrete mass."""
    return gaussian_pdf(grid, spec.mu_ref, spec.sigma_ref)


def predict_objective(u: np.ndarray, context: StepContext) -> float:
    """Distance of the predicted density to the reference under input u.

    Advances the density ``horizon_steps`` implicit steps with u held
    constant; over the horizon the torque integral is propagated with the
    reduced (inertia-free) torque.  Pure function of its arguments.
    """
    u = np.asarray(u, dtype=float)
    cfg = context.config
    if np.any(u < cfg.input_lower - 1e-12) or np.any(u > cfg.input_upper + 1e-12):
        raise ValueError("candidate input violates the actuation bounds")
    p_k, p_km1 = context.p_k, context.p_km1
    eta = np.asarray(context.eta, dtype=float)
    for _ in range(cfg.horizon_steps):
        drift = context.model.drift(context.mesh, u, eta)
        diffusion = context.model.diffusion(context.mesh, u, eta)
        p_next, _ = step_detailed(p_k, p_km1, drift, diffusion, cfg.dt)
        p_km1, p_k = p_k, p_next
        eta = eta + cfg.dt * (context.model.coupling @ u)
    return l2_distance(p_k, context.reference)


def _initial_simplex(x0: np.ndarray, lower: float, upper: float) -> np.ndarray:
    """Fixed-size simplex around x0, reflected to stay inside the box."""
    span = 0.2 * (upper - lower)
    vertices = [x0]
    for i in range(x0.size):
        v = x0.copy()
        v[i] = v[i] + span if v[i] + span <= upper else v[i] - span
        vertices.append(v)
    return np.array(vertices)


def solve_step(context: StepContext) -> np.ndarray:
    """Box-constrained minimizer of the one-step predicted objective.

    Runs Nelder-Mead from the warm start, the box center, and a fixed list
    of box corners; near-equal optima are resolved toward the smallest
    input norm (then lexicographically) so results are deterministic.
    """
    cfg = context.config
    lo, up = cfg.input_lower, cfg.input_upper

    def objective(u):
        # A candidate that breaks the scheme (extreme tensions slamming
        # the density into the walls) is simply a terrible candidate.
        try:
            return predict_objective(np.clip(u, lo, up), context)
        except SchemeViolationError:
            return np.inf

    starts: list[np.ndarray] = []

    def add_start(u):
        u = np.clip(np.asarray(u, dtype=float), lo, up)
        if not any(np.allclose(u, s, atol=1e-9) for s in starts):
            starts.append(u)

    if context.warm_start is not None:
        add_start(context.warm_start)
    add_start(np.full(3, 0.5 * (lo + up)))
    for corner in _RESTART_CORNERS[: cfg.optimizer_restarts]:
        add_start(lo + np.asarray(corner) * (up - lo))

    candidates = []
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=Bounds(np.full(3, lo), np.full(3, up)),
            options={
                "maxfev": cfg.optimizer_max_evals,
                "xatol": 1e-4 * (up - lo),
                "fatol": cfg.optimizer_tolerance,
                "initial_simplex": _initial_simplex(x0, lo, up),
                "adaptive": False,
            },
        )
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            candidates.append((float(res.fun), np.clip(res.x, lo, up)))
    if not candidates:
        raise RuntimeError("every optimizer start failed to evaluate")

    best = min(j for j, _ in candidates)
    ties = [u for j, u in candidates if j <= best + cfg.optimizer_tolerance]
    ties.sort(key=lambda u: (np.linalg.norm(u), u[0], u[1], u[2]))
    return ties[0]


def run_episode(
    grid: Grid2D,
    geometry: FingerGeometry,
    shapes: ParameterShapes,
    config: MpcConfig,
    reference: ReferenceSpec,
    mu_ini=(0.0, 0.0),
    sigma_ini=(0.05, 0.05),
    keep_snapshots: bool = True,
) -> EpisodeResult:
    """Run one full open-loop episode of the density-shaping controller.

    Each control step: optimize the one-step input, advance the density
    with it, and advance the nominal full-model state (median parameters)
    to keep the torque integral consistent with the applied inputs.
    """
    t_start = time.perf_counter()
    model = ReducedModel(geometry, shapes)
    mesh = grid.mesh()
    ref = build_reference(grid, reference)
    p = gaussian_pdf(grid, np.asarray(mu_ini, float), np.asarray(sigma_ini, float))
    hist: GridPdf | None = None
    state8 = np.zeros(8)  # (q, q_dot, tau, eta), actual initial angles are 0

    n_steps = config.n_steps
    inputs = np.zeros((n_steps, 3))
    objective_trace = np.zeros(n_steps + 1)
    nominal_trace = np.zeros((n_steps + 1, 6))
    eta_trace = np.zeros((n_steps + 1, 2))
    mass_drifts = np.zeros(n_steps)
    conservation_errors = np.zeros(n_steps)
    min_values = np.zeros(n_steps)
    snapshots = [p.copy()]
    fallbacks = 0

    objective_trace[0] = l2_distance(p, ref)
    warm: np.ndarray | None = None
    for k in range(n_steps):
        ctx = StepContext(
            model=model,
            mesh=mesh,
            p_k=p,
            p_km1=hist,
            eta=state8[6:8].copy(),
            reference=ref,
            config=config,
            warm_start=warm,
        )
        u = solve_step(ctx)
        inputs[k] = u
        drift = model.drift(mesh, u, state8[6:8])
        diffusion = model.diffusion(mesh, u, state8[6:8])
        p_new, info = step_detailed(p, hist, drift, diffusion, config.dt)
        state8 = nominal_trajectory_step(state8, u, model.params, geometry, config.dt)

        hist, p = p, p_new
        warm = u
        objective_trace[k + 1] = l2_distance(p, ref)
        nominal_trace[k + 1] = state8[:6]
        eta_trace[k + 1] = state8[6:8]
        mass_drifts[k] = info.mass_drift
        conservation_errors[k] = info.conservation_error
        min_values[k] = info.min_value
        fallbacks += int(info.euler_fallback)
        if keep_snapshots:
            snapshots.append(p.copy())

    if not keep_snapshots and n_steps > 0:
        snapshots.append(p.copy())  # keep at least the terminal density

    return EpisodeResult(
        inputs=inputs,
        pdf_snapshots=snapshots,
        objective_trace=objective_trace,
        nominal_state_trace=nominal_trace,
        eta_trace=eta_trace,
        initial_objective=float(objective_trace[0]),
        final_objective=float(objective_trace[-1]),
        mass_drifts=mass_drifts,
        conservation_errors=conservation_errors,
        min_values=min_values,
        euler_fallbacks=fallbacks,
        wall_time=time.perf_counter() - t_start,
    )


def _sweep_cell(args) -> tuple[int, int, float, float]:
    i, j, mu1, mu2, sigma_ref, grid, geometry, shapes, config, mu_ini, sigma_ini = args
    result = run_episode(
        grid,
        geometry,
        shapes,
        config,
        ReferenceSpec(mu_ref=(mu1, mu2), sigma_ref=sigma_ref),
        mu_ini=mu_ini,
        sigma_ini=sigma_ini,
        keep_snapshots=False,
    )
    return i, j, result.initial_objective, result.final_objective


def reachability_sweep(
    grid: Grid2D,
    geometry: FingerGeometry,
    shapes: ParameterShapes,
    config: MpcConfig,
    mu_values: tuple[float, ...] = (-0.5, -0.3, 0.0, 0.3, 0.5),
    sigma_ref: tuple[float, float] = (0.05, 0.05),
    mu_ini=(0.0, 0.0),
    sigma_ini=(0.05, 0.05),
    workers: int = 1,
) -> SweepResult:
    """Final objective for every pair of reference expectations.

    Episodes are independent; with ``workers > 1`` they run in parallel
    processes with results identical to the serial order.
    """
    mu_values = tuple(float(v) for v in mu_values)
    n = len(mu_values)
    jobs = [
        (i, j, mu1, mu2, tuple(sigma_ref), grid, geometry, shapes, config,
         tuple(mu_ini), tuple(sigma_ini))
        for i, mu1 in enumerate(mu_values)
        for j, mu2 in enumerate(mu_values)
    ]
    finals = np.zeros((n, n))
    initials = np.zeros((n, n))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]
    for i, j, j0, jf in results:
        initials[i, j] = j0
        finals[i, j] = jf
    return SweepResult(mu_values=mu_values, finals=finals, initials=initials)
