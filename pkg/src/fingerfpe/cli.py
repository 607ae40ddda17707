"""Command-line front end: run episodes, sweeps, and validation.

Subcommands
-----------
run       one controller episode, writes inputs/objective/state/density CSVs
sweep     the reference-expectation grid, writes sweep.csv (resumable)
validate  Monte-Carlo ensemble under a previous run's inputs

All artifacts are plain UTF-8 CSV plus a manifest echoing the scenario.
Exit codes: 0 success, 2 scenario error, 3 numeric failure, 4 validation
error, 1 unexpected.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fpe_mpc import ReferenceSpec, run_episode
from .fpe_solver import SchemeViolationError
from .monte_carlo import confidence_report, run_ensemble
from .scenario import Scenario, ScenarioError, parse_scenario, serialize_scenario

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_NUMERIC = 3
EXIT_VALIDATION = 4

OUTPUT_ROOT_ENV = "FINGERFPE_OUTPUT_ROOT"


class ValidationError(ValueError):
    """Bad command usage or inconsistent artifacts."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    # Write-then-rename so an interrupted run never leaves partial files
    # (sweep resumption trusts any cell file that exists).
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, scenario: Scenario, command: str, wall: float) -> None:
    lines = [
        f"tool = fingerfpe {__version__}",
        f"command = {command}",
        f"wall_time_s = {wall:.3f}",
        f"created = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        "",
        "[scenario]",
        serialize_scenario(scenario).rstrip("\n"),
    ]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_output(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def cmd_run(scenario_path: str, out_arg: str | None) -> int:
    scenario = parse_scenario(scenario_path)
    out_dir = _resolve_output(out_arg, f"run-{Path(scenario_path).stem}")

    t0 = time.perf_counter()
    result = run_episode(
        scenario.grid(),
        scenario.geometry(),
        scenario.shapes(),
        scenario.mpc_config(),
        scenario.reference(),
        mu_ini=scenario.mu_ini,
        sigma_ini=scenario.sigma_ini,
    )
    wall = time.perf_counter() - t0

    out_dir.mkdir(parents=True, exist_ok=True)
    dt = scenario.dt
    _write_csv(
        out_dir / "inputs.csv",
        ["step", "t", "u1", "u2", "u3"],
        ((k, k * dt, *result.inputs[k]) for k in range(result.inputs.shape[0])),
    )
    _write_csv(
        out_dir / "objective.csv",
        ["step", "t", "objective"],
        ((k, k * dt, result.objective_trace[k])
         for k in range(result.objective_trace.size)),
    )
    _write_csv(
        out_dir / "nominal_state.csv",
        ["step", "t", "q1", "q2", "qd1", "qd2", "tau1", "tau2", "eta1", "eta2"],
        ((k, k * dt, *result.nominal_state_trace[k], *result.eta_trace[k])
         for k in range(result.nominal_state_trace.shape[0])),
    )
    mesh = scenario.grid().mesh().reshape(-1, 2)
    for k, snap in enumerate(result.pdf_snapshots):
        _write_csv(
            out_dir / f"pdf_{k:03d}.csv",
            ["q1", "q2", "value"],
            np.column_stack([mesh, snap.values.reshape(-1)]),
        )
    _write_manifest(out_dir, scenario, "run", wall)
    print(f"run: {result.inputs.shape[0]} steps, final objective "
          f"{result.final_objective:.6g} ({result.final_objective / result.initial_objective:.1%} "
          f"of initial), artifacts in {out_dir}")
    return EXIT_OK


def _cell_name(mu1: float, mu2: float) -> str:
    return f"cell_{mu1:+.3f}_{mu2:+.3f}.csv"


def cmd_sweep(scenario_path: str, out_arg: str | None, workers: int) -> int:
    scenario = parse_scenario(scenario_path)
    out_dir = _resolve_output(out_arg, f"sweep-{Path(scenario_path).stem}")
    out_dir.mkdir(parents=True, exist_ok=True)

    mu_values = scenario.sweep_mu_values
    cells = [(m1, m2) for m1 in mu_values for m2 in mu_values]
    pending = [c for c in cells if not (out_dir / _cell_name(*c)).exists()]
    t0 = time.perf_counter()

    def job_args(cell):
        m1, m2 = cell
        return (scenario, m1, m2)

    if workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (m1, m2), row in zip(
                pending, pool.map(_sweep_cell_worker, map(job_args, pending))
            ):
                _write_csv(out_dir / _cell_name(m1, m2),
                           ["mu1", "mu2", "initial_objective", "final_objective"],
                           [row])
    else:
        for cell in pending:
            m1, m2 = cell
            row = _sweep_cell_worker(job_args(cell))
            _write_csv(out_dir / _cell_name(m1, m2),
                       ["mu1", "mu2", "initial_objective", "final_objective"],
                       [row])

    rows = []
    for m1, m2 in cells:
        payload = (out_dir / _cell_name(m1, m2)).read_text().splitlines()[1]
        vals = [float(tok) for tok in payload.split(",")]
        rows.append((vals[0], vals[1], vals[3]))
    _write_csv(out_dir / "sweep.csv", ["mu1", "mu2", "final_objective"], rows)
    _write_manifest(out_dir, scenario, "sweep", time.perf_counter() - t0)
    print(f"sweep: {len(cells)} cells ({len(pending)} computed, "
          f"{len(cells) - len(pending)} reused), results in {out_dir}")
    return EXIT_OK


def _sweep_cell_worker(args) -> tuple[float, float, float, float]:
    scenario, m1, m2 = args
    result = run_episode(
        scenario.grid(),
        scenario.geometry(),
        scenario.shapes(),
        scenario.mpc_config(),
        ReferenceSpec(mu_ref=(m1, m2), sigma_ref=scenario.sigma_ref),
        mu_ini=scenario.mu_ini,
        sigma_ini=scenario.sigma_ini,
        keep_snapshots=False,
    )
    return (m1, m2, result.initial_objective, result.final_objective)


def _load_inputs(episode_dir: Path) -> np.ndarray:
    path = episode_dir / "inputs.csv"
    if not path.exists():
        raise ValidationError(f"no inputs.csv under {episode_dir}")
    rows = path.read_text().splitlines()[1:]
    try:
        data = np.array([[float(tok) for tok in row.split(",")] for row in rows])
    except ValueError as exc:
        raise ValidationError(f"{path} is not a valid input trace: {exc}") from exc
    if data.size == 0 or data.ndim != 2 or data.shape[1] != 5:
        raise ValidationError(f"{path} does not hold step,t,u1,u2,u3 rows")
    return data[:, 2:5]


def cmd_validate(
    scenario_path: str,
    episode_dir: str,
    out_arg: str | None,
    samples: int | None,
    seed: int | None,
) -> int:
    scenario = parse_scenario(scenario_path)
    n_samples = scenario.ensemble_size if samples is None else samples
    if n_samples < 1:
        raise ValidationError("ensemble size must be at least 1")
    use_seed = scenario.seed if seed is None else seed
    episode = Path(episode_dir)
    out_dir = _resolve_output(out_arg, f"validate-{Path(scenario_path).stem}")
    inputs = _load_inputs(episode)

    t0 = time.perf_counter()
    ensemble = run_ensemble(
        scenario.shapes(), scenario.geometry(), inputs, scenario.dt,
        n_samples=n_samples, seed=use_seed, dt_fine=scenario.dt_fine,
    )
    report = confidence_report(ensemble, scenario.mu_ref, scenario.sigma_ref)
    wall = time.perf_counter() - t0

    out_dir.mkdir(parents=True, exist_ok=True)
    finals = ensemble.trajectories[:, -1, 0:2]
    lo, hi = report.band_lower, report.band_upper
    rows = []
    for i in range(ensemble.n_samples):
        inside = [
            int(lo[j] <= finals[i, j] <= hi[j]) for j in range(2)
        ]
        rows.append((i, *ensemble.params[i], finals[i, 0], finals[i, 1],
                     inside[0], inside[1], int(ensemble.diverged[i])))
    _write_csv(
        out_dir / "ensemble_finals.csv",
        ["sample", "kv1", "kv2", "cv1", "cv2", "cp1", "cp2",
         "q1_final", "q2_final", "inside1", "inside2", "diverged"],
        rows,
    )
    summary = [
        f"samples = {ensemble.n_samples}",
        f"seed = {use_seed}",
        f"diverged = {report.n_diverged}",
        f"band_joint1 = [{_fmt(lo[0])}, {_fmt(hi[0])}]",
        f"band_joint2 = [{_fmt(lo[1])}, {_fmt(hi[1])}]",
        f"fraction_inside_joint1 = {_fmt(report.fraction_final_inside[0])}",
        f"fraction_inside_joint2 = {_fmt(report.fraction_final_inside[1])}",
    ]
    (out_dir / "confidence.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    _write_manifest(out_dir, scenario, "validate", wall)
    print(f"validate: {ensemble.n_samples} samples, inside fractions "
          f"{report.fraction_final_inside[0]:.2f}/{report.fraction_final_inside[1]:.2f}, "
          f"{report.n_diverged} diverged, artifacts in {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fingerfpe",
        description="Density-shaping MPC for a stochastic tendon-driven soft finger",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one controller episode")
    p_run.add_argument("scenario")
    p_run.add_argument("-o", "--output", default=None)

    p_sweep = sub.add_parser("sweep", help="sweep the reference expectations")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("-o", "--output", default=None)
    p_sweep.add_argument("--workers", type=int, default=1)

    p_val = sub.add_parser("validate", help="Monte-Carlo check of a prior run")
    p_val.add_argument("scenario")
    p_val.add_argument("--episode", required=True)
    p_val.add_argument("-o", "--output", default=None)
    p_val.add_argument("--samples", type=int, default=None)
    p_val.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.output)
        if args.command == "sweep":
            return cmd_sweep(args.scenario, args.output, args.workers)
        if args.command == "validate":
            return cmd_validate(
                args.scenario, args.episode, args.output, args.samples, args.seed
            )
        raise AssertionError("unreachable")
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (SchemeViolationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, RuntimeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
