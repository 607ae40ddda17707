"""Acceptance gate: every criterion at its stated tolerance.

Each criterion prints one PASS/FAIL line with the measured values before
asserting, so a red criterion still reports its numbers.  The controller
episodes and the Monte-Carlo ensemble are expensive; they run once per
session and are shared across criteria.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from fingerfpe.finger_model import (
    FingerGeometry,
    ParameterShapes,
    mass_matrix,
    median_params,
    nonlinear_term,
    coupling_matrix,
    param_jacobian,
    state_derivative,
)
from fingerfpe.fpe_mpc import MpcConfig, ReferenceSpec, reachability_sweep, run_episode
from fingerfpe.fpe_solver import (
    Grid2D,
    chang_cooper_delta,
    gaussian_pdf,
    gaussian_values,
    moments,
    step_detailed,
)
from fingerfpe.monte_carlo import confidence_report, run_ensemble, sample_parameter_matrix

GEOM = FingerGeometry()
SHAPES = ParameterShapes.default()
CASE1 = ReferenceSpec(mu_ref=(0.3, -0.5), sigma_ref=(0.05, 0.05))
ENSEMBLE_SEED = 12345


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def case1_episode():
    t0 = time.perf_counter()
    result = run_episode(Grid2D(), GEOM, SHAPES, MpcConfig(), CASE1)
    wall = time.perf_counter() - t0
    return result, wall


@pytest.fixture(scope="session")
def sweep_result():
    return reachability_sweep(
        Grid2D(), GEOM, SHAPES, MpcConfig(), workers=2
    )


@pytest.fixture(scope="session")
def case1_ensemble(case1_episode):
    result, _ = case1_episode
    t0 = time.perf_counter()
    ensemble = run_ensemble(
        SHAPES, GEOM, result.inputs, MpcConfig().dt,
        n_samples=200, seed=ENSEMBLE_SEED, dt_fine=1e-3,
    )
    wall = time.perf_counter() - t0
    return ensemble, wall


class TestCriterion1SolverConservation:
    def test_case1_conservation_positivity_runtime(self, case1_episode):
        # The conserved functional of the zero-flux scheme is the plain
        # node sum; its per-step drift must stay below 1e-6 (it is exact up
        # to solver roundoff).  The trapezoidal renormalization shift is
        # reported alongside for observability.
        result, wall = case1_episode
        max_cons = float(result.conservation_errors.max())
        min_value = float(result.min_values.min())
        passed = max_cons <= 1e-6 and min_value >= -1e-12 and wall < 120.0
        report(
            "1 (conservation/positivity)",
            passed,
            f"max conserved-sum drift {max_cons:.2e} (<= 1e-6), min value "
            f"{min_value:.2e} (>= -1e-12), max renorm shift "
            f"{result.mass_drifts.max():.2e}, runtime {wall:.0f}s (< 120s)",
        )
        assert max_cons <= 1e-6
        assert min_value >= -1e-12
        assert wall < 120.0


class TestCriterion2HeatKernel:
    def test_covariance_growth_matches_oracle(self):
        grid = Grid2D(lower=(-0.18, -0.18), upper=(0.18, 0.18), points_per_dim=25)
        n = grid.points_per_dim
        sigma0, a_val, t_end = 0.03, 2e-4, 1.0
        p = gaussian_pdf(grid, (0.0, 0.0), (sigma0, sigma0))
        drift = np.zeros((n, n, 2))
        a = np.zeros((n, n, 2, 2))
        a[..., 0, 0] = a[..., 1, 1] = a_val
        hist = None
        for _ in range(20):
            p_new, _ = step_detailed(p, hist, drift, a, dt=t_end / 20)
            hist, p = p, p_new
        _, cov = moments(p)

        # Dense-quadrature oracle: covariance of the analytic solution
        # truncated to the domain and renormalized (per axis; the density
        # is a product of independent Gaussians).
        var_t = sigma0**2 + a_val * t_end
        x = np.linspace(grid.lower[0], grid.upper[0], 4001)
        g = np.exp(-0.5 * x**2 / var_t)
        g /= np.trapezoid(g, x)
        var_oracle = float(np.trapezoid(x**2 * g, x))
        rel = np.abs(np.diag(cov) - var_oracle) / var_oracle
        passed = bool(np.all(rel < 0.02))
        report(
            "2 (heat kernel)",
            passed,
            f"cov diag {np.diag(cov)} vs oracle {var_oracle:.6g}, "
            f"rel err {rel.max():.2e} (< 2e-2)",
        )
        assert np.all(rel < 0.02)


class TestCriterion3OrnsteinUhlenbeck:
    THETA, A_VAL = 2.0, 2e-3

    def test_stationary_variance(self):
        grid = Grid2D(lower=(-0.24, -0.24), upper=(0.24, 0.24), points_per_dim=33)
        mesh = grid.mesh()
        p = gaussian_pdf(grid, (0.03, 0.0), (0.04, 0.04))
        drift = -self.THETA * mesh
        a = np.zeros((*grid.shape, 2, 2))
        a[..., 0, 0] = a[..., 1, 1] = self.A_VAL
        hist = None
        for _ in range(60):
            p_new, _ = step_detailed(p, hist, drift, a, dt=0.05)
            hist, p = p, p_new
        _, cov = moments(p)
        target = self.A_VAL / (2 * self.THETA)
        rel = np.abs(np.diag(cov) - target) / target
        passed = bool(np.all(rel < 0.05))
        report(
            "3a (OU stationary variance)",
            passed,
            f"cov diag {np.diag(cov)} vs a/(2 theta) {target:.4g}, "
            f"rel err {rel.max():.2e} (< 5e-2)",
        )
        assert np.all(rel < 0.05)

    def _transient_error(self, npts: int, dt: float, t_end: float = 0.5) -> float:
        grid = Grid2D(lower=(-0.3, -0.3), upper=(0.3, 0.3), points_per_dim=npts)
        mesh = grid.mesh()
        mu0 = np.array([0.03, -0.02])
        s_inf = math.sqrt(self.A_VAL / (2 * self.THETA))
        s0 = np.array([0.02, s_inf])
        p = gaussian_pdf(grid, mu0, s0)
        drift = -self.THETA * mesh
        a = np.zeros((npts, npts, 2, 2))
        a[..., 0, 0] = a[..., 1, 1] = self.A_VAL
        hist = None
        for _ in range(int(round(t_end / dt))):
            p_new, _ = step_detailed(p, hist, drift, a, dt)
            hist, p = p, p_new
        mu_t = mu0 * np.exp(-self.THETA * t_end)
        var_t = s_inf**2 + (s0**2 - s_inf**2) * np.exp(-2 * self.THETA * t_end)
        exact = gaussian_values(grid, mu_t, np.sqrt(var_t))
        exact /= (grid.trapezoid_weights() * exact).sum()
        return float(np.sqrt(np.sum((p.values - exact) ** 2)) * grid.spacing[0])

    def test_second_order_convergence(self):
        err_coarse = self._transient_error(41, 0.05)
        err_fine = self._transient_error(81, 0.025)
        ratio = err_coarse / err_fine
        passed = ratio >= 3.0
        report(
            "3b (OU refinement order)",
            passed,
            f"L2 error {err_coarse:.4g} -> {err_fine:.4g}, "
            f"reduction {ratio:.2f}x (>= 3x)",
        )
        assert ratio >= 3.0


class TestCriterion4Case1:
    def test_nominal_trajectory_inside_band_and_runtime(self, case1_episode):
        result, wall = case1_episode
        q_final = result.nominal_state_trace[-1, 0:2]
        mu = np.asarray(CASE1.mu_ref)
        half = 1.96 * np.asarray(CASE1.sigma_ref)
        inside = np.all(np.abs(q_final - mu) <= half)
        passed = bool(inside) and wall < 300.0
        report(
            "4a (case-1 nominal in 95% band)",
            passed,
            f"final q {q_final} vs band {mu} +- {half}, runtime {wall:.0f}s (< 300s)",
        )
        assert inside
        assert wall < 300.0

    def test_final_objective_below_ten_percent(self, case1_episode):
        result, _ = case1_episode
        ratio = result.final_objective / result.initial_objective
        passed = ratio < 0.10
        report(
            "4b (case-1 objective reduction)",
            passed,
            f"final/initial = {result.final_objective:.1f}/"
            f"{result.initial_objective:.1f} = {ratio:.1%} (< 10%); the"
            " parameter-noise floor of this model caps the ratio near 20%"
            " (see decisions ledger)",
        )
        assert ratio < 0.10


class TestCriterion5Reachability:
    @staticmethod
    def _cell(sweep, mu1, mu2):
        i = sweep.mu_values.index(mu1)
        j = sweep.mu_values.index(mu2)
        return sweep.finals[i, j], sweep.initials[i, j]

    def test_golden_regression(self, sweep_result):
        golden = {}
        with open("tests/golden/sweep_golden.csv") as fh:
            next(fh)
            for line in fh:
                m1, m2, j0, jf = (float(t) for t in line.split(","))
                golden[(m1, m2)] = jf
        worst = 0.0
        for (m1, m2), jf_gold in golden.items():
            jf, _ = self._cell(sweep_result, m1, m2)
            tol = max(0.10 * jf_gold, 1e-3)
            worst = max(worst, abs(jf - jf_gold) / max(jf_gold, 1e-3))
            assert abs(jf - jf_gold) <= tol, (m1, m2, jf, jf_gold)
        report(
            "5a (sweep vs golden regression)",
            True,
            f"25 cells within 10% of the frozen baseline "
            f"(worst rel dev {worst:.2e})",
        )

    def test_reachability_ordering(self, sweep_result):
        hard, _ = self._cell(sweep_result, -0.5, 0.5)
        easy, _ = self._cell(sweep_result, 0.3, -0.3)
        mid, mid_init = self._cell(sweep_result, 0.5, 0.3)
        factor = hard / easy
        in_between = easy <= mid <= hard
        below_half = mid < 0.5 * mid_init
        passed = factor >= 5.0 and in_between and below_half
        report(
            "5b (reachability ordering)",
            passed,
            f"unreachable/easy = {hard:.0f}/{easy:.0f} = {factor:.2f}x (>= 5x), "
            f"mid cell {mid:.0f} in [{easy:.0f}, {hard:.0f}]: {in_between}, "
            f"mid below 50% of initial {mid_init:.0f}: {below_half}; the"
            " transit-phase noise floor compresses the spread (see ledger)",
        )
        assert below_half
        assert factor >= 5.0
        assert in_between


class TestCriterion6VarianceShaping:
    def test_narrow_reference_is_harder(self, sweep_result):
        narrow = run_episode(
            Grid2D(), GEOM, SHAPES, MpcConfig(),
            ReferenceSpec(mu_ref=(0.3, -0.3), sigma_ref=(0.03, 0.03)),
            keep_snapshots=False,
        )
        i = sweep_result.mu_values.index(0.3)
        j = sweep_result.mu_values.index(-0.3)
        matched = sweep_result.finals[i, j]
        passed = narrow.final_objective > matched
        report(
            "6 (variance shaping harder)",
            passed,
            f"final objective {narrow.final_objective:.1f} (sigma_ref 0.03) > "
            f"{matched:.1f} (sigma_ref 0.05)",
        )
        assert narrow.final_objective > matched


class TestCriterion7MonteCarlo:
    def test_divergence_runtime_reproducibility(self, case1_episode, case1_ensemble):
        ensemble, wall = case1_ensemble
        frac_diverged = ensemble.diverged.mean()
        result, _ = case1_episode
        small_a = run_ensemble(SHAPES, GEOM, result.inputs[:20], 0.1,
                               n_samples=20, seed=ENSEMBLE_SEED)
        small_b = run_ensemble(SHAPES, GEOM, result.inputs[:20], 0.1,
                               n_samples=20, seed=ENSEMBLE_SEED)
        identical = np.array_equal(small_a.trajectories, small_b.trajectories)
        passed = frac_diverged <= 0.05 and wall < 600.0 and identical
        report(
            "7a (ensemble health)",
            passed,
            f"diverged {ensemble.diverged.sum()}/200 (<= 5%), runtime "
            f"{wall:.0f}s (< 600s), fixed-seed repetition bit-identical: "
            f"{identical}",
        )
        assert frac_diverged <= 0.05
        assert wall < 600.0
        assert identical

    def test_band_fraction(self, case1_ensemble):
        ensemble, _ = case1_ensemble
        rep = confidence_report(ensemble, CASE1.mu_ref, CASE1.sigma_ref)
        passed = bool(np.all(rep.fraction_final_inside >= 0.85))
        report(
            "7b (95% band fraction)",
            passed,
            f"inside fractions {rep.fraction_final_inside} (>= 0.85 per "
            "joint); the physical across-sample dispersion of this model "
            "(final-angle std ~0.17-0.19 rad) exceeds the +-0.098 rad band "
            "(see ledger)",
        )
        assert np.all(rep.fraction_final_inside >= 0.85)


class TestCriterion8PropertySuite:
    def test_unit_level_properties(self, case1_episode):
        rng = np.random.default_rng(8)
        params = median_params(SHAPES)

        # Exponential-fitting weight identities.
        assert chang_cooper_delta(0.0) == pytest.approx(0.5)
        for w in (0.1, 1.0, 10.0):
            assert chang_cooper_delta(w) + chang_cooper_delta(-w) == pytest.approx(1.0)
            assert 0.0 < chang_cooper_delta(w) < 1.0

        # Inertia matrix symmetric positive definite.
        for _ in range(100):
            m = mass_matrix(rng.uniform(-np.pi, np.pi, 2), GEOM)
            assert m[0, 1] == m[1, 0] and np.all(np.linalg.eigvalsh(m) > 0)

        # Dynamics self-consistency (backward-error scaled).
        a, b, c, d = params.joint_coeffs()
        for _ in range(20):
            x = rng.normal(scale=0.3, size=6)
            u = rng.uniform(0, 5, 3)
            xdot = state_derivative(x, u, params, GEOM)
            line1 = (
                mass_matrix(x[0:2], GEOM) @ xdot[2:4]
                + nonlinear_term(x[0:2], x[2:4], GEOM)
                + x[4:6]
                - coupling_matrix(x[0:2], GEOM) @ u
            )
            line2 = a * xdot[2:4] + b * x[2:4] - c * xdot[4:6] - d * x[4:6]
            scale = np.maximum(
                1.0,
                np.abs(a * xdot[2:4]) + np.abs(b * x[2:4])
                + np.abs(c * xdot[4:6]) + np.abs(d * x[4:6]),
            )
            assert np.linalg.norm(line1) < 1e-12
            assert np.all(np.abs(line2) / scale < 1e-12)

        # Parameter-Jacobian central differences are second order.
        x = rng.normal(scale=0.3, size=6)
        u = np.array([2.0, 1.0, 0.3])
        j1 = param_jacobian(x, u, params, GEOM, log_step=1e-3)
        j2 = param_jacobian(x, u, params, GEOM, log_step=5e-4)
        j4 = param_jacobian(x, u, params, GEOM, log_step=2.5e-4)
        richardson = (4.0 * j4 - j2) / 3.0
        order = np.log2(
            np.linalg.norm(j1 - richardson) / np.linalg.norm(j2 - richardson)
        )
        assert 1.7 < order < 2.3

        # Every emitted input within the actuation box.
        result, _ = case1_episode
        assert np.all(result.inputs >= 0.0) and np.all(result.inputs <= 5.0)

        # Log-draws pass the KS test at the 1% level.
        draws = sample_parameter_matrix(SHAPES, 10_000, seed=314)
        mu, sigma = SHAPES.mu_vector(), SHAPES.sigma_vector()
        for col in range(6):
            stat = stats.kstest(
                np.log(draws[:, col]), "norm", args=(mu[col], sigma[col])
            ).statistic
            assert stat < 1.6276 / math.sqrt(10_000)

        report(
            "8 (unit property suite)",
            True,
            "delta identities, SPD inertia, dynamics residuals, Jacobian "
            "order, input bounds, KS sampling all hold",
        )
