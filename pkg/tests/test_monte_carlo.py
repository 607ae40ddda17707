"""Unit tests of parameter sampling and ensemble integration."""

import numpy as np
import pytest
from scipy import stats

from fingerfpe.finger_model import (
    FingerGeometry,
    LogNormalShape,
    ParameterShapes,
    median_params,
)
from fingerfpe.integrate import rk4_batch, spectral_bound, substep_count
from fingerfpe.monte_carlo import (
    SampledEnsemble,
    confidence_report,
    run_ensemble,
    sample_parameter_matrix,
    sample_parameters,
    simulate_trajectory,
)

GEOM = FingerGeometry()
SHAPES = ParameterShapes.default()

#: Heavy-link geometry: drops the stiff torque mode by two orders of
#: magnitude so short integration tests stay fast.
HEAVY = FingerGeometry(link_mass=0.5)


def degenerate_shapes() -> ParameterShapes:
    zero = lambda pair: tuple(LogNormalShape(s.mu, 0.0) for s in pair)
    return ParameterShapes(
        k_v=zero(SHAPES.k_v), c_v=zero(SHAPES.c_v), c_p=zero(SHAPES.c_p)
    )


class TestSampling:
    def test_zero_sigma_returns_medians(self):
        drawn = sample_parameters(degenerate_shapes(), seed_or_rng=3)
        assert drawn.as_vector() == pytest.approx(
            median_params(SHAPES).as_vector(), rel=1e-15
        )

    def test_all_draws_positive(self):
        draws = sample_parameter_matrix(SHAPES, 500, seed=11)
        assert np.all(draws > 0)

    def test_log_mean_within_clt_band(self):
        n = 10_000
        draws = sample_parameter_matrix(SHAPES, n, seed=2024)
        log_kv1 = np.log(draws[:, 0])
        assert abs(log_kv1.mean() - (-2.81)) <= 3 * 0.0918 / np.sqrt(n)

    def test_log_draws_pass_ks_at_one_percent(self):
        n = 10_000
        draws = sample_parameter_matrix(SHAPES, n, seed=99)
        mu, sigma = SHAPES.mu_vector(), SHAPES.sigma_vector()
        for col in range(6):
            stat = stats.kstest(
                np.log(draws[:, col]), "norm", args=(mu[col], sigma[col])
            ).statistic
            assert stat < 1.6276 / np.sqrt(n)  # asymptotic 1% critical value

    def test_reproducible_and_stream_per_sample(self):
        a = sample_parameter_matrix(SHAPES, 40, seed=5)
        b = sample_parameter_matrix(SHAPES, 40, seed=5)
        assert np.array_equal(a, b)
        # Prefixes agree: sample i does not depend on the ensemble size.
        c = sample_parameter_matrix(SHAPES, 10, seed=5)
        assert np.array_equal(a[:10], c)

    def test_rejects_empty_ensemble(self):
        with pytest.raises(ValueError):
            sample_parameter_matrix(SHAPES, 0, seed=1)


class TestIntegrator:
    def test_zero_input_stays_at_rest(self):
        params = median_params(SHAPES)
        traj, diverged = simulate_trajectory(
            params, np.zeros((5, 3)), dt=0.1, geometry=GEOM
        )
        assert not diverged
        assert traj[-1] == pytest.approx(np.zeros(6), abs=1e-15)

    def test_substeps_keep_stiff_model_stable(self):
        pv = median_params(SHAPES).as_vector()[None, :]
        lam = spectral_bound(pv, GEOM)
        assert lam[0] > 1e4  # gram-scale links are genuinely stiff
        n_sub = substep_count(pv, GEOM, 1e-3)
        _, diverged = rk4_batch(
            np.zeros((1, 8)), np.array([1.0, 0.5, 0.2]), pv, GEOM, 0.5, 1e-3, n_sub
        )
        assert not diverged[0]

    def test_plain_milli_second_step_diverges(self):
        # Without substepping the fast torque mode sits far outside the
        # RK4 stability region; the run must be flagged, not NaN-silent.
        pv = median_params(SHAPES).as_vector()[None, :]
        states, diverged = rk4_batch(
            np.zeros((1, 8)), np.array([1.0, 0.0, 0.0]), pv, GEOM, 0.1, 1e-3, 1
        )
        assert diverged[0]
        assert np.all(np.isfinite(states))

    def test_halving_dt_fine_changes_little(self):
        params = median_params(SHAPES)
        inputs = np.tile([2.0, 0.5, 1.0], (10, 1))
        t1, d1 = simulate_trajectory(params, inputs, 0.1, GEOM, dt_fine=1e-3)
        t2, d2 = simulate_trajectory(params, inputs, 0.1, GEOM, dt_fine=5e-4)
        assert not d1 and not d2
        assert np.abs(t1[-1, 0:2] - t2[-1, 0:2]).max() < 1e-6

    def test_against_reference_integrator(self):
        from fingerfpe.integrate import nominal_trajectory_step

        params = median_params(SHAPES)
        inputs = np.tile([1.0, 0.0, 0.5], (5, 1))
        traj, diverged = simulate_trajectory(params, inputs, 0.1, GEOM)
        assert not diverged
        state8 = np.zeros(8)
        for k in range(5):
            state8 = nominal_trajectory_step(state8, inputs[k], params, GEOM, 0.1)
        assert traj[-1] == pytest.approx(state8[:6], abs=1e-9)

    def test_dt_fine_must_divide_dt(self):
        with pytest.raises(ValueError):
            simulate_trajectory(
                median_params(SHAPES), np.zeros((2, 3)), 0.1, GEOM, dt_fine=3e-4
            )


class TestEnsemble:
    def test_bit_identical_for_fixed_seed(self):
        inputs = np.tile([1.0, 0.2, 0.4], (5, 1))
        a = run_ensemble(SHAPES, HEAVY, inputs, 0.1, n_samples=8, seed=7)
        b = run_ensemble(SHAPES, HEAVY, inputs, 0.1, n_samples=8, seed=7)
        assert np.array_equal(a.params, b.params)
        assert np.array_equal(a.trajectories, b.trajectories)
        assert np.array_equal(a.diverged, b.diverged)

    def test_dissipative_bound_under_zero_input(self):
        ens = run_ensemble(
            SHAPES, HEAVY, np.zeros((20, 3)), 0.1, n_samples=16, seed=21
        )
        assert not ens.diverged.any()
        assert np.abs(ens.trajectories[:, :, 0:2]).max() < 1e-12

    def test_unforced_motion_stays_bounded_from_excited_state(self):
        # Passive dissipation: released from a deflected, spinning state
        # with zero tension the joints coast a finite distance (there is
        # no spring to ground, so a velocity impulse becomes a permanent
        # offset of order q_dot / (b/a)) while the velocity decays away.
        draws = sample_parameter_matrix(SHAPES, 16, seed=33)
        nsub = substep_count(draws, HEAVY, 1e-3)
        states = np.zeros((16, 8))
        states[:, 0:2] = [0.4, -0.3]
        states[:, 2:4] = [1.0, -2.0]
        states[:, 4:6] = [0.02, -0.01]
        v0 = np.abs(states[:, 2:4]).max(axis=1)
        peak = 0.0
        diverged = np.zeros(16, dtype=bool)
        for _ in range(30):
            states, d = rk4_batch(
                states, np.zeros(3), draws, HEAVY, 0.1, 1e-3, nsub
            )
            diverged |= d
            peak = max(peak, float(np.abs(states[:, 0:2]).max()))
        assert not diverged.any()
        assert peak < 30.0
        # Slow draws (small c_v/k_v) coast for tens of seconds, but no
        # sample's speed may ever grow.
        assert np.all(np.abs(states[:, 2:4]).max(axis=1) < v0)

    def test_confidence_report_counts(self):
        traj = np.zeros((4, 3, 6))
        traj[:, -1, 0] = [0.30, 0.30, 0.90, 0.32]   # sample 2 out of band
        traj[:, -1, 1] = [-0.50, -0.52, -0.50, -0.90]  # sample 3 out of band
        ens = SampledEnsemble(
            seed=0,
            params=np.ones((4, 6)),
            trajectories=traj,
            diverged=np.zeros(4, dtype=bool),
        )
        report = confidence_report(ens, (0.3, -0.5), (0.05, 0.05))
        assert report.fraction_final_inside == pytest.approx([0.75, 0.75])
        assert report.n_diverged == 0
        assert report.band_lower == pytest.approx([0.3 - 1.96 * 0.05, -0.5 - 1.96 * 0.05])

    def test_diverged_samples_excluded_and_budgeted(self):
        traj = np.zeros((4, 2, 6))
        traj[:, -1, 0] = 0.3
        traj[:, -1, 1] = -0.5
        diverged = np.array([True, False, False, False])
        ens = SampledEnsemble(
            seed=0, params=np.ones((4, 6)), trajectories=traj, diverged=diverged
        )
        with pytest.raises(RuntimeError, match="diverged"):
            confidence_report(ens, (0.3, -0.5), (0.05, 0.05))
        report = confidence_report(
            ens, (0.3, -0.5), (0.05, 0.05), max_diverged_fraction=0.5
        )
        assert report.n_diverged == 1
        assert report.finals.shape == (3, 2)
        assert report.fraction_final_inside == pytest.approx([1.0, 1.0])

    def test_empty_ensemble_rejected(self):
        ens = SampledEnsemble(
            seed=0,
            params=np.zeros((0, 6)),
            trajectories=np.zeros((0, 1, 6)),
            diverged=np.zeros(0, dtype=bool),
        )
        with pytest.raises(ValueError):
            confidence_report(ens, (0.0, 0.0), (0.05, 0.05))

    def test_nominal_sample_matches_single_trajectory(self):
        inputs = np.tile([1.5, 0.0, 0.8], (4, 1))
        ens = run_ensemble(
            degenerate_shapes(), HEAVY, inputs, 0.1, n_samples=3, seed=13
        )
        solo, diverged = simulate_trajectory(
            median_params(SHAPES), inputs, 0.1, HEAVY
        )
        assert not diverged
        for i in range(3):
            assert ens.trajectories[i] == pytest.approx(solo, abs=1e-14)
