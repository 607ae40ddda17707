"""Monte-Carlo validation of an open-loop input sequence.

Draws viscoelastic parameters from their log-normal distributions, holds
each draw constant (the physical reading of parameter uncertainty),
integrates the full finger model under the recorded tendon tensions, and
reports how many samples end inside the 95% band of the reference
Gaussian.  This quantifies exactly the mismatch the density controller's
white-noise approximation leaves behind.

Per-sample random streams are derived from one seed, so the ensemble is
bit-reproducible regardless of batching or parallel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .finger_model import (
    FingerGeometry,
    ParameterShapes,
    ViscoelasticParams,
)
from .integrate import rk4_batch, spectral_bound, RK4_TARGET


@dataclass
class SampledEnsemble:
    """Parameter draws and their integrated trajectories."""

    seed: int
    params: np.ndarray        # (n_samples, 6) draws, canonical order
    trajectories: np.ndarray  # (n_samples, n_steps + 1, 6) at control times
    diverged: np.ndarray      # (n_samples,) bool

    @property
    def n_samples(self) -> int:
        return self.params.shape[0]

    def final_angles(self) -> np.ndarray:
        return self.trajectories[:, -1, 0:2]


@dataclass
class ConfidenceReport:
    """Band membership of the non-diverged final joint angles."""

    band_lower: np.ndarray
    band_upper: np.ndarray
    fraction_final_inside: np.ndarray  # per joint, among non-diverged
    finals: np.ndarray                 # (n_valid, 2)
    inside: np.ndarray                 # (n_valid, 2) bool
    n_diverged: int


def sample_parameters(shapes: ParameterShapes, seed_or_rng) -> ViscoelasticParams:
    """One draw: exp of a normal draw N(mu, sigma^2) per parameter."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    vec = np.exp(shapes.mu_vector() + shapes.sigma_vector() * rng.standard_normal(6))
    return ViscoelasticParams.from_vector(vec)


def sample_parameter_matrix(
    shapes: ParameterShapes, n_samples: int, seed: int
) -> np.ndarray:
    """(n_samples, 6) draws with one independent child stream per sample."""
    if n_samples < 1:
        raise ValueError("ensemble size must be at least 1")
    mu, sigma = shapes.mu_vector(), shapes.sigma_vector()
    streams = np.random.SeedSequence(seed).spawn(n_samples)
    draws = np.empty((n_samples, 6))
    for i, ss in enumerate(streams):
        z = np.random.default_rng(ss).standard_normal(6)
        draws[i] = np.exp(mu + sigma * z)
    return draws


def simulate_trajectory(
    params: ViscoelasticParams,
    inputs: np.ndarray,
    dt: float,
    geometry: FingerGeometry,
    dt_fine: float = 1e-3,
) -> tuple[np.ndarray, bool]:
    """Integrate one sample from rest under a zero-order-hold input trace.

    Classical RK4 at ``dt_fine`` (internally substepped to stay inside the
    stability region of the stiff torque dynamics); states are recorded at
    the control-step resolution.  Returns the (n_steps + 1, 6) trajectory
    and a divergence flag.
    """
    traj, diverged = _simulate_batch(
        np.asarray(params.as_vector())[None, :], inputs, dt, geometry, dt_fine
    )
    return traj[0], bool(diverged[0])


def _simulate_batch(
    params_matrix: np.ndarray,
    inputs: np.ndarray,
    dt: float,
    geometry: FingerGeometry,
    dt_fine: float,
) -> tuple[np.ndarray, np.ndarray]:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != 3:
        raise ValueError("input trace must have 3 columns")
    if dt_fine <= 0 or dt <= 0:
        raise ValueError("time steps must be positive")
    n_per_control = int(round(dt / dt_fine))
    if n_per_control < 1 or abs(n_per_control * dt_fine - dt) > 1e-9 * dt:
        raise ValueError("dt_fine must divide the control dt")

    ns = params_matrix.shape[0]
    n_steps = inputs.shape[0]
    lam = spectral_bound(params_matrix, geometry)
    n_sub = np.maximum(1, np.ceil(dt_fine * lam / RK4_TARGET).astype(int))
    # Round each sample's substep count up to a power of two: a stiff draw
    # cannot force tiny substeps on the whole batch, the handful of
    # resulting groups keeps the integration vectorized, and every sample
    # is integrated identically no matter which other draws accompany it.
    n_sub = 2 ** np.ceil(np.log2(n_sub)).astype(int)

    order = np.argsort(n_sub, kind="stable")
    trajectories = np.zeros((ns, n_steps + 1, 6))
    diverged = np.zeros(ns, dtype=bool)
    for count in np.unique(n_sub):
        idx = order[n_sub[order] == count]
        states = np.zeros((idx.size, 8))
        div = np.zeros(idx.size, dtype=bool)
        for k in range(n_steps):
            states, d = rk4_batch(
                states, inputs[k], params_matrix[idx], geometry,
                dt, dt_fine, int(count),
            )
            div |= d
            trajectories[idx, k + 1] = states[:, :6]
        diverged[idx] = div
    return trajectories, diverged


def run_ensemble(
    shapes: ParameterShapes,
    geometry: FingerGeometry,
    inputs: np.ndarray,
    dt: float,
    n_samples: int,
    seed: int,
    dt_fine: float = 1e-3,
) -> SampledEnsemble:
    """Sample an ensemble and integrate every draw under the input trace."""
    draws = sample_parameter_matrix(shapes, n_samples, seed)
    trajectories, diverged = _simulate_batch(draws, inputs, dt, geometry, dt_fine)
    return SampledEnsemble(
        seed=seed, params=draws, trajectories=trajectories, diverged=diverged
    )


def confidence_report(
    ensemble: SampledEnsemble, mu_ref, sigma_ref, max_diverged_fraction: float = 0.05
) -> ConfidenceReport:
    """Fraction of non-diverged finals inside mu_ref +- 1.96 sigma_ref."""
    if ensemble.n_samples == 0:
        raise ValueError("empty ensemble")
    n_div = int(ensemble.diverged.sum())
    if n_div > max_diverged_fraction * ensemble.n_samples:
        raise RuntimeError(
            f"{n_div}/{ensemble.n_samples} samples diverged, "
            f"more than the {max_diverged_fraction:.0%} budget"
        )
    mu_ref = np.asarray(mu_ref, dtype=float)
    sigma_ref = np.asarray(sigma_ref, dtype=float)
    lo = mu_ref - 1.96 * sigma_ref
    hi = mu_ref + 1.96 * sigma_ref
    finals = ensemble.final_angles()[~ensemble.diverged]
    if finals.shape[0] == 0:
        raise RuntimeError("all samples diverged")
    inside = (finals >= lo) & (finals <= hi)
    return ConfidenceReport(
        band_lower=lo,
        band_upper=hi,
        fraction_final_inside=inside.mean(axis=0),
        finals=finals,
        inside=inside,
        n_diverged=n_div,
    )
