"""Dynamics of a 2-link, 3-tendon soft finger with viscoelastic joints.

The finger body is a planar 2-link manipulator; each joint carries a lumped
3-element viscoelastic combination (series spring/damper pair in parallel
with a second damper), which produces creep under sustained torque.  The
full state is x = (q, q_dot, tau) in R^6, where tau is the internal joint
torque.  Tendon tensions u (3 cables, tension-only) act through a constant
moment-arm coupling matrix.

The module also provides the reduced, inertia-free first-order model in the
joint angles alone (drift field) together with the diffusion matrix induced
by log-normal parameter uncertainty; these two fields are what the density
evolution consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_JOINTS = 2
N_TENDONS = 3
N_PARAMS = 6  # (k_v1, k_v2, c_v1, c_v2, c_p1, c_p2)

#: Log-normal shape parameters (mu, sigma) of the viscoelastic parameters,
#: per joint.  Medians are exp(mu).
DEFAULT_SHAPE_TABLE = {
    "k_v": ((-2.81, 0.0918), (-2.62, 0.115)),
    "c_v": ((-4.20, 0.648), (-4.27, 0.492)),
    "c_p": ((2.13, 0.706), (2.72, 0.912)),
}


@dataclass(frozen=True)
class LogNormalShape:
    """Shape of one log-normal parameter distribution.

    ``mu`` and ``sigma`` are the location/scale of log(x); the median of the
    distribution is exp(mu).  ``sigma == 0`` degenerates to the point mass.
    """

    mu: float
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ValueError("log-normal mu must be finite")
        if not (self.sigma >= 0.0):
            raise ValueError("log-normal sigma must be >= 0")

    @property
    def median(self) -> float:
        return float(np.exp(self.mu))


@dataclass(frozen=True)
class ParameterShapes:
    """Per-joint log-normal shapes for (k_v, c_v, c_p)."""

    k_v: tuple[LogNormalShape, LogNormalShape]
    c_v: tuple[LogNormalShape, LogNormalShape]
    c_p: tuple[LogNormalShape, LogNormalShape]

    @classmethod
    def default(cls) -> "ParameterShapes":
        mk = lambda pair: tuple(LogNormalShape(*ms) for ms in pair)
        return cls(
            k_v=mk(DEFAULT_SHAPE_TABLE["k_v"]),
            c_v=mk(DEFAULT_SHAPE_TABLE["c_v"]),
            c_p=mk(DEFAULT_SHAPE_TABLE["c_p"]),
        )

    def mu_vector(self) -> np.ndarray:
        """log-medians in canonical order (k_v1, k_v2, c_v1, c_v2, c_p1, c_p2)."""
        return np.array(
            [s.mu for s in (*self.k_v, *self.c_v, *self.c_p)], dtype=float
        )

    def sigma_vector(self) -> np.ndarray:
        return np.array(
            [s.sigma for s in (*self.k_v, *self.c_v, *self.c_p)], dtype=float
        )


@dataclass(frozen=True)
class FingerGeometry:
    """Link/tendon geometry.

    ``link_inertia`` is the per-link inertia about its proximal joint axis;
    by default it is derived for a uniform slender rod spanning one
    joint-to-joint segment (link + joint length).
    """

    link_length: float = 30e-3
    joint_length: float = 15e-3
    tendon_offsets: tuple[float, float, float] = (8e-3, 5e-3, 8e-3)
    link_mass: float = 5e-3
    link_inertia: float | None = None

    def __post_init__(self):
        if self.link_length <= 0 or self.joint_length <= 0:
            raise ValueError("lengths must be strictly positive")
        if len(self.tendon_offsets) != N_TENDONS or any(
            r <= 0 for r in self.tendon_offsets
        ):
            raise ValueError("need 3 strictly positive tendon offsets")
        if self.link_mass <= 0:
            raise ValueError("link_mass must be strictly positive")
        if self.link_inertia is not None and self.link_inertia <= 0:
            raise ValueError("link_inertia must be strictly positive")

    @property
    def segment_length(self) -> float:
        """Joint-axis to joint-axis distance of one link segment."""
        return self.link_length + self.joint_length

    @property
    def com_offset(self) -> float:
        return 0.5 * self.segment_length

    @property
    def inertia_end(self) -> float:
        """Inertia of one segment about its proximal joint axis."""
        if self.link_inertia is not None:
            return self.link_inertia
        return self.link_mass * self.segment_length**2 / 3.0


@dataclass(frozen=True)
class ViscoelasticParams:
    """Per-joint (k_v, c_v, c_p) values, all strictly positive."""

    k_v: tuple[float, float]
    c_v: tuple[float, float]
    c_p: tuple[float, float]

    def __post_init__(self):
        for name in ("k_v", "c_v", "c_p"):
            vals = getattr(self, name)
            if len(vals) != N_JOINTS or any(
                not np.isfinite(v) or v <= 0 for v in vals
            ):
                raise ValueError(f"{name} must hold 2 strictly positive values")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.k_v, *self.c_v, *self.c_p], dtype=float)

    @classmethod
    def from_vector(cls, p: np.ndarray) -> "ViscoelasticParams":
        p = np.asarray(p, dtype=float)
        if p.shape != (N_PARAMS,):
            raise ValueError("parameter vector must have 6 entries")
        return cls(k_v=(p[0], p[1]), c_v=(p[2], p[3]), c_p=(p[4], p[5]))

    def joint_coeffs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Diagonal entries (a, b, c, d) of the creep-law matrices.

        The torque law per joint reads  a*q_dot + b*q = c*tau + d*Int(tau)dt
        with a = c_p*k_v, b = c_v*c_p, c = c_v + c_p, d = k_v.
        """
        k_v = np.asarray(self.k_v, dtype=float)
        c_v = np.asarray(self.c_v, dtype=float)
        c_p = np.asarray(self.c_p, dtype=float)
        return c_p * k_v, c_v * c_p, c_v + c_p, k_v


@dataclass(frozen=True)
class FingerState:
    """Full model state (q, q_dot, tau), each a 2-vector."""

    q: tuple[float, float]
    q_dot: tuple[float, float]
    tau: tuple[float, float]

    def __post_init__(self):
        for name in ("q", "q_dot", "tau"):
            vals = getattr(self, name)
            if len(vals) != N_JOINTS or not all(np.isfinite(v) for v in vals):
                raise ValueError(f"{name} must hold 2 finite values")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.q, *self.q_dot, *self.tau], dtype=float)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "FingerState":
        x = np.asarray(x, dtype=float)
        if x.shape != (3 * N_JOINTS,):
            raise ValueError("state vector must have 6 entries")
        return cls(q=(x[0], x[1]), q_dot=(x[2], x[3]), tau=(x[4], x[5]))

    @classmethod
    def zero(cls) -> "FingerState":
        return cls(q=(0.0, 0.0), q_dot=(0.0, 0.0), tau=(0.0, 0.0))


def median_params(shapes: ParameterShapes) -> ViscoelasticParams:
    """Nominal (median) parameter values exp(mu) of each shape."""
    m = np.exp(shapes.mu_vector())
    return ViscoelasticParams.from_vector(m)


def coupling_matrix(q: np.ndarray, geometry: FingerGeometry) -> np.ndarray:
    """Tension-to-joint-torque map P (2x3, units m).

    Tendon 1 flexes joint 1 only; tendons 2 and 3 route past both joints as
    an antagonistic pair (tendon 2 extends, tendon 3 flexes).  Moment arms
    are the constant tendon offsets, independent of configuration.
    """
    r1, r2, r3 = geometry.tendon_offsets
    return np.array([[r1, -r2, r3], [0.0, -r2, r3]])


def mass_matrix(q: np.ndarray, geometry: FingerGeometry) -> np.ndarray:
    """Planar 2-link inertia matrix (symmetric positive definite)."""
    m = geometry.link_mass
    l1 = geometry.segment_length
    lc2 = geometry.com_offset
    i_end = geometry.inertia_end
    c2 = np.cos(q[1])
    m11 = i_end + m * l1**2 + i_end + 2.0 * m * l1 * lc2 * c2
    m12 = i_end + m * l1 * lc2 * c2
    m22 = i_end
    return np.array([[m11, m12], [m12, m22]])


def nonlinear_term(
    q: np.ndarray, q_dot: np.ndarray, geometry: FingerGeometry
) -> np.ndarray:
    """Coriolis/centrifugal torques of the planar 2-link (no gravity)."""
    g = geometry.link_mass * geometry.segment_length * geometry.com_offset
    s2 = np.sin(q[1])
    qd1, qd2 = q_dot
    return np.array(
        [-g * s2 * (2.0 * qd1 * qd2 + qd2 * qd2), g * s2 * qd1 * qd1]
    )


def coriolis_matrix(
    q: np.ndarray, q_dot: np.ndarray, geometry: FingerGeometry
) -> np.ndarray:
    """Christoffel factorization C with h = C @ q_dot and d(M)/dt - 2C skew."""
    g = geometry.link_mass * geometry.segment_length * geometry.com_offset
    s2 = np.sin(q[1])
    qd1, qd2 = q_dot
    return np.array(
        [[-g * s2 * qd2, -g * s2 * (qd1 + qd2)], [g * s2 * qd1, 0.0]]
    )


def state_derivative(
    x: np.ndarray,
    u: np.ndarray,
    params: ViscoelasticParams,
    geometry: FingerGeometry,
) -> np.ndarray:
    """Time derivative of the full state (q, q_dot, tau).

    The torque balance gives q_ddot; differentiating the creep law once
    gives tau_dot = (a*q_ddot + b*q_dot - d*tau) / c.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q, q_dot, tau = x[0:2], x[2:4], x[4:6]
    a, b, c, d = params.joint_coeffs()

    mass = mass_matrix(q, geometry)
    rhs = coupling_matrix(q, geometry) @ u - nonlinear_term(q, q_dot, geometry) - tau
    try:
        q_ddot = np.linalg.solve(mass, rhs)
    except np.linalg.LinAlgError as exc:  # PD geometry should preclude this
        raise ArithmeticError("singular mass matrix") from exc
    tau_dot = (a * q_ddot + b * q_dot - d * tau) / c
    return np.concatenate([q_dot, q_ddot, tau_dot])


def param_jacobian(
    x: np.ndarray,
    u: np.ndarray,
    p_hat: ViscoelasticParams,
    geometry: FingerGeometry,
    log_step: float = 1e-6,
) -> np.ndarray:
    """d(state_derivative)/d(p') where p = exp(p'), by central differences.

    Differentiation is carried out in log-parameter space, so ``log_step``
    acts as a relative step on the physical parameters.  Rows of the q-block
    are identically zero (q_dot does not depend on the parameters).
    """
    p_log = np.log(p_hat.as_vector())
    jac = np.zeros((3 * N_JOINTS, N_PARAMS))
    for l in range(N_PARAMS):
        for sign in (+1.0, -1.0):
            p_pert = p_log.copy()
            p_pert[l] += sign * log_step
            f = state_derivative(
                x, u, ViscoelasticParams.from_vector(np.exp(p_pert)), geometry
            )
            if not np.all(np.isfinite(f)):
                raise ArithmeticError("non-finite dynamics during FD Jacobian")
            jac[:, l] += sign * f
    jac /= 2.0 * log_step
    jac[0:N_JOINTS, :] = 0.0  # exact: f_q = q_dot is parameter-free
    return jac


class ReducedModel:
    """Inertia-free first-order joint-angle model and its noise intensity.

    With inertia neglected, the torque balance gives tau = P u, and the
    creep law yields the drift  q_dot = (c * P u + d * eta - b * q) / a
    where eta is the running torque integral along the controller's nominal
    trajectory.  Parameter uncertainty enters as diffusion a_mat = S S^T
    with S the log-space parameter sensitivity of the drift scaled by the
    per-parameter log-normal sigma (unit intensity per second).

    Because the drift is affine in (P u, eta, q) with coefficients that
    depend only on the parameters, the log-space sensitivities reduce to
    precomputed coefficient differences; no per-call finite differencing is
    needed.
    """

    def __init__(
        self,
        geometry: FingerGeometry,
        shapes: ParameterShapes,
        log_step: float = 1e-6,
    ):
        self.geometry = geometry
        self.shapes = shapes
        self.params = median_params(shapes)
        self.coupling = coupling_matrix(np.zeros(N_JOINTS), geometry)
        a, b, c, d = self.params.joint_coeffs()
        self._ca, self._da, self._ba = c / a, d / a, b / a

        # Central-difference sensitivities of the (c/a, d/a, b/a) gains with
        # respect to each log-parameter, scaled by the log-normal sigmas.
        sig = shapes.sigma_vector()
        p_log = np.log(self.params.as_vector())
        self._d_ca = np.zeros((N_JOINTS, N_PARAMS))
        self._d_da = np.zeros((N_JOINTS, N_PARAMS))
        self._d_ba = np.zeros((N_JOINTS, N_PARAMS))
        for l in range(N_PARAMS):
            for sign in (+1.0, -1.0):
                p_pert = p_log.copy()
                p_pert[l] += sign * log_step
                ap, bp, cp, dp = ViscoelasticParams.from_vector(
                    np.exp(p_pert)
                ).joint_coeffs()
                self._d_ca[:, l] += sign * cp / ap
                self._d_da[:, l] += sign * dp / ap
                self._d_ba[:, l] += sign * bp / ap
        scale = sig / (2.0 * log_step)
        self._d_ca *= scale
        self._d_da *= scale
        self._d_ba *= scale

    def drift(self, q: np.ndarray, u: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Reduced joint-velocity field at grid points q (shape (..., 2))."""
        q = np.asarray(q, dtype=float)
        torque = self.coupling @ np.asarray(u, dtype=float)
        return self._ca * torque + self._da * np.asarray(eta, float) - self._ba * q

    def sensitivity(
        self, q: np.ndarray, u: np.ndarray, eta: np.ndarray
    ) -> np.ndarray:
        """Noise gain S (shape (..., 2, 6)): sigma-scaled drift sensitivity."""
        q = np.asarray(q, dtype=float)
        torque = self.coupling @ np.asarray(u, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return (
            self._d_ca * torque[:, None]
            + self._d_da * eta[:, None]
            - self._d_ba * q[..., :, None]
        )

    def diffusion(self, q: np.ndarray, u: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Diffusion matrix S S^T (shape (..., 2, 2)), symmetric PSD."""
        s = self.sensitivity(q, u, eta)
        return np.einsum("...ik,...jk->...ij", s, s)


def reduced_advection(
    q: np.ndarray,
    u: np.ndarray,
    eta: np.ndarray,
    params: ViscoelasticParams,
    geometry: FingerGeometry,
) -> np.ndarray:
    """Reduced drift q_dot = (c * P u + d * eta - b * q) / a at one point."""
    a, b, c, d = params.joint_coeffs()
    torque = coupling_matrix(q, geometry) @ np.asarray(u, dtype=float)
    return (c * torque + d * np.asarray(eta, float) - b * np.asarray(q, float)) / a


def diffusion_matrix(
    q: np.ndarray,
    u: np.ndarray,
    eta: np.ndarray,
    shapes: ParameterShapes,
    geometry: FingerGeometry,
) -> np.ndarray:
    """Parameter-uncertainty diffusion of the reduced model at one point."""
    model = ReducedModel(geometry, shapes)
    return model.diffusion(np.asarray(q, dtype=float), u, eta)
