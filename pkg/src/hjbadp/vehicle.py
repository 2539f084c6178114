"""Lateral vehicle models: the linear error-state bicycle and a kinematic bicycle."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateReferenceError, SingularModelError

STATE_NAMES = ("d", "phi", "r", "vy")
STATE_UNITS = ("m", "rad", "rad/s", "m/s")


@dataclass(frozen=True)
class VehicleParams:
    k1: float = -88000.0  # front cornering stiffness, N/rad
    k2: float = -94000.0  # rear cornering stiffness, N/rad
    a: float = 1.14  # CG to front axle, m
    b: float = 1.4  # CG to rear axle, m
    m: float = 1500.0  # kg
    Izz: float = 2420.0  # kg m^2
    vx: float = 15.0  # m/s
    delta_max: float = 0.35  # rad

    def __post_init__(self):
        for name in ("a", "b", "m", "Izz", "delta_max"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"vehicle.{name} must be positive")
        for name in ("k1", "k2"):
            if not getattr(self, name) < 0:
                raise ConfigurationError(f"vehicle.{name} must be negative (N/rad)")
        # vx == 0 is representable; building the linear model rejects it.
        if self.vx < 0:
            raise ConfigurationError("vehicle.vx must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrackingState:
    d: float
    phi: float
    r: float
    vy: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ConfigurationError("tracking state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.phi, self.r, self.vy], dtype=float)


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x_dot = A x + B u over x = [d, phi, r, vy]; batched over leading axes."""

    A: np.ndarray
    B: np.ndarray  # shape (4, 1)

    state_dim = 4

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A.T + u[..., None] * self.B[:, 0]

    def control_jacobian(self, x, u):
        return np.broadcast_to(self.B[:, 0], np.shape(x)).copy()


def build_linear_dynamics(p: VehicleParams) -> LinearDynamics:
    if p.vx == 0:
        raise SingularModelError("linear bicycle model is singular at vx = 0")
    a, b, k1, k2, m, izz, vx = p.a, p.b, p.k1, p.k2, p.m, p.Izz, p.vx
    A = np.array([
        [0.0, vx, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, (a * a * k1 + b * b * k2) / (izz * vx), (a * k1 - b * k2) / (izz * vx)],
        [0.0, 0.0, (a * k1 - b * k2) / (m * vx) - vx, (k1 + k2) / (m * vx)],
    ])
    B = np.array([[0.0], [0.0], [-a * k1 / izz], [-k1 / m]])
    return LinearDynamics(A, B)


def linear_derivative(dyn: LinearDynamics, x, u) -> np.ndarray:
    if isinstance(x, TrackingState):
        x = x.as_array()
    return dyn(x, u)


def sideslip(p: VehicleParams, delta):
    return np.arctan(p.b * np.tan(delta) / (p.a + p.b))


def kinematic_bicycle_derivative(p: VehicleParams, pose, delta) -> np.ndarray:
    """CG-referenced kinematic bicycle; ``pose = (x, y, heading)``."""
    pose = np.asarray(pose, dtype=float)
    beta = sideslip(p, np.asarray(delta, dtype=float))
    course = pose[..., 2] + beta
    return np.stack([
        p.vx * np.cos(course),
        p.vx * np.sin(course),
        (p.vx / p.b) * np.sin(beta),
    ], axis=-1)


class KinematicErrorDynamics:
    """Tracking errors [d, phi] of the kinematic bicycle against a frozen tangent line.

    d_dot = vx sin(phi + beta), phi_dot = (vx / b) sin(beta), beta = atan(b tan(delta) / (a + b)).
    The control Jacobian is taken by central differences.
    """

    state_dim = 2
    fd_step = 1e-6

    def __init__(self, p: VehicleParams):
        if p.vx == 0:
            raise SingularModelError("kinematic tracking model is degenerate at vx = 0")
        self.params = p

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        beta = sideslip(self.params, np.asarray(u, dtype=float))
        vx, b = self.params.vx, self.params.b
        d_dot = vx * np.sin(x[..., 1] + beta)
        phi_dot = np.broadcast_to((vx / b) * np.sin(beta), d_dot.shape)
        return np.stack([d_dot, phi_dot], axis=-1)

    def control_jacobian(self, x, u):
        u = np.asarray(u, dtype=float)
        h = self.fd_step
        return (self(x, u + h) - self(x, u - h)) / (2.0 * h)


def error_state(pose, reference_point) -> tuple[float, float]:
    """Lateral and heading error against the tangent line at ``(y_r, theta_r)``."""
    y_pos, heading = pose[1], pose[2]
    y_r, theta_r = reference_point
    c = np.cos(theta_r)
    if np.any(np.abs(c) < 1e-12):
        raise DegenerateReferenceError("reference heading at +-pi/2 has no lateral error")
    return (y_pos - y_r) * c, heading - theta_r
