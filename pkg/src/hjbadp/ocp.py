"""Finite-horizon tracking problem: utility, Hamiltonian and terminal rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ConfigurationError, ContractViolation, IntegrationBlowupError


@dataclass(frozen=True)
class UtilityWeights:
    Q: float = 0.4  # lateral-error penalty
    R: float = 280.0  # steering penalty

    def __post_init__(self):
        if not (self.Q > 0 and self.R > 0):
            raise ConfigurationError("utility weights Q and R must be positive")


@dataclass(frozen=True)
class Horizon:
    T: float = 0.5
    dt: float = 0.005

    def __post_init__(self):
        if not (0 < self.dt <= self.T):
            raise ConfigurationError("horizon needs 0 < dt <= T")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1.0:
            raise ConfigurationError("T / dt must be within 1 of an integer")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.T / self.dt - 1e-9))


@dataclass(frozen=True, eq=False)
class OcpInstance:
    dynamics: Any  # callable f(x, u) with .state_dim and .control_jacobian(x, u)
    weights: UtilityWeights
    horizon: Horizon
    control_bound: float = 0.35

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim


def utility(x, u, w: UtilityWeights):
    """Q d^2 + R delta^2, with d the first state component."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return w.Q * x[..., 0] ** 2 + w.R * u**2


def utility_du(u, w: UtilityWeights):
    return 2.0 * w.R * np.asarray(u, dtype=float)


def hamiltonian(x, u, value_grad_x, dyn, w: UtilityWeights):
    """l(x, u) + <dV/dx, f(x, u)>."""
    f = dyn(x, u)
    return utility(x, u, w) + np.sum(np.asarray(value_grad_x, dtype=float) * f, axis=-1)


Controller = Callable[[np.ndarray, Any], Any]


def rk4_step(dyn, x, controller: Controller, t, dt):
    """Classical RK4; the controller is re-evaluated at every stage.

    ``dt`` may be an array with one step per batch row (zero leaves that row fixed).
    """
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0) or (dt.ndim == 0 and not dt > 0):
        raise ConfigurationError("rk4 step size must be positive")
    x = np.asarray(x, dtype=float)
    h = dt[..., None] if dt.ndim else dt
    half = 0.5 * dt
    k1 = dyn(x, controller(x, t))
    x2 = x + 0.5 * h * k1
    k2 = dyn(x2, controller(x2, t + half))
    x3 = x + 0.5 * h * k2
    k3 = dyn(x3, controller(x3, t + half))
    x4 = x + h * k3
    k4 = dyn(x4, controller(x4, t + dt))
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowupError(f"non-finite state after rk4 step at t={np.max(t)}")
    return out


def rollout_terminal(policy: Controller, ocp: OcpInstance, x, t):
    """Integrate the closed loop from ``(x, t)`` to the final time.

    Works on one state or a batch with per-row start times. Steps of ``dt`` are
    taken until the remaining time is shorter than ``dt``; that last step uses
    the remainder. Returns ``(x_T, u_T, l_T)`` with ``u_T = policy(x_T, T)``.
    """
    T, dt = ocp.horizon.T, ocp.horizon.dt
    x = np.array(x, dtype=float)
    t = np.asarray(t, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        t = np.reshape(t, (1,))
    else:
        t = np.broadcast_to(t, (x.shape[0],)).astype(float)
    if np.any(t > T + 1e-12):
        raise ContractViolation("rollout start time is past the final time")
    if np.any(t < 0):
        raise ContractViolation("rollout start time must be >= 0")
    tau = t.copy()
    # A remainder below 1e-9 s counts as zero to absorb float noise in T - t.
    eps = 1e-9
    while True:
        idx = np.flatnonzero(T - tau > eps)
        if idx.size == 0:
            break
        h = np.minimum(dt, T - tau[idx])
        x[idx] = rk4_step(ocp.dynamics, x[idx], policy, tau[idx], h)
        tau[idx] = np.where(T - tau[idx] - h <= eps, T, tau[idx] + h)
    t_final = np.full(x.shape[0], T)
    u_T = np.asarray(policy(x, t_final), dtype=float)
    l_T = utility(x, u_T, ocp.weights)
    if single:
        return x[0], float(u_T[0]), float(l_T[0])
    return x, u_T, l_T
