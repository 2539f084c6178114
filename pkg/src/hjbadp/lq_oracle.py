"""Analytical finite-horizon LQ solutions used as ground truth for the learned policy.

Two independent routes are provided: the condensed batch solution over all
stacked controls and a backward Riccati recursion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConditioningError, DegenerateNormalizationError
from .vehicle import LinearDynamics


def expm(M: np.ndarray, terms: int = 16) -> np.ndarray:
    """Matrix exponential by scaling and squaring a truncated Taylor series."""
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M, 1)
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    X = M / 2.0**s
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


@dataclass(frozen=True, eq=False)
class DiscreteLti:
    Ad: np.ndarray
    Bd: np.ndarray
    h: float


def discretize(dyn: LinearDynamics, h: float, method: str = "zoh") -> DiscreteLti:
    if not h > 0:
        raise ValueError("discretization step must be positive")
    A, B = np.asarray(dyn.A, dtype=float), np.asarray(dyn.B, dtype=float)
    n, m = B.shape
    if method == "euler":
        return DiscreteLti(np.eye(n) + h * A, h * B, h)
    if method != "zoh":
        raise ValueError(f"unknown discretization method {method!r}")
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = expm(aug * h)
    return DiscreteLti(E[:n, :n], E[:n, n:], h)


@dataclass(frozen=True, eq=False)
class BatchLqProblem:
    Ad: np.ndarray
    Bd: np.ndarray
    Qm: np.ndarray
    Rm: np.ndarray
    P: np.ndarray
    N: int

    def __post_init__(self):
        for name in ("Ad", "Bd", "Qm", "Rm", "P"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if np.any(np.linalg.eigvalsh(self.Rm) <= 0):
            raise ValueError("input cost Rm must be positive definite")

    @property
    def nx(self) -> int:
        return self.Ad.shape[0]

    @property
    def nu(self) -> int:
        return self.Bd.shape[1]


def tracking_problem(dyn: LinearDynamics, Q: float, R: float, h: float, N: int,
                     method: str = "zoh", terminal: str = "Q") -> BatchLqProblem:
    """LQ problem penalizing only the lateral error: Qm = diag(Q, 0, 0, 0)."""
    d = discretize(dyn, h, method)
    Qm = np.zeros((d.Ad.shape[0],) * 2)
    Qm[0, 0] = Q
    P = Qm.copy() if terminal == "Q" else np.zeros_like(Qm)
    return BatchLqProblem(d.Ad, d.Bd, Qm, np.array([[R]]), P, N)


def build_batch_matrices(p: BatchLqProblem):
    """Stacked prediction matrices ``(S, T, Qbar, Rbar)`` with X = T x0 + S U."""
    nx, nu, N = p.nx, p.nu, p.N
    powers = [np.eye(nx)]
    for _ in range(N):
        powers.append(p.Ad @ powers[-1])
    S = np.zeros((nx * N, nu * N))
    blocks = [powers[k] @ p.Bd for k in range(N)]
    for i in range(N):
        for j in range(i + 1):
            S[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu] = blocks[i - j]
    T = np.vstack(powers[1:])
    Qbar = np.zeros((nx * N, nx * N))
    for i in range(N - 1):
        Qbar[i * nx:(i + 1) * nx, i * nx:(i + 1) * nx] = p.Qm
    Qbar[(N - 1) * nx:, (N - 1) * nx:] = p.P
    Rbar = np.kron(np.eye(N), p.Rm)
    return S, T, Qbar, Rbar


def batch_lq_solve(p: BatchLqProblem, x) -> np.ndarray:
    """Optimal stacked controls U* = -H^-1 F x for one state or a batch of states (rows)."""
    from scipy.linalg import cho_factor, cho_solve

    S, T, Qbar, Rbar = build_batch_matrices(p)
    QS = Qbar @ S
    H = 2.0 * (Rbar + S.T @ QS)
    F = 2.0 * QS.T @ T
    x = np.asarray(x, dtype=float)
    rhs = F @ (x.T if x.ndim == 2 else x)
    try:
        c = cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("batch Hessian is not positive definite") from exc
    diag = np.abs(np.diag(c[0]))
    if diag.min() <= 1e-7 * diag.max():  # cond(H) >~ 1e14
        raise ConditioningError("batch Hessian is numerically singular")
    U = -cho_solve(c, rhs)
    return U.T if x.ndim == 2 else U


def riccati_solve(p: BatchLqProblem) -> list:
    """Feedback gains K_0..K_{N-1} (u_k = -K_k x_k) from the backward recursion."""
    Pk = p.P
    gains = []
    for _ in range(p.N):
        K = np.linalg.solve(p.Rm + p.Bd.T @ Pk @ p.Bd, p.Bd.T @ Pk @ p.Ad)
        Pk = p.Qm + p.Ad.T @ Pk @ (p.Ad - p.Bd @ K)
        gains.append(K)
    return gains[::-1]


def quadratic_cost(p: BatchLqProblem, x, U) -> float:
    S, T, Qbar, Rbar = build_batch_matrices(p)
    X = T @ x + S @ U
    return float(U @ Rbar @ U + X @ Qbar @ X)


def remaining_steps(t, T: float, h: float) -> np.ndarray:
    return np.rint((T - np.asarray(t, dtype=float)) / h).astype(int)


def oracle_first_moves(p: BatchLqProblem, x, t, T: float) -> np.ndarray:
    """First optimal move u*_{0|t} for each (x, t), solving the remaining-horizon problem.

    The horizon is round((T - t) / h); a zero-step horizon gives u* = 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    steps = remaining_steps(t, T, _step(p, T))
    out = np.zeros(x.shape[0])
    for n in np.unique(steps):
        if n <= 0:
            continue
        rows = steps == n
        out[rows] = batch_lq_solve(replace(p, N=int(n)), x[rows])[:, 0]
    return out


def _step(p: BatchLqProblem, T: float) -> float:
    return T / p.N


def policy_error(policy, p: BatchLqProblem, x, t, T: float, signed: bool = False,
                 u_star=None) -> float:
    """Mean oracle deviation normalized by the oracle's range over the test set.

    ``policy(x, t)`` must accept a batch. ``p`` is the full-horizon problem
    (N steps spanning [0, T]).
    """
    if u_star is None:
        u_star = oracle_first_moves(p, x, t, T)
    spread = float(np.max(u_star) - np.min(u_star))
    if spread <= 0:
        raise DegenerateNormalizationError("oracle policy is constant on the test set")
    diff = (np.asarray(policy(x, t), dtype=float) - u_star) / spread
    return float(np.mean(diff if signed else np.abs(diff)))


class PolicyErrorEvaluator:
    """Fixed test set with precomputed oracle moves, reusable during training."""

    def __init__(self, p: BatchLqProblem, x, t, T: float, saturation: float | None = None):
        self.problem = p
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.t = np.asarray(t, dtype=float)
        self.T = T
        self.u_star = oracle_first_moves(p, self.x, self.t, T)
        self.saturated = 0 if saturation is None else int(np.sum(np.abs(self.u_star) > saturation))

    def __call__(self, policy, signed: bool = False) -> float:
        return policy_error(policy, self.problem, self.x, self.t, self.T, signed, self.u_star)

    def write_csv(self, path, policy, names=("d", "phi", "r", "vy")) -> int:
        u_pol = np.asarray(policy(self.x, self.t), dtype=float)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(names) + ["t", "u_star", "u_policy"])
            for xi, ti, us, up in zip(self.x, self.t, self.u_star, u_pol):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(ti)), repr(float(us)), repr(float(up))])
        return len(u_pol)
