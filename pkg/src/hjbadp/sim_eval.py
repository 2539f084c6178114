"""Closed-loop tracking simulation, tracking metrics and timing benchmarks."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractViolation, IntegrationBlowupError
from .lq_oracle import BatchLqProblem, batch_lq_solve, build_batch_matrices
from .ocp import rk4_step
from .trainer import TrainedPolicy, policy_eval
from .vehicle import VehicleParams, build_linear_dynamics, kinematic_bicycle_derivative, sideslip

# double lane change geometry defaults: entry straight and hold length (metres)
DLC_ENTRY = 15.0
DLC_HOLD = 25.0


@dataclass(frozen=True)
class ReferenceSpec:
    kind: str = "sine"
    amplitude: float = 1.5
    wavelength: float = 150.0
    duration: float = 20.0
    # double lane change only: straight run before the first transition, and
    # length held in the offset lane; each transition spans one wavelength
    dlc_entry: float = DLC_ENTRY
    dlc_hold: float = DLC_HOLD

    def __post_init__(self):
        if self.dlc_entry < 0 or self.dlc_hold < 0:
            raise ConfigurationError("lane change entry and hold lengths must be >= 0")
        if self.kind not in ("sine", "double_lane_change", "straight"):
            raise ConfigurationError(f"unknown reference kind {self.kind!r}")
        if self.amplitude < 0 or not self.wavelength > 0:
            raise ConfigurationError("reference needs amplitude >= 0 and wavelength > 0")


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _smoothstep_slope(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s**2 * (1.0 - s) ** 2, 0.0)


def make_reference(spec: ReferenceSpec):
    """Return ``(y_r, theta_r)`` as functions of the longitudinal position."""
    A, lam = spec.amplitude, spec.wavelength
    if spec.kind == "straight":
        return (lambda x: 0.0 * np.asarray(x, dtype=float)), (lambda x: 0.0 * np.asarray(x, dtype=float))
    if spec.kind == "sine":
        k = 2.0 * np.pi / lam
        return (lambda x: A * np.sin(k * np.asarray(x, dtype=float)),
                lambda x: np.arctan(A * k * np.cos(k * np.asarray(x, dtype=float))))
    # double lane change: quintic transitions of length `wavelength`, offset `amplitude`
    x1 = spec.dlc_entry
    x2 = spec.dlc_entry + lam + spec.dlc_hold

    def y_r(x):
        x = np.asarray(x, dtype=float)
        return A * (_smoothstep((x - x1) / lam) - _smoothstep((x - x2) / lam))

    def theta_r(x):
        x = np.asarray(x, dtype=float)
        return np.arctan(A / lam * (_smoothstep_slope((x - x1) / lam) - _smoothstep_slope((x - x2) / lam)))

    return y_r, theta_r


class InertialBicyclePlant:
    """Linear lateral dynamics (yaw rate, lateral velocity) driving exact planar kinematics.

    State: [x_pos, y_pos, heading, r, vy]. The controller sees [d, phi, r, vy].
    """

    error_names = ("d", "phi", "r", "vy")

    def __init__(self, p: VehicleParams):
        self.params = p
        self.lin = build_linear_dynamics(p)

    def initial_state(self, y0: float = 0.0, heading0: float = 0.0) -> np.ndarray:
        return np.array([0.0, y0, heading0, 0.0, 0.0])

    def derivative(self, s, u):
        A, B, vx = self.lin.A, self.lin.B[:, 0], self.params.vx
        heading, r, vy = s[2], s[3], s[4]
        return np.array([
            vx * np.cos(heading) - vy * np.sin(heading),
            vx * np.sin(heading) + vy * np.cos(heading),
            r,
            A[2, 2] * r + A[2, 3] * vy + B[2] * u,
            A[3, 2] * r + A[3, 3] * vy + B[3] * u,
        ])

    def tracking_error(self, s, y_r, theta_r) -> np.ndarray:
        c = np.cos(theta_r)
        return np.array([(s[1] - y_r) * c, s[2] - theta_r, s[3], s[4]])

    def yaw_rate(self, s, u) -> float:
        return float(s[3])


class KinematicBicyclePlant:
    """Kinematic bicycle pose [x_pos, y_pos, heading]; the controller sees [d, phi]."""

    error_names = ("d", "phi")

    def __init__(self, p: VehicleParams):
        self.params = p

    def initial_state(self, y0: float = 0.0, heading0: float = 0.0) -> np.ndarray:
        return np.array([0.0, y0, heading0])

    def derivative(self, s, u):
        return kinematic_bicycle_derivative(self.params, s, u)

    def tracking_error(self, s, y_r, theta_r) -> np.ndarray:
        return np.array([(s[1] - y_r) * np.cos(theta_r), s[2] - theta_r])

    def yaw_rate(self, s, u) -> float:
        return float(self.params.vx / self.params.b * np.sin(sideslip(self.params, u)))


@dataclass
class SimTrace:
    times: np.ndarray
    states: np.ndarray
    errors: np.ndarray
    controls: np.ndarray
    y_actual: np.ndarray
    y_desired: np.ndarray
    heading_actual: np.ndarray
    heading_desired: np.ndarray
    yaw_rate: np.ndarray
    error_names: tuple = ("d", "phi", "r", "vy")
    valid: bool = True
    label: str = ""

    def __len__(self) -> int:
        return len(self.times)

    def write_csv(self, path) -> None:
        cols = ["time", "x_pos", "y_actual", "y_desired", "heading_actual", "heading_desired",
                "yaw_rate", "delta"] + list(self.error_names)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self.times)):
                row = [self.times[k], self.states[k, 0], self.y_actual[k], self.y_desired[k],
                       self.heading_actual[k], self.heading_desired[k], self.yaw_rate[k],
                       self.controls[k], *self.errors[k]]
                w.writerow([repr(float(v)) for v in row])


def adp_controller(policy: TrainedPolicy) -> Callable:
    """Compiled-policy execution: the actor evaluated at virtual time zero."""
    return lambda e: policy_eval(policy, e, 0.0)


class LqMpcController:
    """Receding-horizon LQ: apply the first move of the batch solution at every step.

    The condensed problem is time-invariant, so its factorization is built once.
    """

    def __init__(self, p: BatchLqProblem):
        from scipy.linalg import cho_factor

        S, T, Qbar, Rbar = build_batch_matrices(p)
        QS = Qbar @ S
        self._factor = cho_factor(2.0 * (Rbar + S.T @ QS))
        self._F = 2.0 * QS.T @ T

    def __call__(self, e) -> float:
        from scipy.linalg import cho_solve

        return float(-cho_solve(self._factor, self._F @ e)[0])


def zero_controller(e) -> float:
    return 0.0


def closed_loop_sim(plant, controller, ref: ReferenceSpec, duration: float | None = None,
                    dt: float = 0.005, y0: float = 0.0, heading0: float = 0.0,
                    delta_max: float = 0.35, label: str = "") -> SimTrace:
    """Fixed-step closed loop: measure error, saturate the command, hold it for one RK4 step."""
    duration = ref.duration if duration is None else duration
    if not duration > 0 or not dt > 0:
        raise ConfigurationError("simulation needs duration > 0 and dt > 0")
    y_r, theta_r = make_reference(ref)
    n = int(round(duration / dt))
    s = plant.initial_state(y0, heading0)
    rows = []
    valid = True
    for k in range(n):
        t = k * dt
        yr, thr = float(y_r(s[0])), float(theta_r(s[0]))
        e = plant.tracking_error(s, yr, thr)
        u = float(np.clip(controller(e), -delta_max, delta_max))
        rows.append((t, s.copy(), e, u, s[1], yr, s[2], thr, plant.yaw_rate(s, u)))
        try:
            s = rk4_step(lambda z, _t: plant.derivative(z, u), s, lambda z, _t: u, t, dt)
        except IntegrationBlowupError:
            valid = False
            break
    cols = list(zip(*rows))
    return SimTrace(
        times=np.array(cols[0]), states=np.array(cols[1]), errors=np.array(cols[2]),
        controls=np.array(cols[3]), y_actual=np.array(cols[4]), y_desired=np.array(cols[5]),
        heading_actual=np.array(cols[6]), heading_desired=np.array(cols[7]),
        yaw_rate=np.array(cols[8]), error_names=tuple(plant.error_names), valid=valid, label=label,
    )


@dataclass(frozen=True)
class Metrics:
    I_yerr: float
    I_ymax: float
    I_theta_err: float
    I_theta_max: float
    I_ycomf: float

    def as_dict(self) -> dict:
        return asdict(self)

    def as_text(self) -> str:
        return "\n".join(f"{k} = {v:.6g}" for k, v in self.as_dict().items()) + "\n"


def _rms(v) -> float:
    return float(np.sqrt(np.mean(np.square(v))))


def tracking_metrics(trace: SimTrace) -> Metrics:
    if len(trace) == 0:
        raise ContractViolation("cannot score an empty trace")
    if not trace.valid:
        raise ContractViolation("trace is flagged invalid (plant blow-up)")
    ey = trace.y_actual - trace.y_desired
    eth = trace.heading_actual - trace.heading_desired
    return Metrics(_rms(ey), float(np.max(np.abs(ey))), _rms(eth), float(np.max(np.abs(eth))),
                   _rms(trace.yaw_rate))


def settling_time(trace: SimTrace, tol: float) -> float | None:
    """First time after which |y - y_des| stays below ``tol``; None if it never settles."""
    bad = np.flatnonzero(np.abs(trace.y_actual - trace.y_desired) >= tol)
    if bad.size == 0:
        return float(trace.times[0])
    if bad[-1] == len(trace) - 1:
        return None
    return float(trace.times[bad[-1] + 1])


TIMING_COLUMNS = ("label", "horizon", "samples", "mean_ms", "min_ms", "max_ms", "p99_ms")


@dataclass(frozen=True)
class TimingRecord:
    label: str
    horizon: int | None
    samples: int
    mean_ms: float
    min_ms: float
    max_ms: float
    p99_ms: float
    median_ms: float = field(default=float("nan"), compare=False)

    @classmethod
    def from_samples(cls, label: str, horizon, ns) -> "TimingRecord":
        ms = np.asarray(ns, dtype=float) * 1e-6
        return cls(label, horizon, int(ms.size), float(ms.mean()), float(ms.min()), float(ms.max()),
                   float(np.percentile(ms, 99)), float(np.median(ms)))

    def row(self) -> list:
        return [self.label, "-" if self.horizon is None else self.horizon, self.samples,
                f"{self.mean_ms:.6f}", f"{self.min_ms:.6f}", f"{self.max_ms:.6f}", f"{self.p99_ms:.6f}"]


def _time_calls(fn, args_seq, reps: int, warmup: int) -> list:
    m = len(args_seq)
    for i in range(warmup):
        fn(args_seq[i % m])
    out = []
    clock = time.perf_counter_ns
    for i in range(reps):
        a = args_seq[i % m]
        t0 = clock()
        fn(a)
        out.append(clock() - t0)
    return out


def bench_policy_inference(policy: TrainedPolicy, states, reps: int = 1000, warmup: int = 50,
                           label: str = "adp_policy") -> TimingRecord:
    """Per-call wall clock of ``policy_eval`` at t = 0."""
    if reps < 100:
        raise ConfigurationError("timing needs at least 100 measured calls")
    states = [np.asarray(s, dtype=float) for s in states]
    ns = _time_calls(lambda s: policy_eval(policy, s, 0.0), states, reps, warmup)
    return TimingRecord.from_samples(label, None, ns)


def bench_lq_horizon_sweep(p_base: BatchLqProblem, horizons, states, reps: int = 100,
                           warmup: int = 50) -> list:
    """Per-call wall clock of a full batch LQ solve (build, factorize, solve) for each horizon."""
    horizons = list(horizons)
    if not horizons:
        raise ConfigurationError("horizon sweep needs at least one horizon")
    if reps < 100:
        raise ConfigurationError("timing needs at least 100 measured calls")
    states = [np.asarray(s, dtype=float) for s in states]
    out = []
    for N in horizons:
        p = replace(p_base, N=int(N))
        ns = _time_calls(lambda s: batch_lq_solve(p, s), states, reps, warmup)
        out.append(TimingRecord.from_samples("lq_batch", int(N), ns))
    return out


def write_timing_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for r in records:
            w.writerow(r.row())


def speedup(records, policy_record: TimingRecord, horizon: int) -> float:
    lq = next(r for r in records if r.horizon == horizon)
    return lq.mean_ms / policy_record.mean_ms
