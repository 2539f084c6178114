"""Run configuration: one JSON document, schema-validated, with defaults filled in."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError
from .lq_oracle import BatchLqProblem, tracking_problem
from .ocp import Horizon, OcpInstance, UtilityWeights
from .sim_eval import ReferenceSpec
from .trainer import DEFAULT_LOWER, DEFAULT_UPPER, SamplingBox, TrainConfig
from .vehicle import KinematicErrorDynamics, VehicleParams, build_linear_dynamics

KINEMATIC_LOWER = (-3.0, -0.3)
KINEMATIC_UPPER = (3.0, 0.3)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VehicleSection(_Section):
    k1: float = -88000.0
    k2: float = -94000.0
    a: float = 1.14
    b: float = 1.4
    m: float = 1500.0
    Izz: float = 2420.0
    vx: float = Field(15.0, gt=0)
    delta_max: float = 0.35


class OcpSection(_Section):
    Q: float = Field(gt=0)
    R: float = Field(gt=0)
    T: float = Field(gt=0)
    dt: float = Field(0.005, gt=0)
    plant: Literal["linear", "kinematic"] = "linear"


class NetworkSection(_Section):
    width: int = Field(32, ge=1)
    hidden_layers: int = Field(3, ge=1)
    hidden_activation: Literal["elu", "tanh", "softplus"] = "elu"


class TrainingSection(_Section):
    batch_size: int = Field(256, ge=1)
    lr_critic: float = Field(1e-3, gt=0)
    lr_actor: float = Field(1e-3, gt=0)
    max_iterations: int = Field(50_000, ge=0)
    eval_every: int = Field(1000, ge=1)
    terminal_value_weight: float = Field(0.0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    plateau_window: int = Field(1000, ge=1)
    plateau_tol: float = Field(1e-6, ge=0)
    # None picks the default box of the configured plant
    box_lower: Optional[List[float]] = None
    box_upper: Optional[List[float]] = None


class OracleSection(_Section):
    method: Literal["zoh", "euler"] = "zoh"
    h: Optional[float] = Field(None, gt=0)
    N: Optional[int] = Field(None, ge=1)
    terminal: Literal["Q", "zero"] = "Q"
    test_states: int = Field(500, ge=2)
    test_seed: int = 12345


class SimulationSection(_Section):
    kind: Literal["sine", "double_lane_change", "straight"] = "sine"
    amplitude: float = Field(1.5, ge=0)
    wavelength: float = Field(150.0, gt=0)
    duration: float = Field(20.0, gt=0)
    dlc_entry: float = Field(15.0, ge=0)
    dlc_hold: float = Field(25.0, ge=0)
    y0: float = 0.0
    heading0: float = 0.0
    # None: adp and lq_mpc on the linear plant, adp alone on the kinematic one
    controllers: Optional[List[Literal["adp", "lq_mpc"]]] = Field(None, min_length=1)


class BenchmarkSection(_Section):
    horizons: List[int] = Field(default_factory=lambda: [10, 30, 60, 100], min_length=1)
    reps: int = Field(1000, ge=100)
    lq_reps: int = Field(100, ge=100)
    warmup: int = Field(50, ge=0)
    states: int = Field(20, ge=1)


class RunConfig(_Section):
    vehicle: VehicleSection = Field(default_factory=VehicleSection)
    ocp: OcpSection
    network: NetworkSection = Field(default_factory=NetworkSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    oracle: OracleSection = Field(default_factory=OracleSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _cross_checks(self):
        o = self.ocp
        n = round(o.T / o.dt)
        if o.dt > o.T or abs(o.T / o.dt - n) > 1e-9 * max(1, n):
            raise ValueError("ocp.dt must divide ocp.T")
        dim = self.state_dim
        tr = self.training
        for name in ("box_lower", "box_upper"):
            v = getattr(tr, name)
            if v is not None and len(v) != dim:
                raise ValueError(f"training.{name} needs {dim} entries for the {o.plant} plant")
        lo, hi = self.box_bounds()
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("training.box_lower must be below training.box_upper in every entry")
        if o.plant == "kinematic" and "lq_mpc" in self.controllers:
            raise ValueError("simulation.controllers: lq_mpc needs the linear plant")
        return self

    @property
    def controllers(self) -> list:
        if self.simulation.controllers is not None:
            return list(self.simulation.controllers)
        return ["adp", "lq_mpc"] if self.ocp.plant == "linear" else ["adp"]

    @property
    def state_dim(self) -> int:
        return 4 if self.ocp.plant == "linear" else 2

    def box_bounds(self):
        if self.ocp.plant == "linear":
            lo, hi = DEFAULT_LOWER, DEFAULT_UPPER
        else:
            lo, hi = KINEMATIC_LOWER, KINEMATIC_UPPER
        tr = self.training
        return tuple(tr.box_lower or lo), tuple(tr.box_upper or hi)

    # domain objects

    def vehicle_params(self) -> VehicleParams:
        return VehicleParams(**self.vehicle.model_dump())

    def ocp_instance(self) -> OcpInstance:
        p = self.vehicle_params()
        dyn = build_linear_dynamics(p) if self.ocp.plant == "linear" else KinematicErrorDynamics(p)
        return OcpInstance(dyn, UtilityWeights(self.ocp.Q, self.ocp.R), Horizon(self.ocp.T, self.ocp.dt),
                           control_bound=p.delta_max)

    def sampling_box(self) -> SamplingBox:
        lo, hi = self.box_bounds()
        return SamplingBox(lo, hi, self.ocp.T)

    def train_config(self, seed: int, checkpoint_path: Path | None = None) -> TrainConfig:
        tr = self.training
        return TrainConfig(
            ocp=self.ocp_instance(), box=self.sampling_box(), batch_size=tr.batch_size,
            lr_critic=tr.lr_critic, lr_actor=tr.lr_actor, max_iterations=tr.max_iterations, seed=seed,
            eval_every=tr.eval_every, terminal_value_weight=tr.terminal_value_weight,
            width=self.network.width, hidden_layers=self.network.hidden_layers,
            hidden=self.network.hidden_activation,
            checkpoint_every=tr.checkpoint_every, checkpoint_path=checkpoint_path,
            plateau_window=tr.plateau_window, plateau_tol=tr.plateau_tol,
        )

    def oracle_problem(self) -> BatchLqProblem:
        """LQ problem on the linear model of the configured vehicle."""
        o = self.oracle
        h = o.h or self.ocp.dt
        N = o.N or int(round(self.ocp.T / h))
        return tracking_problem(build_linear_dynamics(self.vehicle_params()), self.ocp.Q, self.ocp.R, h, N,
                                o.method, o.terminal)

    def reference(self) -> ReferenceSpec:
        s = self.simulation
        return ReferenceSpec(s.kind, s.amplitude, s.wavelength, s.duration, s.dlc_entry, s.dlc_hold)

    def effective(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Short hash of everything that affects results (seeds and output location excluded)."""
        d = self.effective()
        d.pop("seeds")
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:10]


def _describe(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_describe(exc)) from None
    try:
        # surface domain-level validation (vehicle signs, zero speed) at load time
        cfg.ocp_instance()
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return parse_config(data)
