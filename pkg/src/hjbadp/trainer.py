"""Actor-critic policy iteration on the finite-horizon HJB equation.

Policy evaluation regresses the Hamiltonian of the critic onto the terminal
utility reached by rolling the current policy out to the final time; policy
improvement descends the Hamiltonian itself with respect to the actor.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import micro_ad as ad
from .errors import ConfigurationError, NumericalFailure, TrainingDivergenceError
from .ocp import OcpInstance, rollout_terminal, utility, utility_du

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "j_critic", "j_actor", "hamiltonian_residual", "policy_error", "elapsed_s")

DEFAULT_LOWER = (-3.0, -0.3, -1.0, -2.0)
DEFAULT_UPPER = (3.0, 0.3, 1.0, 2.0)


@dataclass(frozen=True, eq=False)
class SamplingBox:
    lower: np.ndarray
    upper: np.ndarray
    t_max: float = 0.5

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("sampling box bounds must be equal-length vectors")
        if not np.all(lo < hi):
            raise ConfigurationError("sampling box needs lower < upper in every dimension")
        if not self.t_max > 0:
            raise ConfigurationError("sampling box time range must be positive")

    @property
    def dim(self) -> int:
        return self.lower.size


def sample_batch(box: SamplingBox, n: int, rng: np.random.Generator):
    """``n`` i.i.d. uniform draws over the box and ``[0, t_max]``; returns ``(x, t)``."""
    if n < 1:
        raise ConfigurationError("batch size must be >= 1")
    x = rng.uniform(box.lower, box.upper, size=(n, box.dim))
    t = rng.uniform(0.0, box.t_max, size=n)
    return x, t


@dataclass(frozen=True, eq=False)
class TrainedPolicy:
    actor: ad.MlpParams
    critic: ad.MlpParams

    def __call__(self, x, t):
        """Steering for a batch of states at times ``t``."""
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return ad.mlp_apply(self.actor, np.concatenate([x, t[..., None]], axis=-1))[..., 0]

    def value(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return ad.mlp_apply(self.critic, np.concatenate([x, t[..., None]], axis=-1))[..., 0]


def build_networks(state_dim: int, width: int = 32, hidden_layers: int = 3, seed: int = 0,
                   control_bound: float = 0.35, hidden: str = "elu") -> TrainedPolicy:
    """Fresh actor (scaled-tanh output) and critic (softplus output) over ``[x; t]``."""
    n_in = state_dim + 1
    actor = ad.mlp_init(ad.mlp_specs(n_in, width, hidden_layers, 1, "scaled_tanh", hidden, control_bound), seed)
    critic = ad.mlp_init(ad.mlp_specs(n_in, width, hidden_layers, 1, "softplus", hidden), seed + 1)
    return TrainedPolicy(actor, critic)


def policy_eval(policy: TrainedPolicy, x, t: float = 0.0) -> float:
    """Single-state actor evaluation; online use passes ``t = 0``."""
    z = np.empty(len(x) + 1)
    z[:-1] = x
    z[-1] = t
    return float(ad.mlp_apply(policy.actor, z)[0])


def _stack(x, t):
    return np.concatenate([x, np.asarray(t, dtype=float)[:, None]], axis=1)


@dataclass
class CriticPass:
    loss: float
    grad: ad.ParamGradient
    residual: np.ndarray  # H - l_T per sample
    hamiltonian: np.ndarray


def critic_pass(batch, policy: TrainedPolicy, critic: ad.MlpParams, ocp: OcpInstance,
                terminal_value_weight: float = 0.0, rollout=None) -> CriticPass:
    x, t = batch
    n = x.shape[0]
    u = policy(x, t)
    f = ocp.dynamics(x, u)
    if rollout is None:
        rollout = rollout_terminal(policy, ocp, x, t)
    x_T, _, l_T = rollout
    direction = np.concatenate([f, np.zeros((n, 1))], axis=1)
    _, adv, tc = ad.tangent_forward(critic, _stack(x, t), direction)
    ham = utility(x, u, ocp.weights) + adv
    res = ham - l_T
    loss = 0.5 * float(np.mean(res**2))
    grad = ad.tangent_param_grad(critic, tc, res / n)
    if terminal_value_weight > 0:
        v_T, cache = ad.mlp_forward(critic, _stack(x_T, np.full(n, ocp.horizon.T)))
        loss += 0.5 * terminal_value_weight * float(np.mean(v_T[:, 0] ** 2))
        grad = grad + ad.param_grad(critic, cache, terminal_value_weight * v_T / n)
    if not np.isfinite(loss):
        raise TrainingDivergenceError("critic loss is not finite")
    return CriticPass(loss, grad, res, ham)


def critic_step(batch, policy: TrainedPolicy, critic: ad.MlpParams, ocp: OcpInstance,
                terminal_value_weight: float = 0.0):
    """Mean of 0.5 (H - l_T)^2 and its gradient through the critic's advection term."""
    r = critic_pass(batch, policy, critic, ocp, terminal_value_weight)
    return r.loss, r.grad


def actor_step(batch, actor: ad.MlpParams, critic: ad.MlpParams, ocp: OcpInstance):
    """Mean Hamiltonian under the frozen critic and its gradient w.r.t. the actor."""
    x, t = batch
    n = x.shape[0]
    z = _stack(x, t)
    u_out, cache = ad.mlp_forward(actor, z)
    u = u_out[:, 0]
    _, vcache = ad.mlp_forward(critic, z)
    grad_x = ad.input_grad(critic, vcache)[:, : x.shape[1]]
    f = ocp.dynamics(x, u)
    ham = utility(x, u, ocp.weights) + np.sum(grad_x * f, axis=1)
    dh_du = utility_du(u, ocp.weights) + np.sum(grad_x * ocp.dynamics.control_jacobian(x, u), axis=1)
    loss = float(np.mean(ham))
    if not np.isfinite(loss):
        raise TrainingDivergenceError("actor loss is not finite")
    return loss, ad.param_grad(actor, cache, dh_du / n)


@dataclass
class TrainConfig:
    ocp: OcpInstance
    box: SamplingBox
    batch_size: int = 256
    lr_critic: float = 1e-3
    lr_actor: float = 1e-3
    max_iterations: int = 50_000
    seed: int = 0
    eval_every: int = 1000
    terminal_value_weight: float = 0.0
    width: int = 32
    hidden_layers: int = 3
    hidden: str = "elu"
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: Path | None = None
    plateau_window: int = 1000
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if not (self.lr_critic > 0 and self.lr_actor > 0):
            raise ConfigurationError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_iterations < 0 or self.eval_every < 1:
            raise ConfigurationError("max_iterations must be >= 0 and eval_every >= 1")
        if self.box.dim != self.ocp.state_dim:
            raise ConfigurationError(
                f"sampling box has {self.box.dim} dimensions, the plant has {self.ocp.state_dim}"
            )


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    stopped_early: bool = False
    iterations_run: int = 0

    def append(self, rec: dict) -> None:
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("log iterations must increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["iteration"]] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


def read_log_csv(path) -> TrainingLog:
    out = TrainingLog()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {"iteration": int(row["iteration"])}
            for c in LOG_COLUMNS[1:]:
                rec[c] = float(row[c]) if row[c] else float("nan")
            out.append(rec)
    return out


def train(config: TrainConfig, evaluator: Callable[[TrainedPolicy], float] | None = None,
          initial: TrainedPolicy | None = None):
    """Alternate one critic update and one actor update per iteration.

    Log records average the per-iteration losses since the previous record.
    ``evaluator`` (e.g. an oracle policy-error metric) is called at each record.
    """
    ocp = config.ocp
    rng = np.random.default_rng(config.seed)
    pol = initial or build_networks(ocp.state_dim, config.width, config.hidden_layers, config.seed,
                                     ocp.control_bound, config.hidden)
    actor, critic = pol.actor, pol.critic
    s_actor, s_critic = ad.AdamState.fresh(actor), ad.AdamState.fresh(critic)
    history = TrainingLog()
    last_good = None
    win = config.plateau_window
    jc_hist, ja_hist = [], []
    acc = np.zeros(3)
    acc_n = 0
    t0 = time.perf_counter()

    def checkpoint(it):
        nonlocal last_good
        if config.checkpoint_path is not None:
            last_good = ad.save_checkpoint(config.checkpoint_path, {"actor": actor, "critic": critic},
                                           {"iteration": it, "seed": config.seed})

    it = 0
    try:
        for it in range(1, config.max_iterations + 1):
            batch = sample_batch(config.box, config.batch_size, rng)
            current = TrainedPolicy(actor, critic)
            cp = critic_pass(batch, current, critic, ocp, config.terminal_value_weight)
            critic, s_critic = ad.adam_step(critic, cp.grad, s_critic, config.lr_critic)
            ja, g_actor = actor_step(batch, actor, critic, ocp)
            actor, s_actor = ad.adam_step(actor, g_actor, s_actor, config.lr_actor)

            acc += (cp.loss, ja, float(np.mean(np.abs(cp.residual))))
            acc_n += 1
            jc_hist.append(cp.loss)
            ja_hist.append(ja)
            if it % config.eval_every == 0:
                mean = acc / acc_n
                err = evaluator(TrainedPolicy(actor, critic)) if evaluator else float("nan")
                history.append({
                    "iteration": it, "j_critic": mean[0], "j_actor": mean[1],
                    "hamiltonian_residual": mean[2], "policy_error": err,
                    "elapsed_s": time.perf_counter() - t0,
                })
                log.info("iter %d  J_critic %.3e  J_actor %.3e  |H-l_T| %.3e  err %.4f",
                         it, mean[0], mean[1], mean[2], err)
                acc[:] = 0.0
                acc_n = 0
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                checkpoint(it)
            if len(jc_hist) >= 2 * win:
                jc_now, jc_prev = np.mean(jc_hist[-win:]), np.mean(jc_hist[-2 * win:-win])
                ja_now, ja_prev = np.mean(ja_hist[-win:]), np.mean(ja_hist[-2 * win:-win])
                del jc_hist[:-2 * win], ja_hist[:-2 * win]
                if abs(jc_now - jc_prev) < config.plateau_tol and abs(ja_now - ja_prev) < config.plateau_tol:
                    history.stopped_early = True
                    break
    except NumericalFailure as exc:
        raise TrainingDivergenceError(f"training diverged at iteration {it}: {exc}",
                                      checkpoint=last_good, iteration=it) from exc
    history.iterations_run = it
    if config.checkpoint_path is not None:
        checkpoint(it)
    return TrainedPolicy(actor, critic), history
