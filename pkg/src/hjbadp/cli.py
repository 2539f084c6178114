"""Command-line front end: train, eval, simulate, bench.

Exit status: 0 success, 2 configuration or validation error, 3 numerical failure.
"""

from __future__ import annotations

import os

# workers stay single-threaded so results are reproducible bit for bit
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import micro_ad as ad
from .config import RunConfig, load_config
from .errors import ConfigurationError, NumericalFailure, TrainingDivergenceError
from .lq_oracle import PolicyErrorEvaluator
from .sim_eval import (
    InertialBicyclePlant,
    KinematicBicyclePlant,
    LqMpcController,
    adp_controller,
    bench_lq_horizon_sweep,
    bench_policy_inference,
    closed_loop_sim,
    speedup,
    tracking_metrics,
    write_timing_csv,
)
from .trainer import (
    DEFAULT_LOWER,
    DEFAULT_UPPER,
    SamplingBox,
    TrainedPolicy,
    build_networks,
    sample_batch,
    train,
)
from .vehicle import STATE_NAMES

log = logging.getLogger("hjbadp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class RunContext:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.tag = cfg.digest()

    def path(self, kind: str, seed: int, ext: str, suffix: str = "") -> Path:
        extra = f"_{suffix}" if suffix else ""
        return self.out / f"{kind}_{self.tag}_s{seed}{extra}.{ext}"

    def echo_config(self) -> Path:
        p = self.out / f"config_{self.tag}.json"
        p.write_text(json.dumps(self.cfg.effective(), indent=2, sort_keys=True) + "\n")
        return p


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get("HJBADP_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigurationError(f"HJBADP_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def evaluation_states(cfg: RunConfig):
    """The fixed evaluation states, drawn from the training box with the oracle seed."""
    lo, hi = cfg.box_bounds()
    box = SamplingBox(lo, hi, cfg.ocp.T)
    return sample_batch(box, cfg.oracle.test_states, np.random.default_rng(cfg.oracle.test_seed))


def make_evaluator(cfg: RunConfig) -> PolicyErrorEvaluator | None:
    if cfg.ocp.plant != "linear":
        return None
    x, t = evaluation_states(cfg)
    return PolicyErrorEvaluator(cfg.oracle_problem(), x, t, cfg.ocp.T, saturation=cfg.vehicle.delta_max)


def _train_one(cfg: RunConfig, out: Path, seed: int) -> dict:
    ctx = RunContext(cfg, out)
    ckpt = ctx.path("policy", seed, "ckpt")
    evaluator = make_evaluator(cfg)
    try:
        policy, history = train(cfg.train_config(seed, ckpt), evaluator)
    except TrainingDivergenceError as exc:
        return {"seed": seed, "status": "diverged", "message": str(exc),
                "checkpoint": None if exc.checkpoint is None else str(exc.checkpoint)}
    history.write_csv(ctx.path("trainlog", seed, "csv"))
    err = evaluator(policy) if evaluator is not None else None
    return {"seed": seed, "status": "ok", "checkpoint": str(ckpt), "policy_error": err,
            "iterations": history.iterations_run, "stopped_early": history.stopped_early}


def cmd_train(cfg: RunConfig, out: Path) -> int:
    ctx = RunContext(cfg, out)
    ctx.echo_config()
    seeds = cfg.seeds
    n = worker_count(len(seeds))
    if n == 1:
        results = [_train_one(cfg, out, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_train_one, [cfg] * len(seeds), [out] * len(seeds), seeds))
    status = EXIT_OK
    errors = []
    for r in results:
        if r["status"] != "ok":
            print(f"seed {r['seed']}: {r['message']}; last checkpoint: {r['checkpoint'] or 'none'}",
                  file=sys.stderr)
            status = EXIT_NUMERIC
            continue
        line = f"seed {r['seed']}: {r['iterations']} iterations, checkpoint {r['checkpoint']}"
        if r["policy_error"] is not None:
            errors.append(r["policy_error"])
            line += f", policy error {100 * r['policy_error']:.3f}%"
        print(line)
    if errors:
        print(f"mean policy error over {len(errors)} seed(s): {100 * float(np.mean(errors)):.3f}%")
    return status


def load_policy(cfg: RunConfig, path) -> tuple[TrainedPolicy, dict]:
    try:
        nets, meta = ad.load_checkpoint(path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{path}: malformed checkpoint ({exc})") from None
    if set(nets) != {"actor", "critic"}:
        raise ConfigurationError(f"{path}: expected actor and critic networks, found {sorted(nets)}")
    ref = build_networks(cfg.state_dim, cfg.network.width, cfg.network.hidden_layers, 0, cfg.vehicle.delta_max,
                         cfg.network.hidden_activation)
    for name in ("actor", "critic"):
        got = [s.to_dict() for s in nets[name].specs]
        want = [s.to_dict() for s in getattr(ref, name).specs]
        if got != want:
            raise ConfigurationError(f"{path}: {name} architecture does not match network section of config")
    return TrainedPolicy(nets["actor"], nets["critic"]), meta


def _seed_of(meta: dict, cfg: RunConfig) -> int:
    return int(meta.get("seed", cfg.seeds[0]))


def cmd_eval(cfg: RunConfig, out: Path, checkpoint) -> int:
    if checkpoint is None:
        raise ConfigurationError("eval needs --checkpoint")
    if cfg.ocp.plant != "linear":
        raise ConfigurationError("eval compares against the LQ oracle and needs ocp.plant = linear")
    policy, meta = load_policy(cfg, checkpoint)
    ctx = RunContext(cfg, out)
    ev = make_evaluator(cfg)
    err = ev(policy)
    path = ctx.path("eval", _seed_of(meta, cfg), "csv")
    rows = ev.write_csv(path, policy, STATE_NAMES)
    print(f"policy error {100 * err:.4f}% over {rows} test states -> {path}")
    if ev.saturated:
        print(f"note: {ev.saturated} oracle moves exceed the steering bound", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path, checkpoint) -> int:
    ctx = RunContext(cfg, out)
    sim = cfg.simulation
    p = cfg.vehicle_params()
    plant = InertialBicyclePlant(p) if cfg.ocp.plant == "linear" else KinematicBicyclePlant(p)
    controllers = {}
    seed = cfg.seeds[0]
    if "adp" in cfg.controllers:
        if checkpoint is None:
            raise ConfigurationError("simulate with the adp controller needs --checkpoint")
        policy, meta = load_policy(cfg, checkpoint)
        seed = _seed_of(meta, cfg)
        controllers["adp"] = adp_controller(policy)
    if "lq_mpc" in cfg.controllers:
        controllers["lq_mpc"] = LqMpcController(cfg.oracle_problem())
    ref = cfg.reference()
    metrics = {}
    failed = []
    for name, ctl in controllers.items():
        trace = closed_loop_sim(plant, ctl, ref, sim.duration, cfg.ocp.dt, sim.y0, sim.heading0,
                                p.delta_max, label=name)
        trace.write_csv(ctx.path("sim", seed, "csv", name))
        if not trace.valid:
            failed.append(name)
            continue
        metrics[name] = tracking_metrics(trace)
    keys = ("I_yerr", "I_ymax", "I_theta_err", "I_theta_max", "I_ycomf")
    lines = ["controller " + " ".join(f"{k:>12}" for k in keys)]
    for name, m in metrics.items():
        lines.append(f"{name:<10} " + " ".join(f"{getattr(m, k):12.6g}" for k in keys))
    table = "\n".join(lines) + "\n"
    ctx.path("metrics", seed, "txt").write_text(
        table + "\n" + "".join(f"[{n}]\n{m.as_text()}" for n, m in metrics.items()))
    ctx.path("metrics", seed, "json").write_text(
        json.dumps({n: m.as_dict() for n, m in metrics.items()}, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    if failed:
        print(f"plant blow-up for {', '.join(failed)}; partial trace written and flagged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path, checkpoint) -> int:
    ctx = RunContext(cfg, out)
    b = cfg.benchmark
    if checkpoint is not None:
        policy, meta = load_policy(cfg, checkpoint)
        seed = _seed_of(meta, cfg)
    else:
        # inference cost does not depend on the weights
        seed = cfg.seeds[0]
        policy = build_networks(cfg.state_dim, cfg.network.width, cfg.network.hidden_layers, seed,
                                cfg.vehicle.delta_max, cfg.network.hidden_activation)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.box_bounds()
    pol_states = list(rng.uniform(lo, hi, size=(b.states, len(lo))))
    lq_states = list(rng.uniform(DEFAULT_LOWER, DEFAULT_UPPER, size=(b.states, 4)))
    rec = bench_policy_inference(policy, pol_states, b.reps, b.warmup)
    sweep = bench_lq_horizon_sweep(cfg.oracle_problem(), b.horizons, lq_states, b.lq_reps, b.warmup)
    path = ctx.path("bench", seed, "csv")
    write_timing_csv(path, [rec] + sweep)
    print(f"policy inference mean {rec.mean_ms:.4f} ms over {rec.samples} calls")
    for r in sweep:
        print(f"LQ batch solve N={r.horizon}: mean {r.mean_ms:.4f} ms")
    ref_n = 100 if 100 in b.horizons else max(b.horizons)
    print(f"speedup at N={ref_n}: {speedup(sweep, rec, ref_n):.1f}x -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hjbadp", description="Finite-horizon ADP for lateral vehicle control")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "train actor and critic for every configured seed"),
                           ("eval", "policy error of a checkpoint against the LQ oracle"),
                           ("simulate", "closed-loop tracking runs and metrics"),
                           ("bench", "policy inference vs LQ batch solve timing")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed-override", type=int, help="run this single seed instead of the configured list")
        if name != "train":
            sp.add_argument("--checkpoint", help="trained policy checkpoint")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.model_copy(update={"seeds": [args.seed_override]})
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out)
        handler = {"eval": cmd_eval, "simulate": cmd_simulate, "bench": cmd_bench}[args.command]
        return handler(cfg, out, args.checkpoint)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
