import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hjbadp import cli
from hjbadp.config import load_config, parse_config
from hjbadp.errors import ConfigurationError, TrainingDivergenceError
from hjbadp.lq_oracle import remaining_steps, riccati_solve

SMOKE = {
    "ocp": {"Q": 0.4, "R": 280.0, "T": 0.5},
    "network": {"width": 8, "hidden_layers": 2},
    "training": {"batch_size": 16, "max_iterations": 10, "eval_every": 5},
    "simulation": {"duration": 1.0},
    "benchmark": {"horizons": [10, 30, 60, 100], "reps": 100, "lq_reps": 100, "warmup": 5, "states": 5},
    "seeds": [0],
}


def write_cfg(tmp_path, data, name="cfg.json") -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def with_section(data, section, **kw):
    d = json.loads(json.dumps(data))
    d.setdefault(section, {}).update(kw)
    return d


@pytest.fixture
def trained(tmp_path):
    cfg = write_cfg(tmp_path, SMOKE)
    out = tmp_path / "out"
    assert cli.run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    (ckpt,) = out.glob("policy_*_s0.ckpt")
    return cfg, out, ckpt


def test_missing_weight_names_field_path(tmp_path, capsys):
    data = json.loads(json.dumps(SMOKE))
    del data["ocp"]["Q"]
    assert cli.run(["train", "--config", str(write_cfg(tmp_path, data))]) == 2
    assert "ocp.Q" in capsys.readouterr().err


@pytest.mark.parametrize("bad,path", [
    ({"training": {"lr_actor": -1}}, "training.lr_actor"),
    ({"seeds": []}, "seeds"),
    ({"simulation": {"kind": "spiral"}}, "simulation.kind"),
    ({"training": {"box_lower": [0, 0]}}, "training.box_lower"),
    ({"vehicle": {"vx": 0}}, "vehicle.vx"),
    ({"ocp": {"Q": 0.4, "R": 280.0, "T": 0.5, "bogus": 1}}, "ocp.bogus"),
])
def test_invalid_configs(bad, path):
    data = json.loads(json.dumps(SMOKE))
    data.update(bad)
    with pytest.raises(ConfigurationError, match=path.replace(".", r"\.")):
        parse_config(data)


def test_unreadable_config(tmp_path, capsys):
    assert cli.run(["eval", "--config", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert cli.run(["eval", "--config", str(tmp_path / "broken.json")]) == 2


def test_smoke_train_writes_outputs(trained):
    cfg, out, ckpt = trained
    tag = load_config(cfg).digest()
    assert ckpt.name == f"policy_{tag}_s0.ckpt"
    log = out / f"trainlog_{tag}_s0.csv"
    rows = list(csv.DictReader(log.open()))
    assert [r["iteration"] for r in rows] == ["5", "10"]
    assert all(r["policy_error"] for r in rows)


def test_effective_config_round_trip(trained, tmp_path):
    cfg, out, _ = trained
    original = load_config(cfg)
    echoed = load_config(out / f"config_{original.digest()}.json")
    assert echoed.effective() == original.effective()
    assert echoed.training.lr_critic == 1e-3 and echoed.vehicle.k1 == -88000.0


def test_train_is_idempotent(trained, tmp_path):
    cfg, out, ckpt = trained
    first = ckpt.read_text()
    log = next(out.glob("trainlog_*"))
    log_first = [r[:-1] for r in csv.reader(log.open())]
    assert cli.run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert ckpt.read_text() == first
    assert [r[:-1] for r in csv.reader(log.open())] == log_first


def test_seed_override(trained, tmp_path):
    cfg, out, _ = trained
    assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--seed-override", "7"]) == 0
    assert len(list(out.glob("policy_*_s7.ckpt"))) == 1


def test_eval_writes_500_rows(trained, capsys):
    cfg, out, ckpt = trained
    capsys.readouterr()
    assert cli.run(["eval", "--config", str(cfg), "--out", str(out), "--checkpoint", str(ckpt)]) == 0
    printed = float(capsys.readouterr().out.split("policy error ")[1].split("%")[0]) / 100
    (path,) = out.glob("eval_*_s0.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 500
    assert list(rows[0]) == ["d", "phi", "r", "vy", "t", "u_star", "u_policy"]
    u, us = (np.array([float(r[k]) for r in rows]) for k in ("u_policy", "u_star"))
    assert np.mean(np.abs(u - us)) / (us.max() - us.min()) == pytest.approx(printed, rel=1e-4)
    # printed error matches the last training log entry for the same networks
    last = list(csv.DictReader(next(out.glob("trainlog_*")).open()))[-1]
    assert abs(float(last["policy_error"]) - printed) <= 0.005


def test_eval_architecture_mismatch(trained, tmp_path):
    _, out, ckpt = trained
    other = write_cfg(tmp_path, with_section(SMOKE, "network", width=16), "wide.json")
    assert cli.run(["eval", "--config", str(other), "--out", str(out), "--checkpoint", str(ckpt)]) == 2


def test_oracle_equal_policy_scores_zero(tmp_path):
    cfg = parse_config(SMOKE)
    ev = cli.make_evaluator(cfg)
    p = cfg.oracle_problem()
    steps = remaining_steps(ev.t, cfg.ocp.T, cfg.ocp.dt)
    gains = {N: riccati_solve(replace(p, N=int(N)))[0][0] for N in set(steps.tolist()) if N > 0}

    def lq_policy(x, t):
        return np.array([-(gains[N] @ xi) if N > 0 else 0.0 for xi, N in zip(x, steps)])

    assert ev(lq_policy) < 1e-6


def test_simulate_straight_zero_metrics(tmp_path):
    data = with_section(SMOKE, "simulation", kind="straight", controllers=["lq_mpc"])
    out = tmp_path / "o"
    assert cli.run(["simulate", "--config", str(write_cfg(tmp_path, data)), "--out", str(out)]) == 0
    (mj,) = out.glob("metrics_*.json")
    assert all(v == 0 for v in json.loads(mj.read_text())["lq_mpc"].values())


def test_simulate_two_controllers(trained):
    cfg, out, ckpt = trained
    assert cli.run(["simulate", "--config", str(cfg), "--out", str(out), "--checkpoint", str(ckpt)]) == 0
    assert sorted(p.name.rsplit("_", 1)[-1] for p in out.glob("sim_*")) == ["adp.csv", "mpc.csv"]
    table = next(out.glob("metrics_*.txt")).read_text().splitlines()
    assert table[0].split()[0] == "controller" and table[1].startswith("adp") and table[2].startswith("lq_mpc")


def test_simulate_needs_checkpoint_for_adp(tmp_path):
    assert cli.run(["simulate", "--config", str(write_cfg(tmp_path, SMOKE)), "--out", str(tmp_path)]) == 2


def test_bench_rows(trained, capsys):
    cfg, out, ckpt = trained
    capsys.readouterr()
    assert cli.run(["bench", "--config", str(cfg), "--out", str(out), "--checkpoint", str(ckpt)]) == 0
    rows = list(csv.reader(next(out.glob("bench_*")).open()))
    assert rows[0] == ["label", "horizon", "samples", "mean_ms", "min_ms", "max_ms", "p99_ms"]
    assert [r[1] for r in rows[1:]] == ["-", "10", "30", "60", "100"]
    assert "speedup at N=100" in capsys.readouterr().out


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    def boom(config, evaluator=None, initial=None):
        raise TrainingDivergenceError("loss is not finite", checkpoint=Path("/x/last.ckpt"), iteration=3)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.run(["train", "--config", str(write_cfg(tmp_path, SMOKE)), "--out", str(tmp_path)]) == 3
    assert "/x/last.ckpt" in capsys.readouterr().err


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("HJBADP_THREADS", "2")
    assert cli.worker_count(5) == 2 and cli.worker_count(1) == 1
    monkeypatch.setenv("HJBADP_THREADS", "many")
    with pytest.raises(ConfigurationError):
        cli.worker_count(3)
