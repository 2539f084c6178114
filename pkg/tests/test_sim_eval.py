import math

import numpy as np
import pytest

from hjbadp.errors import ConfigurationError, ContractViolation
from hjbadp.lq_oracle import batch_lq_solve, tracking_problem
from hjbadp.sim_eval import (
    InertialBicyclePlant,
    KinematicBicyclePlant,
    LqMpcController,
    ReferenceSpec,
    SimTrace,
    TimingRecord,
    bench_lq_horizon_sweep,
    bench_policy_inference,
    closed_loop_sim,
    make_reference,
    settling_time,
    speedup,
    tracking_metrics,
    write_timing_csv,
    zero_controller,
)
from hjbadp.trainer import build_networks
from hjbadp.vehicle import VehicleParams, build_linear_dynamics

P = VehicleParams()
DYN = build_linear_dynamics(P)


def trace_from(ey, eth=None, r=None):
    ey = np.asarray(ey, dtype=float)
    n = len(ey)
    eth = np.zeros(n) if eth is None else np.asarray(eth, dtype=float)
    r = np.zeros(n) if r is None else np.asarray(r, dtype=float)
    z = np.zeros(n)
    return SimTrace(times=0.005 * np.arange(n), states=np.zeros((n, 5)), errors=np.zeros((n, 4)),
                    controls=z, y_actual=ey, y_desired=z, heading_actual=eth, heading_desired=z,
                    yaw_rate=r)


def test_reference_examples():
    y, th = make_reference(ReferenceSpec("straight"))
    assert y(12.0) == 0.0 and th(-4.0) == 0.0
    y, th = make_reference(ReferenceSpec("sine", amplitude=1.0, wavelength=100.0))
    assert y(25.0) == pytest.approx(1.0, rel=1e-15)
    assert th(25.0) == pytest.approx(0.0, abs=1e-15)
    assert th(0.0) == pytest.approx(math.atan(2 * math.pi / 100.0), rel=1e-15)


def test_reference_heading_is_slope_angle():
    for kind in ("sine", "double_lane_change"):
        y, th = make_reference(ReferenceSpec(kind, amplitude=2.0, wavelength=40.0))
        xs = np.linspace(0.0, 120.0, 241)
        slope = (y(xs + 1e-6) - y(xs - 1e-6)) / 2e-6
        np.testing.assert_allclose(th(xs), np.arctan(slope), atol=1e-7)


def test_double_lane_change_shape():
    spec = ReferenceSpec("double_lane_change", amplitude=3.5, wavelength=30.0)
    y, _ = make_reference(spec)
    assert y(0.0) == 0.0
    assert y(15.0 + 30.0 + 10.0) == pytest.approx(3.5)
    assert y(500.0) == pytest.approx(0.0, abs=1e-15)


def test_reference_validation():
    with pytest.raises(ConfigurationError):
        ReferenceSpec("circle")
    with pytest.raises(ConfigurationError):
        ReferenceSpec(amplitude=-1.0)


def test_metrics_examples():
    m = tracking_metrics(trace_from([0.3, -0.4]))
    assert m.I_yerr == pytest.approx(math.sqrt(0.125), rel=1e-15)
    assert m.I_yerr == pytest.approx(0.35355, abs=5e-6)
    assert m.I_ymax == 0.4
    m = tracking_metrics(trace_from(np.full(17, 0.1)))
    assert m.I_yerr == pytest.approx(0.1, rel=1e-14) and m.I_ymax == 0.1
    assert all(v == 0 for v in tracking_metrics(trace_from(np.zeros(5))).as_dict().values())


def test_metrics_orderings_and_shift(rng):
    for _ in range(20):
        n = int(rng.integers(1, 50))
        tr = trace_from(rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n))
        m = tracking_metrics(tr)
        assert min(m.as_dict().values()) >= 0
        assert m.I_ymax >= m.I_yerr and m.I_theta_max >= m.I_theta_err
        c = rng.standard_normal()
        shifted = trace_from(tr.y_actual, tr.heading_actual, tr.yaw_rate)
        shifted.y_actual = tr.y_actual + c
        shifted.y_desired = tr.y_desired + c
        ms = tracking_metrics(shifted)
        assert ms.I_yerr == pytest.approx(m.I_yerr, rel=1e-12, abs=1e-12)


def test_metrics_reject_empty_and_invalid():
    with pytest.raises(ContractViolation):
        tracking_metrics(trace_from([]))
    tr = trace_from([0.1])
    tr.valid = False
    with pytest.raises(ContractViolation):
        tracking_metrics(tr)


def test_straight_equilibrium_hold():
    tr = closed_loop_sim(InertialBicyclePlant(P), zero_controller, ReferenceSpec("straight"), duration=2.0)
    assert len(tr) == 400 and tr.valid
    assert np.all(tr.y_actual == 0)
    assert all(v == 0 for v in tracking_metrics(tr).as_dict().values())
    np.testing.assert_allclose(np.diff(tr.times), 0.005, atol=1e-12)
    np.testing.assert_allclose(tr.states[-1, 0], 15.0 * (2.0 - 0.005), rtol=1e-12)


def test_saturation_contract():
    tr = closed_loop_sim(InertialBicyclePlant(P), lambda e: 5.0 * e[0], ReferenceSpec(), duration=3.0, y0=2.0)
    assert np.all(np.abs(tr.controls) <= 0.35)
    assert np.any(np.abs(tr.controls) == 0.35)


def test_inertial_plant_matches_linear_model_near_straight():
    # along a straight road with small heading, the error rates reduce to the linear model
    plant = InertialBicyclePlant(P)
    s = np.array([0.0, 0.2, 1e-4, 0.01, -0.02])
    e = plant.tracking_error(s, 0.0, 0.0)
    de = plant.derivative(s, 0.01)
    lin = DYN(e, 0.01)
    np.testing.assert_allclose([de[1], de[2], de[3], de[4]], lin, rtol=1e-6, atol=1e-8)


def test_kinematic_plant_runs_and_is_deterministic():
    plant = KinematicBicyclePlant(P)
    ctl = lambda e: -0.02 * e[0] - 0.3 * e[1]
    a = closed_loop_sim(plant, ctl, ReferenceSpec(), duration=5.0, y0=1.0)
    b = closed_loop_sim(plant, ctl, ReferenceSpec(), duration=5.0, y0=1.0)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.errors.shape == (1000, 2)


def test_lq_mpc_controller_matches_batch_solve(rng):
    p = tracking_problem(DYN, 0.4, 280.0, 0.005, 100)
    ctl = LqMpcController(p)
    for _ in range(5):
        e = rng.standard_normal(4)
        assert ctl(e) == pytest.approx(batch_lq_solve(p, e)[0], rel=1e-10, abs=1e-14)


def test_lq_mpc_reduces_offset():
    p = tracking_problem(DYN, 0.4, 280.0, 0.005, 100)
    tr = closed_loop_sim(InertialBicyclePlant(P), LqMpcController(p), ReferenceSpec("straight"),
                         duration=20.0, y0=1.0)
    assert abs(tr.y_actual[-1]) < abs(tr.y_actual[0])


def test_settling_time():
    tr = trace_from([0.5, 0.2, 0.05, 0.01, 0.0])
    assert settling_time(tr, 0.1) == pytest.approx(0.01)
    assert settling_time(trace_from([0.0, 0.0]), 0.1) == 0.0
    assert settling_time(trace_from([0.0, 0.3]), 0.1) is None


def test_trace_csv(tmp_path):
    tr = closed_loop_sim(InertialBicyclePlant(P), zero_controller, ReferenceSpec(), duration=0.05)
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "time,x_pos,y_actual,y_desired,heading_actual,heading_desired,yaw_rate,delta,d,phi,r,vy"
    assert len(lines) == 11


def test_timing_invariants_and_sweep(tmp_path, rng):
    pol = build_networks(4, seed=0)
    states = list(rng.uniform(-1, 1, (20, 4)))
    rec = bench_policy_inference(pol, states, reps=200)
    assert rec.min_ms <= rec.mean_ms <= rec.max_ms and rec.p99_ms >= rec.min_ms
    assert rec.samples == 200 and rec.horizon is None
    p = tracking_problem(DYN, 0.4, 280.0, 0.005, 100)
    sweep = bench_lq_horizon_sweep(p, [5, 50], states, reps=100, warmup=5)
    assert [r.horizon for r in sweep] == [5, 50]
    write_timing_csv(tmp_path / "b.csv", [rec] + sweep)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].split(",")[1] == "-"
    assert speedup(sweep, rec, 50) == pytest.approx(sweep[1].mean_ms / rec.mean_ms)
    with pytest.raises(ConfigurationError):
        bench_policy_inference(pol, states, reps=10)


def test_timing_record_from_samples():
    r = TimingRecord.from_samples("x", 3, [1e6, 2e6, 3e6])
    assert (r.min_ms, r.mean_ms, r.max_ms) == (1.0, 2.0, 3.0)
