import math

import numpy as np
import pytest

from levitraj import paths, sim, trapsolve
from levitraj.forcemodel import ForceParams
from levitraj.trapsolve import TrapTrajectory

from conftest import designed

P = ForceParams.device()


def static(u=(0.0, 0.0, 0.0), rate=1000.0, T=0.01):
    n = int(round(T * rate))
    u = np.tile(np.asarray(u, float), (n, 1))
    return TrapTrajectory(t=np.arange(n) / rate, u=u, q=u.copy(), T=T, rate=rate)


def test_static_equilibrium():
    tr = sim.simulate(static(), P, p0=np.zeros(3), v0=np.zeros(3), duration=1.0)
    assert not tr.escaped
    assert np.abs(tr.p).max() <= 1e-12


def _oscillation(dt, duration):
    dz = 0.1 * math.pi / (2 * P.V_z)
    return sim.simulate(static(), P, p0=[0, 0, -dz], v0=np.zeros(3), dt=dt, duration=duration)


def test_vertical_oscillation_conserves_amplitude():
    period = 2 * math.pi / math.sqrt(P.A_z * P.V_z / P.mass)
    for dt in (1e-5, 5e-6):
        tr = _oscillation(dt, 10 * period)
        z = tr.p[:, 2]
        first = np.abs(z[tr.t <= tr.t[0] + period]).max()
        last = np.abs(z[tr.t >= tr.t[-1] - period]).max()
        assert abs(last / first - 1) <= 0.01
        assert np.abs(tr.p[:, :2]).max() == 0.0


def test_rk4_order():
    T = 0.02
    ref = _oscillation(1.25e-5, T).p[-1]
    e1 = np.abs(_oscillation(1e-4, T).p[-1] - ref).max()
    e2 = np.abs(_oscillation(5e-5, T).p[-1] - ref).max()
    assert 12 <= e1 / e2 <= 20


def test_escape_flag():
    path = paths.circle(0.03)
    traj = trapsolve.baseline_trajectory(path, 0.02)
    tr = sim.simulate(traj, P, duration=0.2)
    assert tr.escaped and tr.escape_time is not None
    d = np.linalg.norm(tr.p[-1] - tr.u[-1])
    assert d > sim.escape_radius(P)
    with pytest.raises(ValueError):
        sim.metrics(tr, path)


def test_perfect_tracking_metrics():
    path = paths.circle(0.02)
    traj = trapsolve.baseline_trajectory(path, 0.1)
    t = np.arange(2 * len(traj)) / traj.rate
    q = np.vstack([traj.q, traj.q])
    trace = sim.SimTrace(t=t, p=q, pdot=np.zeros_like(q), u=q, accel=np.zeros_like(q),
                         escaped=False, escape_time=None, period=0.1)
    m = sim.metrics(trace, path, min_duration=0.2)
    assert m["rmse"] <= 1e-12 and m["periods"] == 2
    assert m["path_length"] == pytest.approx(2 * math.pi * 0.02, rel=1e-9)


def test_nearest_point_projection(rng):
    path = paths.circle(0.02)
    proj = sim.NearestPoint(path)
    pts = rng.uniform(-0.03, 0.03, (20, 3))
    pts[:, 1] = 0
    _, q = proj(pts)
    exact = 0.02 * pts / np.linalg.norm(pts, axis=1)[:, None]
    np.testing.assert_allclose(q, exact, atol=1e-12)


def test_fish_end_to_end():
    path, traj = designed("fish", 0.0876, 0.1)
    tr = sim.simulate(traj, P)
    assert not tr.escaped
    m = sim.metrics(tr, path)
    assert m["max_error"] <= 1e-3
    assert m["rmse_normalized"] <= 0.5
    assert m["periods"] == 20


@pytest.mark.parametrize("kind,width,period", [("circle", 0.07, 1 / 15), ("cardioid", 0.0909, 0.1),
                                               ("fish", 0.0876, 0.1)])
def test_simulated_accel_within_caps(kind, width, period):
    _, traj = designed(kind, width, period)
    tr = sim.simulate(traj, P)
    assert not tr.escaped
    assert tr.accel_horizontal.max() <= 300 * 1.05
    assert np.abs(tr.accel_vertical).max() <= 600 * 1.05


def test_zero_noise_trials_are_deterministic():
    path, traj = designed("cardioid", 0.0909, 0.1)
    rep = sim.perturbed_trials(traj, P, path, n=3, noise=sim.NoiseSpec.none())
    assert rep.successes == 3 and rep.success
    assert len(set(rep.rmse_normalized_trials)) == 1
    a = sim.perturbed_trials(traj, P, path, n=2, seed=7, duration=0.5)
    b = sim.perturbed_trials(traj, P, path, n=2, seed=7, duration=0.5, workers=2)
    assert a.to_dict() == b.to_dict()


def test_baseline_squircle_escapes_at_optimized_size():
    path = paths.make_builtin("squircle", 0.053)
    traj = trapsolve.baseline_trajectory(path, 0.1, "param")
    rep = sim.perturbed_trials(traj, P, path, n=10)
    assert not rep.success and rep.successes == 0
    assert not sim.baseline_feasible(path, 0.1, P)


def test_trace_csv(tmp_path):
    path, traj = designed("cardioid", 0.0909, 0.1)
    tr = sim.simulate(traj, P, duration=0.1).attach_path(path)
    tr.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,p_x,p_y,p_z,e,ax_h,a_z"
    assert len(lines) == len(tr.t) + 1


def test_trial_validation():
    path, traj = designed("cardioid", 0.0909, 0.1)
    with pytest.raises(ValueError):
        sim.perturbed_trials(traj, P, path, n=0)
