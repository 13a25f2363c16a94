import math

import numpy as np
import pytest
from dataclasses import replace

from levitraj import ocp, paths, trapsolve
from levitraj.forcemodel import ForceParams, force_from_zeta

from conftest import timing


def small_problem(boundary="periodic", kind="cardioid"):
    p = paths.make_builtin(kind, 0.06)
    cfg = ocp.OcpConfig(nodes=16, gamma=1e-3, boundary=boundary)
    return ocp.build_nlp(p, ForceParams.device(), cfg)


def test_required_accel_examples():
    c = paths.circle(0.03)
    # constant rate on a circle: centripetal 0.03 * w^2 toward the centre
    th = np.array([0.0, math.pi / 2])
    acc = ocp.required_accel(c, th, np.full(2, 10.0), np.zeros(2))
    np.testing.assert_allclose(np.linalg.norm(acc, axis=1), 0.03 * 100, rtol=1e-12)
    # pure tangential acceleration from rest
    acc = ocp.required_accel(c, th, np.zeros(2), np.full(2, 4.0))
    np.testing.assert_allclose(np.linalg.norm(acc, axis=1), 0.03 * 4, rtol=1e-12)


@pytest.mark.parametrize("boundary", ["periodic", "rest"])
def test_derivatives_match_finite_differences(rng, boundary):
    nlp = small_problem(boundary)
    x = ocp.initial_guess(nlp)
    x = x + 1e-3 * rng.standard_normal(nlp.n) * np.maximum(np.abs(x), 1e-2)
    h = 1e-7
    g = nlp.gradient(x)
    J = nlp.jacobian(x).toarray()
    y = rng.standard_normal(nlp.m)
    H = nlp.hessian(x, y, 0.7).toarray()
    for i in rng.choice(nlp.n, 25, replace=False):
        e = np.zeros(nlp.n)
        e[i] = h * max(1.0, abs(x[i]))
        fd_f = (nlp.objective(x + e) - nlp.objective(x - e)) / (2 * e[i])
        fd_c = (nlp.constraints(x + e) - nlp.constraints(x - e)) / (2 * e[i])
        lag = lambda z: 0.7 * nlp.gradient(z) + nlp.jacobian(z).T @ y
        fd_h = (lag(x + e) - lag(x - e)) / (2 * e[i])
        assert abs(fd_f - g[i]) <= 1e-5 * max(1.0, abs(g[i]))
        assert np.abs(fd_c - J[:, i]).max() <= 1e-5 * max(1.0, np.abs(J[:, i]).max())
        assert np.abs(fd_h - H[:, i]).max() <= 1e-4 * max(1.0, np.abs(H[:, i]).max())
    np.testing.assert_allclose(H, H.T, atol=0)


def test_solution_invariants():
    path, cfg, sol = timing("cardioid", 0.06)
    P = ForceParams.device()
    assert sol.diagnostics["success"]
    assert np.all(np.diff(sol.theta) > 0)
    assert np.all(sol.theta_dot >= -1e-9)
    lim = 1 - cfg.epsilon + 1e-9
    assert np.abs(sol.zeta[:, [0, 2]]).max() <= lim
    res = ocp.dynamics_residual(path, P, sol)
    assert np.abs(res).max() <= 1e-8 * P.A_r
    assert sol.theta[-1] - sol.theta[0] == pytest.approx(path.span)
    assert sol.theta_dot[0] == pytest.approx(sol.theta_dot[-1])
    F = force_from_zeta(P, sol.zeta)
    assert np.abs(np.hypot(F[:, 0], F[:, 1])).max() <= P.A_r * (1 + 1e-9)


def test_larger_shape_takes_longer():
    _, _, a = timing("circle", 0.04)
    _, _, b = timing("circle", 0.08)
    # time-optimal period scales with sqrt(size) under a fixed force budget
    assert b.T / a.T == pytest.approx(math.sqrt(2), rel=1e-3)


def test_gamma_trades_time_for_smoothness():
    sols = [timing("squircle", 0.04, gamma=g)[2] for g in (1e-4, 1e-3, 1e-2)]
    Ts = [s.T for s in sols]
    R = [s.regularizer() for s in sols]
    assert Ts[0] <= Ts[1] <= Ts[2]
    assert R[0] >= R[1] >= R[2]


def test_fixed_period_and_stretch():
    path, cfg, sol = timing("circle", 0.05)
    T = sol.T * 1.3
    fixed = ocp.solve_path(path, ForceParams.device(), replace(cfg, fixed_T=T), warm=sol)
    assert fixed.T == pytest.approx(T, rel=1e-12)
    st = ocp.stretch_timing(sol, T)
    acc0 = ocp.required_accel(path, sol.theta, sol.theta_dot, sol.v)
    acc1 = ocp.required_accel(path, st.theta, st.theta_dot, st.v)
    np.testing.assert_allclose(acc1, acc0 / 1.3 ** 2, rtol=1e-12, atol=1e-12)
    with pytest.raises(ocp.InfeasibleError):
        ocp.solve_path(path, ForceParams.device(), replace(cfg, fixed_T=0.5 * sol.T))


def test_save_load_roundtrip(tmp_path):
    _, _, sol = timing("circle", 0.05)
    f = tmp_path / "timing.json"
    ocp.save_timing(sol, f)
    back = ocp.load_timing(f)
    for k in ("t", "theta", "theta_dot", "v", "zeta"):
        np.testing.assert_array_equal(getattr(back, k), getattr(sol, k))
    assert back.T == sol.T and back.gamma == sol.gamma and back.boundary == sol.boundary


def test_rest_mode_starts_at_rest():
    path = paths.make_builtin("circle", 0.04)
    cfg = ocp.OcpConfig(nodes=60, gamma=1e-3, boundary="rest")
    sol = ocp.solve_path(path, ForceParams.device(), cfg)
    assert sol.theta[0] == pytest.approx(path.theta0, abs=1e-12)
    assert sol.theta[-1] == pytest.approx(path.thetaf, abs=1e-9)
    assert abs(sol.theta_dot[0]) < 1e-9
    periodic = timing("circle", 0.04, gamma=1e-3)[2]
    assert sol.T > periodic.T


def test_config_validation():
    for bad in (dict(nodes=4), dict(epsilon=0), dict(epsilon=1), dict(gamma=-1),
                dict(boundary="loop"), dict(fixed_T=-1.0)):
        with pytest.raises(ValueError):
            ocp.OcpConfig(**bad)


def test_unreachable_shape_is_infeasible():
    path = paths.make_builtin("squircle", 0.2)
    with pytest.raises((ocp.InfeasibleError, trapsolve.RecoveryError)):
        trapsolve.design_trajectory(path, ForceParams.device(), period=0.1)
