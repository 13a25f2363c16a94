import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitraj import paths

KINDS = paths.BUILTINS


def fd(path, theta, order, h=1e-5):
    if order == 1:
        return (path.eval(theta + h) - path.eval(theta - h)) / (2 * h)
    return (path.eval(theta + h) - 2 * path.eval(theta) + path.eval(theta - h)) / h ** 2


def test_cardioid_reference_points():
    c = paths.cardioid(0.02)
    np.testing.assert_allclose(c.eval(0.0), [0, 0, -0.02], atol=1e-15)
    np.testing.assert_allclose(c.eval(math.pi), [0, 0, 0.02], atol=1e-15)
    np.testing.assert_allclose(paths.cardioid(0.025).eval(0.0), [0, 0, -0.025], atol=1e-15)


def test_cardioid_corner_has_zero_velocity():
    c = paths.cardioid(0.02)
    d1 = c.derivative(math.pi, 1)
    np.testing.assert_allclose(d1, 0.0, atol=1e-15)
    np.testing.assert_allclose(d1, fd(c, math.pi, 1), atol=1e-8)


def test_circle_radius_and_speed():
    c = paths.make_builtin("circle", 0.07)
    th = np.linspace(0, 2 * math.pi, 50)
    np.testing.assert_allclose(np.linalg.norm(c.eval(th), axis=1), 0.035, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(c.derivative(th, 1), axis=1), 0.035, rtol=1e-12)
    q = c.eval(math.pi / 2)
    assert abs(np.linalg.norm(q) - 0.035) < 1e-15 and q[1] == 0.0


@pytest.mark.parametrize("kind,width", [("circle", 0.07), ("cardioid", 0.0909),
                                        ("squircle", 0.053), ("fish", 0.0876)])
def test_builtin_widths(kind, width):
    assert abs(paths.horizontal_width(paths.make_builtin(kind, width)) - width) <= 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_periodic_closure(kind):
    p = paths.make_builtin(kind, 0.05)
    assert np.linalg.norm(p.eval(p.theta0) - p.eval(p.thetaf)) <= 1e-12
    assert np.linalg.norm(p.derivative(p.theta0, 1) - p.derivative(p.thetaf, 1)) <= 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_derivatives_match_finite_differences(kind, rng):
    p = paths.make_builtin(kind, 0.06)
    th = rng.uniform(0, 2 * math.pi, 100)
    for order, h in ((1, 1e-6), (2, 1e-4)):
        exact = p.derivative(th, order)
        approx = fd(p, th, order, h)
        scale = np.linalg.norm(exact, axis=1).max()
        assert np.abs(exact - approx).max() <= 1e-5 * scale


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(KINDS), size=st.floats(0.01, 0.1), s=st.floats(0.2, 3.0),
       theta=st.floats(0, 2 * math.pi))
def test_scaling_equivariance(kind, size, s, theta):
    a = paths.make_builtin(kind, s * size).eval(theta)
    b = s * paths.make_builtin(kind, size).eval(theta)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(kind=st.sampled_from(KINDS), a=st.floats(0, 3), b=st.floats(3, 2 * math.pi))
def test_arc_length_additive(kind, a, b):
    p = paths.make_builtin(kind, 0.05)
    whole = p.arc_length(0.0, b)
    assert abs(p.arc_length(0.0, a) + p.arc_length(a, b) - whole) <= 1e-9 * max(whole, 1e-12)


def test_spline_circle_from_eight_points():
    th = np.arange(8) * 2 * math.pi / 8
    pts = np.column_stack([0.03 * np.cos(th), np.zeros(8), 0.03 * np.sin(th)])
    sp = paths.spline_path(pts, periodic=True)
    dense = sp.eval(np.linspace(sp.theta0, sp.thetaf, 2000))
    r = np.hypot(dense[:, 0], dense[:, 2])
    assert np.abs(r - 0.03).max() <= 0.02 * 0.03


def test_spline_collinear_is_straight():
    pts = np.array([[0, 0, 0], [0.01, 0, 0], [0.02, 0, 0], [0.03, 0, 0]], dtype=float)
    sp = paths.spline_path(pts, periodic=False)
    th = np.linspace(sp.theta0, sp.thetaf, 50)
    np.testing.assert_allclose(sp.derivative(th, 2), 0.0, atol=1e-9)
    np.testing.assert_allclose(sp.eval(th)[:, 1:], 0.0, atol=1e-15)


def test_spline_square_loop_closes():
    s = np.linspace(0, 1, 4, endpoint=False)
    side = [np.column_stack([s, 0 * s]), np.column_stack([1 + 0 * s, s]),
            np.column_stack([1 - s, 1 + 0 * s]), np.column_stack([0 * s, 1 - s])]
    xz = 0.02 * np.vstack(side)
    pts = np.column_stack([xz[:, 0], np.zeros(16), xz[:, 1]])
    sp = paths.spline_path(pts, periodic=True)
    assert np.linalg.norm(sp.eval(sp.theta0) - sp.eval(sp.thetaf)) <= 1e-12


def test_baseline_strategies_agree_on_circle():
    c = paths.make_builtin("circle", 0.07)
    _, a = paths.baseline_timing(c, paths.BaselineTiming("arc", 0.1, 200))
    _, b = paths.baseline_timing(c, paths.BaselineTiming("param", 0.1, 200))
    np.testing.assert_allclose(a, b, atol=1e-8)


def _corner_accel(n):
    c = paths.make_builtin("cardioid", 0.0909)
    t, th = paths.baseline_timing(c, paths.BaselineTiming("arc", 0.1, n))
    a = paths.finite_difference_accel(c.eval(th), t[1] - t[0])
    return np.linalg.norm(a, axis=1), th[:-1]


def test_arc_length_timing_diverges_at_cardioid_corner():
    a1, th1 = _corner_accel(1000)
    a2, _ = _corner_accel(2000)
    near = np.abs(th1 - math.pi) < 0.2
    assert a1[near].max() > 10 * 600
    assert a2.max() > a1.max()


def test_param_timing_bounded_on_cardioid():
    c = paths.make_builtin("cardioid", 0.0909)
    peaks = []
    for n in (1000, 2000):
        t, th = paths.baseline_timing(c, paths.BaselineTiming("param", 0.1, n))
        peaks.append(np.linalg.norm(paths.finite_difference_accel(c.eval(th), t[1] - t[0]), axis=1).max())
    assert peaks[0] < 600 and abs(peaks[1] - peaks[0]) < 0.01 * peaks[0]


def test_shape_document_roundtrip(tmp_path):
    spec = paths.ShapeSpec(kind="fish", size_m=0.0876, plane="xz")
    f = tmp_path / "shape.json"
    import json
    f.write_text(json.dumps(spec.to_dict()))
    again = paths.load_shape(f)
    np.testing.assert_array_equal(again.build().eval(1.0), spec.build().eval(1.0))
    with pytest.raises(ValueError):
        paths.load_shape({"kind": "fish", "colour": "red"})


def test_bad_builtin_arguments():
    with pytest.raises(ValueError):
        paths.make_builtin("circle", -1.0)
    with pytest.raises(ValueError):
        paths.make_builtin("circle", 0.05, plane="xw")


def test_lap_path_repeats_base():
    base = paths.make_builtin("cardioid", 0.05)
    lp = paths.LapPath(base, 3)
    assert not lp.periodic and lp.span == pytest.approx(3 * base.span)
    th = np.linspace(0, base.span, 7)
    for k in range(3):
        np.testing.assert_allclose(lp.eval_derivs(th + k * base.span)[2], base.eval_derivs(th)[2],
                                   atol=1e-12)
    with pytest.raises(paths.PathDomainError):
        lp.eval(3.5 * base.span)
    with pytest.raises(ValueError):
        paths.LapPath(base, 0)
