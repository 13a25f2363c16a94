import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitraj import acoustics as ac

CFG = ac.ArrayConfig()
PART = ac.ParticleProps()
REF = json.loads((Path(__file__).parent / "data" / "acoustic_reference.json").read_text())


def test_matches_frozen_scalar_oracle():
    act = ac.twin_trap_activation(CFG, REF["trap"])
    np.testing.assert_allclose(act.phase[:8], REF["phase_first8"], atol=1e-12)
    np.testing.assert_allclose(act.phase[256:264], REF["phase_top_first8"], atol=1e-12)
    np.testing.assert_allclose(act.amplitude[[0, 256]], [REF["amp_bottom"], REF["amp_top"]], rtol=1e-12)
    scale = max(abs(complex(pt["re_p"], pt["im_p"])) for pt in REF["points"])
    for pt in REF["points"]:
        p = ac.pressure(CFG, act, pt["x"])
        assert abs(p - complex(pt["re_p"], pt["im_p"])) <= 1e-10 * scale
        F = ac.gorkov_force(CFG, act, PART, pt["x"])
        assert np.abs(F - pt["force"]).max() <= 1e-5 * np.abs(pt["force"]).max()


def test_centre_twin_trap_phases_mirror_with_pi_offset():
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    bottom, top = act.phase[:256], act.phase[256:]
    diff = np.mod(top - bottom, 2 * math.pi)
    np.testing.assert_allclose(diff, math.pi, atol=1e-9)


def test_equidistant_same_side_equal_phase():
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    pos, _ = CFG.transducers()
    # (i, j) and (j, i) on the bottom array are equidistant from the centre
    a = 3 * 16 + 5
    b = 5 * 16 + 3
    assert abs(np.linalg.norm(pos[a]) - np.linalg.norm(pos[b])) < 1e-15
    assert abs(act.phase[a] - act.phase[b]) < 1e-12


def test_displaced_trap_phases_by_brute_force():
    trap = np.array([0.01, 0.0, 0.0])
    act = ac.twin_trap_activation(CFG, trap)
    pos, _ = CFG.transducers()
    k = 2 * math.pi * CFG.frequency / CFG.sound_speed
    for i in range(0, 512, 37):
        d = math.sqrt(sum((pos[i][j] - trap[j]) ** 2 for j in range(3)))
        expect = (-k * d + (math.pi if pos[i][2] > 0 else 0.0)) % (2 * math.pi)
        assert abs(act.phase[i] - expect) < 1e-9


def test_single_transducer_inverse_distance():
    one = ac.ArrayConfig(grid=1)
    act = ac.TransducerActivation(np.zeros(2), np.array([1.0, 0.0]))
    z0 = -one.separation / 2
    d = 0.05
    p1 = ac.pressure(one, act, [0, 0, z0 + d])
    p2 = ac.pressure(one, act, [0, 0, z0 + 2 * d])
    assert abs(abs(p1) - 2 * abs(p2)) <= 1e-12 * abs(p1)


def test_focus_maximises_pressure(rng):
    f = np.array([0.005, -0.003, 0.01])
    act = ac.focus_activation(CFG, f)
    pf = abs(ac.pressure(CFG, act, f))
    v = rng.normal(size=(100, 3))
    pts = f + 0.01 * v / np.linalg.norm(v, axis=1)[:, None] * rng.uniform(0, 1, (100, 1)) ** (1 / 3)
    assert np.all(np.abs(ac.pressure(CFG, act, pts)) <= pf)


def _ring_null(trap):
    act = ac.twin_trap_activation(CFG, trap)
    # the signature plane is horizontal, its normal is z
    ang = np.linspace(0, 2 * math.pi, 36, endpoint=False)
    ring = trap + 0.01 * np.column_stack([np.cos(ang), np.zeros_like(ang), np.sin(ang)])
    return abs(ac.pressure(CFG, act, trap)), np.abs(ac.pressure(CFG, act, ring)).max()


def test_twin_trap_null_at_centre():
    c, ring = _ring_null(np.zeros(3))
    assert c <= 0.1 * ring


def test_twin_trap_null_random_positions(rng):
    for trap in rng.uniform(-0.03, 0.03, (10, 3)):
        c, ring = _ring_null(trap)
        assert c <= 0.1 * ring


def test_analytic_gradient_matches_fd(rng):
    act = ac.twin_trap_activation(CFG, [0.0, 0.01, -0.005])
    pts = rng.uniform(-0.02, 0.02, (20, 3))
    _, ga = ac.pressure_gradient(CFG, act, pts)
    _, gf = ac.pressure_gradient(CFG, act, pts, method="fd")
    assert np.abs(ga - gf).max() <= 1e-5 * np.abs(ga).max()


def test_force_is_minus_potential_gradient(rng):
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    pts = rng.uniform(-2e-3, 2e-3, (100, 3))
    F = ac.gorkov_force(CFG, act, PART, pts)
    h = 1e-6
    G = np.empty_like(F)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        G[:, i] = -(ac.gorkov_potential(CFG, act, PART, pts + e)
                    - ac.gorkov_potential(CFG, act, PART, pts - e)) / (2 * h)
    rel = np.linalg.norm(F - G, axis=1) / np.linalg.norm(G, axis=1)
    assert np.all(rel <= 5e-3)


def _axis_scan(act, axis, trap=np.zeros(3)):
    s = np.linspace(-6e-3, 6e-3, 61)
    pts = np.tile(trap, (61, 1))
    pts[:, axis] += s
    return s, ac.gorkov_force(CFG, act, PART, pts)


def test_equilibrium_at_trap_centre():
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    peak = max(np.abs(_axis_scan(act, a)[1]).max() for a in range(3))
    assert np.linalg.norm(ac.gorkov_force(CFG, act, PART, np.zeros(3))) <= 0.01 * peak


def test_force_field_symmetric_under_half_turn(rng):
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    p = rng.uniform(-3e-3, 3e-3, (20, 3))
    rot = p * np.array([-1, -1, 1])
    F = ac.gorkov_force(CFG, act, PART, p)
    Fr = ac.gorkov_force(CFG, act, PART, rot)
    np.testing.assert_allclose(Fr, F * np.array([-1, -1, 1]), atol=1e-6 * np.abs(F).max())


def test_vertical_force_restoring_within_first_peak():
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    s, F = _axis_scan(act, 2)
    inside = (np.abs(s) > 0) & (np.abs(s) < math.pi / (2 * 1307.83))
    assert np.all(np.sign(F[inside, 2]) == -np.sign(s[inside]))


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(0.1, 1.0))
def test_amplitude_linearity(scale):
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    x = np.array([[1e-3, 5e-4, -3e-4]])
    p = ac.pressure(CFG, act, x)
    F = ac.gorkov_force(CFG, act, PART, x)
    small = act.scaled(scale)
    np.testing.assert_allclose(ac.pressure(CFG, small, x), scale * p, rtol=1e-12)
    np.testing.assert_allclose(ac.gorkov_force(CFG, small, PART, x), scale ** 2 * F, rtol=1e-6,
                               atol=1e-12 * np.abs(F).max())


def test_errors():
    with pytest.raises(ac.FieldError):
        ac.twin_trap_activation(CFG, [0.05, 0, 0])
    with pytest.raises(ValueError):
        ac.TransducerActivation(np.zeros(2), np.array([1.0, 1.5]))
    with pytest.raises(ValueError):
        ac.TransducerActivation(np.array([0.0, np.nan]), np.ones(2))
    with pytest.raises(ac.FieldError):
        ac.pressure(CFG, ac.focus_activation(CFG, [0, 0, 0]), CFG.transducers()[0][0])
    with pytest.raises(ValueError):
        ac.ParticleProps(radius=1.0e-3).check(CFG)


def test_config_roundtrip(tmp_path):
    f = tmp_path / "array.json"
    f.write_text(json.dumps(CFG.to_dict()))
    assert ac.ArrayConfig.load(f) == CFG


def test_field_scan_export(tmp_path):
    act = ac.twin_trap_activation(CFG, [0, 0, 0])
    rows = ac.field_scan(CFG, act, PART, [[0, 0, 1e-3], [1e-3, 0, 0]])
    f = tmp_path / "scan.csv"
    ac.write_field_scan(f, rows)
    back = np.loadtxt(f, delimiter=",", skiprows=1)
    assert f.read_text().splitlines()[0] == "x,y,z,re_p,im_p,Fx,Fy,Fz"
    np.testing.assert_array_equal(back, rows)
