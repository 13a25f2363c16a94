import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitraj import forcemodel as fm
from levitraj.forcemodel import ForceParams

P = ForceParams.published()
finite = st.floats(-3e-3, 3e-3)
vec = st.tuples(finite, finite, finite).map(np.array)


def test_zero_offset_zero_force():
    np.testing.assert_array_equal(fm.axisym_force(P, [0.01, 0, 0], [0.01, 0, 0]), 0.0)


@pytest.mark.parametrize("sign", [1, -1])
def test_radial_peak_gives_A_r(sign):
    u = np.array([sign * math.pi / (2 * P.kxr), 0, 0])
    F = fm.axisym_force(P, np.zeros(3), u)
    np.testing.assert_allclose(F, [sign * 4.636e-4, 0, 0], rtol=1e-12, atol=1e-18)


def test_vertical_peak_gives_A_z():
    F = fm.axisym_force(P, np.zeros(3), [0, 0, math.pi / (2 * P.V_z)])
    np.testing.assert_allclose(F, [0, 0, 2.758e-4], rtol=1e-12, atol=1e-18)


def test_legacy_models():
    leg = fm.LegacyParams(K=(-0.0071, -0.0071, -0.94), A=(9e-5, 9e-5, 1.9e-3), V=(68.92, 68.92, 1307.83))
    np.testing.assert_array_equal(fm.spring_force(leg, [1, 2, 3], [1, 2, 3]), 0.0)
    np.testing.assert_array_equal(fm.sinusoid_force(leg, [1, 2, 3], [1, 2, 3]), 0.0)
    F = fm.spring_force(leg, np.zeros(3), [0, 0, 1e-3])
    assert abs(abs(F[2]) - 9.4e-4) < 1e-15 and F[2] > 0
    F = fm.sinusoid_force(leg, np.zeros(3), [math.pi / (2 * 68.92), 0, 0])
    np.testing.assert_allclose(F, [9e-5, 0, 0], rtol=1e-12, atol=1e-20)


def test_non_invertibility_witness():
    for x in (1e-4, 1e-3, 2.5e-3):
        zt = math.pi / (2 * P.V_z)
        a = fm.axisym_force(P, np.zeros(3), [x, 0, zt])
        b = fm.axisym_force(P, np.zeros(3), [-x, 0, zt])
        assert a[2] == b[2]
        assert np.abs(a - b).max() <= 1e-15 * P.A_r


def test_jacobian_matches_fd(rng):
    for d in rng.uniform(-3e-3, 3e-3, (20, 3)):
        J = fm.axisym_force_jacobian(P, d)
        h = 1e-9
        G = np.column_stack([(fm.axisym_force_offset(P, d + h * e) - fm.axisym_force_offset(P, d - h * e)) / (2 * h)
                             for e in np.eye(3)])
        assert np.abs(J - G).max() <= 1e-5 * np.abs(J).max()


@settings(max_examples=50, deadline=None)
@given(p=vec, d=vec, phi=st.floats(0, 2 * math.pi))
def test_rotation_equivariance(p, d, phi):
    c, s = math.cos(phi), math.sin(phi)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    u = p + d
    F = fm.axisym_force(P, p, u)
    Fr = fm.axisym_force(P, u + R @ (p - u), u)
    np.testing.assert_allclose(Fr, R @ F, atol=1e-12 * max(P.A_r, P.A_z))


@settings(max_examples=50, deadline=None)
@given(p=vec, u=vec)
def test_midplane_reflection_flips_vertical(p, u):
    m = np.array([1, 1, -1])
    F = fm.axisym_force(P, p, u)
    Fm = fm.axisym_force(P, p * m, u * m)
    np.testing.assert_allclose(Fm, F * m, atol=1e-12 * max(P.A_r, P.A_z))


@settings(max_examples=50, deadline=None)
@given(p=vec, u=vec, shift=vec)
def test_depends_only_on_offset(p, u, shift):
    np.testing.assert_allclose(fm.axisym_force(P, p + shift, u + shift), fm.axisym_force(P, p, u),
                               atol=1e-12 * max(P.A_r, P.A_z))


def test_models_agree_on_axes():
    leg = fm.LegacyParams(K=(-1, -1, -1), A=(P.A_r, P.A_r, P.A_z), V=(P.kxr, P.kxr, P.V_z))
    for ax, lim in ((0, P.radial_peak), (2, P.vertical_peak)):
        for s in np.linspace(-lim, lim, 11):
            u = np.zeros(3)
            u[ax] = s
            np.testing.assert_allclose(fm.axisym_force(P, np.zeros(3), u),
                                       fm.sinusoid_force(leg, np.zeros(3), u), atol=1e-18)


def test_zeta_force_substitution():
    A = P
    np.testing.assert_allclose(fm.force_from_zeta(A, [0, 0.3, 0, 0.2, 0.5, 0.1]), 0.0, atol=0)
    np.testing.assert_allclose(fm.force_from_zeta(A, [1, 1, 0, 1, 0, 1]), [A.A_r, 0, 0], atol=1e-20)
    np.testing.assert_allclose(fm.force_from_zeta(A, [0, 1, 1, 1, 0, 1]), [0, 0, A.A_z], atol=1e-20)


@settings(max_examples=50, deadline=None)
@given(d=st.tuples(st.floats(-3e-3, 3e-3), st.floats(-3e-3, 3e-3), st.floats(-1e-3, 1e-3)))
def test_zeta_roundtrip_and_identities(d):
    d = np.array(d)
    z = fm.zeta_from_offset(P, d)
    assert abs(z[1] ** 2 + z[2] ** 2 - 1) < 1e-12
    assert abs(z[4] ** 2 + z[5] ** 2 - 1) < 1e-12
    r = math.hypot(d[0], d[1])
    if P.kxr * r <= math.pi / 2:
        assert abs(fm.radial_coupling(P, z[0]) - z[3]) < 1e-9
        np.testing.assert_allclose(fm.offset_from_zeta(P, z), d, atol=1e-12)
    np.testing.assert_allclose(fm.force_from_zeta(P, z), fm.axisym_force_offset(P, d),
                               atol=1e-12 * max(P.A_r, P.A_z))


def test_fit_recovers_synthetic_parameters():
    truth = ForceParams(A_r=5e-4, A_z=3e-4, V_z=1250.0, V_xr=-500.0, V_zr=300.0)
    data = fm.sample_oracle(lambda p, u: fm.axisym_force(truth, p, u), fm.trap_grid(2), probes=60)
    fitted, legacy, errors = fm.fit_models(data)
    for name in ("A_r", "A_z", "V_z", "V_xr", "V_zr"):
        assert abs(getattr(fitted, name) - getattr(truth, name)) <= 1e-6 * abs(getattr(truth, name))
    assert errors["axis-symmetric"] < 1e-8
    assert errors["axis-symmetric"] < errors["sinusoidal"] < errors["spring"]


def test_calibration_file_roundtrip(tmp_path):
    cal = fm.Calibration(fitted=P, errors={"spring": 0.6, "sinusoidal": 0.3, "axis-symmetric": 0.04})
    f = tmp_path / "cal.json"
    cal.save(f)
    back = fm.Calibration.load(f)
    assert back.fitted == P and back.errors == cal.errors and back.device == cal.device
    assert cal.device.max_accel == pytest.approx((300.0, 600.0))
    assert json.loads(f.read_text())["device"]["A_r"] == 2.1e-5


def test_error_report(tmp_path):
    f = tmp_path / "err.csv"
    fm.write_error_report({"spring": 0.6, "sinusoidal": 0.3, "axis-symmetric": 0.04}, f, samples=10)
    lines = f.read_text().splitlines()
    assert lines[0] == "model,mean_relative_error,samples" and len(lines) == 4


def test_invalid_params():
    with pytest.raises(ValueError):
        ForceParams(A_r=-1, A_z=1, V_z=1, V_xr=1, V_zr=1)
    with pytest.raises(ValueError):
        ForceParams(A_r=1, A_z=1, V_z=0, V_xr=1, V_zr=1)
    assert 0 < P.radial_peak < 0.04 and 0 < P.vertical_peak < 0.04
