"""Analytic trap-force models and their calibration against a force oracle.

Three models are provided, all functions of the trap-relative offset
``d = u - p`` only:

* spring:      F_i = K_i (p_i - u_i)            (K_i < 0 is restoring)
* sinusoidal:  F_i = A_i sin(V_i (u_i - p_i))
* axis-symmetric (cylindrical about the trap's vertical axis):
      F_r = A_r cos(V_z dz) sin(|V_xr| r)        directed from p towards the trap axis
      F_z = A_z sin(V_z dz) cos(V_zr r)

The sign of V_xr is not used by the force law; a fitted negative value is
kept as-is so parameter files stay comparable with published tables.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize

# measured device capabilities of the reference levitator
DEVICE_FORCE_HORIZONTAL = 2.1e-5  # N
DEVICE_FORCE_VERTICAL = 4.2e-5  # N
PARTICLE_MASS = 0.7e-7  # kg


@dataclass(frozen=True)
class ForceParams:
    A_r: float
    A_z: float
    V_z: float
    V_xr: float
    V_zr: float
    mass: float = PARTICLE_MASS

    def __post_init__(self):
        if not (self.A_r > 0 and self.A_z > 0 and self.mass > 0):
            raise ValueError("A_r, A_z and mass must be positive")
        if self.V_z == 0 or self.V_xr == 0:
            raise ValueError("V_z and V_xr must be non-zero")

    @classmethod
    def published(cls) -> "ForceParams":
        """Gor'kov-scale fit reported for the reference levitator."""
        return cls(A_r=4.636e-4, A_z=2.758e-4, V_z=1307.83, V_xr=-476.49, V_zr=287.87)

    @classmethod
    def device(cls, shape: "ForceParams | None" = None) -> "ForceParams":
        """Published force shape with peaks set to the measured device capabilities."""
        base = cls.published() if shape is None else shape
        return replace(base, A_r=DEVICE_FORCE_HORIZONTAL, A_z=DEVICE_FORCE_VERTICAL,
                       mass=PARTICLE_MASS)

    @property
    def kxr(self) -> float:
        return abs(self.V_xr)

    @property
    def kz(self) -> float:
        return abs(self.V_z)

    @property
    def radial_peak(self) -> float:
        """Horizontal offset of the radial force peak (m)."""
        return math.pi / (2 * self.kxr)

    @property
    def vertical_peak(self) -> float:
        return math.pi / (2 * self.kz)

    @property
    def max_accel(self) -> tuple[float, float]:
        """(horizontal, vertical) peak accelerations in m/s^2."""
        return self.A_r / self.mass, self.A_z / self.mass

    def scaled(self, factor: float) -> "ForceParams":
        return replace(self, A_r=self.A_r * factor, A_z=self.A_z * factor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LegacyParams:
    """Per-axis spring stiffnesses (N/m) and sinusoid amplitudes (N) / frequencies (1/m)."""

    K: tuple = (-0.0071, -0.0071, -0.94)
    A: tuple = (9e-5, 9e-5, 1.9e-3)
    V: tuple = (68.92, 68.92, 1307.83)

    def to_dict(self) -> dict:
        return {"K": list(self.K), "A": list(self.A), "V": list(self.V)}


# --------------------------------------------------------------------------
# force laws
# --------------------------------------------------------------------------

def axisym_force(params: ForceParams, p, u) -> np.ndarray:
    """Axis-symmetric trap force on a particle at p from a trap at u (broadcasts)."""
    d = np.asarray(u, dtype=float) - np.asarray(p, dtype=float)
    return axisym_force_offset(params, d)


def axisym_force_offset(params: ForceParams, d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    r = np.hypot(dx, dy)
    fr = params.A_r * np.cos(params.V_z * dz) * np.sin(params.kxr * r)
    fz = params.A_z * np.sin(params.V_z * dz) * np.cos(params.V_zr * r)
    safe = np.where(r > 0, r, 1.0)
    cphi = np.where(r > 0, dx / safe, 0.0)
    sphi = np.where(r > 0, dy / safe, 0.0)
    return np.stack([fr * cphi, fr * sphi, fz], axis=-1)


def axisym_force_jacobian(params: ForceParams, d) -> np.ndarray:
    """dF/dd for a single offset d = u - p (3x3).  Smooth at r = 0."""
    dx, dy, dz = (float(v) for v in d)
    r = math.hypot(dx, dy)
    k, vz, vzr = params.kxr, params.V_z, params.V_zr
    cz, sz = math.cos(vz * dz), math.sin(vz * dz)
    J = np.zeros((3, 3))
    # F_h = A_r cz * g(r) * (dx, dy) with g(r) = sin(k r)/r
    if r > 1e-9:
        g = math.sin(k * r) / r
        gp = (k * math.cos(k * r) * r - math.sin(k * r)) / r ** 2  # dg/dr
        h = math.cos(vzr * r)
        hp = -vzr * math.sin(vzr * r) / r  # (dh/dr)/r
    else:
        g = k * (1 - (k * r) ** 2 / 6)
        gp = -k ** 3 * r / 3
        h = 1.0
        hp = -vzr ** 2
    rx = dx / r if r > 1e-9 else 0.0
    ry = dy / r if r > 1e-9 else 0.0
    ar = params.A_r
    J[0, 0] = ar * cz * (g + dx * gp * rx)
    J[0, 1] = ar * cz * dx * gp * ry
    J[1, 0] = ar * cz * dy * gp * rx
    J[1, 1] = ar * cz * (g + dy * gp * ry)
    J[0, 2] = -ar * vz * sz * g * dx
    J[1, 2] = -ar * vz * sz * g * dy
    J[2, 0] = params.A_z * sz * hp * dx
    J[2, 1] = params.A_z * sz * hp * dy
    J[2, 2] = params.A_z * vz * cz * h
    return J


def spring_force(legacy: LegacyParams, p, u) -> np.ndarray:
    d = np.asarray(u, dtype=float) - np.asarray(p, dtype=float)
    return -np.asarray(legacy.K) * d


def sinusoid_force(legacy: LegacyParams, p, u) -> np.ndarray:
    d = np.asarray(u, dtype=float) - np.asarray(p, dtype=float)
    return np.asarray(legacy.A) * np.sin(np.asarray(legacy.V) * d)


# --------------------------------------------------------------------------
# auxiliary (zeta) representation of the axis-symmetric force
# --------------------------------------------------------------------------

def force_from_zeta(params: ForceParams, zeta) -> np.ndarray:
    """(A_r z1 z2 z6, A_r z1 z2 z5, A_z z4 z3); zeta has shape (..., 6)."""
    z = np.asarray(zeta, dtype=float)
    z1, z2, z3, z4, z5, z6 = (z[..., i] for i in range(6))
    return np.stack([params.A_r * z1 * z2 * z6, params.A_r * z1 * z2 * z5,
                     params.A_z * z4 * z3], axis=-1)


def zeta_from_offset(params: ForceParams, d, phi_fallback: float = 0.0) -> np.ndarray:
    """The six trigonometric terms for trap offset d = u - p."""
    d = np.asarray(d, dtype=float)
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    r = np.hypot(dx, dy)
    phi = np.where(r > 0, np.arctan2(dy, dx), phi_fallback)
    return np.stack([np.sin(params.kxr * r), np.cos(params.V_z * dz), np.sin(params.V_z * dz),
                     np.cos(params.V_zr * r), np.sin(phi), np.cos(phi)], axis=-1)


def radial_coupling(params: ForceParams, z1):
    """zeta_4 implied by zeta_1 when both come from the same radial offset."""
    kappa = params.V_zr / params.kxr
    return np.cos(kappa * np.arcsin(np.clip(z1, -1.0, 1.0)))


def offset_from_zeta(params: ForceParams, zeta) -> np.ndarray:
    """Closed-form trap offset for a consistent zeta (first-peak branch)."""
    z = np.asarray(zeta, dtype=float)
    s = np.arcsin(np.clip(z[..., 0], -1, 1)) / params.kxr
    dz = np.arctan2(z[..., 2], z[..., 1]) / params.V_z
    return np.stack([s * z[..., 5], s * z[..., 4], dz], axis=-1)


# --------------------------------------------------------------------------
# force -> offset inversion inside the first-peak region
# --------------------------------------------------------------------------

def offset_guess(params: ForceParams, force, phi_prev: float = 0.0) -> np.ndarray:
    """Axis-aligned closed-form guess for the offset producing ``force``."""
    f = np.asarray(force, dtype=float)
    fh = math.hypot(f[0], f[1])
    phi = math.atan2(f[1], f[0]) if fh > 0 else phi_prev
    s = math.asin(min(fh / params.A_r, 0.999)) / params.kxr
    dz = math.asin(float(np.clip(f[2] / params.A_z, -0.999, 0.999))) / params.V_z
    return np.array([s * math.cos(phi), s * math.sin(phi), dz])


# --------------------------------------------------------------------------
# calibration file
# --------------------------------------------------------------------------

@dataclass
class Calibration:
    """Fitted parameters plus the device scaling applied for trajectory planning."""

    fitted: ForceParams
    legacy: LegacyParams = field(default_factory=LegacyParams)
    errors: dict = field(default_factory=dict)
    device_force_horizontal: float = DEVICE_FORCE_HORIZONTAL
    device_force_vertical: float = DEVICE_FORCE_VERTICAL
    mass: float = PARTICLE_MASS

    @property
    def device(self) -> ForceParams:
        return replace(self.fitted, A_r=self.device_force_horizontal,
                       A_z=self.device_force_vertical, mass=self.mass)

    @property
    def scale(self) -> dict:
        return {"horizontal": self.device_force_horizontal / self.fitted.A_r,
                "vertical": self.device_force_vertical / self.fitted.A_z}

    def to_dict(self) -> dict:
        return {"fitted": self.fitted.to_dict(), "legacy": self.legacy.to_dict(),
                "errors": self.errors,
                "device": self.device.to_dict(), "scale": self.scale}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "Calibration":
        fitted = ForceParams(**doc["fitted"])
        leg = doc.get("legacy", {})
        legacy = LegacyParams(**{k: tuple(v) for k, v in leg.items()}) if leg else LegacyParams()
        dev = doc.get("device", {})
        return cls(fitted=fitted, legacy=legacy, errors=doc.get("errors", {}),
                   device_force_horizontal=dev.get("A_r", DEVICE_FORCE_HORIZONTAL),
                   device_force_vertical=dev.get("A_z", DEVICE_FORCE_VERTICAL),
                   mass=dev.get("mass", PARTICLE_MASS))

    @classmethod
    def load(cls, path) -> "Calibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_device_params(path=None) -> ForceParams:
    """Planning parameters from a calibration file, or the published defaults."""
    if path is None:
        return ForceParams.device()
    return Calibration.load(path).device


# --------------------------------------------------------------------------
# fitting against a force oracle
# --------------------------------------------------------------------------

@dataclass
class FitData:
    """Oracle samples: offsets d = u - p (n, 3), forces (n, 3) and per-sample trap id."""

    d: np.ndarray
    F: np.ndarray
    trap: np.ndarray

    def mask(self, floor: float = 0.01) -> np.ndarray:
        """Samples whose force exceeds ``floor`` times the peak force of their trap."""
        mag = np.linalg.norm(self.F, axis=1)
        peak = np.zeros(self.trap.max() + 1)
        np.maximum.at(peak, self.trap, mag)
        return mag > floor * peak[self.trap]


def trap_grid(n_per_axis: int = 3, half_extent: float = 0.02) -> np.ndarray:
    g = np.linspace(-half_extent, half_extent, n_per_axis) if n_per_axis > 1 else np.zeros(1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def probe_offsets(n: int, rng, radial: float, vertical: float) -> np.ndarray:
    """Uniform samples in the cylinder r <= radial, |dz| <= vertical."""
    r = radial * np.sqrt(rng.uniform(0, 1, n))
    phi = rng.uniform(0, 2 * math.pi, n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-vertical, vertical, n)])


def sample_oracle(force_fn, traps, probes: int = 100, seed: int = 0,
                  radial: float | None = None, vertical: float | None = None) -> FitData:
    """Evaluate ``force_fn(p_points, u) -> (m, 3)`` around every trap position.

    The probe region defaults to the first-peak region of the published shape
    constants (radial pi/(2|V_xr|), vertical pi/(2 V_z)).
    """
    ref = ForceParams.published()
    radial = ref.radial_peak if radial is None else radial
    vertical = ref.vertical_peak if vertical is None else vertical
    rng = np.random.default_rng(seed)
    ds, Fs, ids = [], [], []
    for i, u in enumerate(np.asarray(traps, dtype=float)):
        d = probe_offsets(probes, rng, radial, vertical)
        Fs.append(np.asarray(force_fn(u - d, u), dtype=float).reshape(-1, 3))
        ds.append(d)
        ids.append(np.full(probes, i))
    return FitData(np.vstack(ds), np.vstack(Fs), np.concatenate(ids))


def mean_relative_error(F_model, data: FitData, floor: float = 0.01) -> float:
    m = data.mask(floor)
    num = np.linalg.norm(F_model[m] - data.F[m], axis=1)
    return float(np.mean(num / np.linalg.norm(data.F[m], axis=1)))


def _axisym_unit(d, V_z, k, V_zr):
    """Force per unit amplitude: (radial part (n,3) for A_r, vertical part (n,3) for A_z)."""
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    r = np.hypot(dx, dy)
    safe = np.where(r > 0, r, 1.0)
    fr = np.cos(V_z * dz) * np.sin(k * r)
    h = np.column_stack([fr * dx / safe, fr * dy / safe, np.zeros_like(r)])
    v = np.column_stack([np.zeros_like(r), np.zeros_like(r), np.sin(V_z * dz) * np.cos(V_zr * r)])
    return h, v


def _fit_axisym(data: FitData, w) -> ForceParams:
    d, F = data.d, data.F

    def amplitudes(V_z, k, V_zr):
        h, v = _axisym_unit(d, V_z, k, V_zr)
        A_r = np.sum(w[:, None] * h * F) / max(np.sum(w[:, None] * h * h), 1e-300)
        A_z = np.sum(w[:, None] * v * F) / max(np.sum(w[:, None] * v * v), 1e-300)
        res = (A_r * h + A_z * v - F) * np.sqrt(w)[:, None]
        return A_r, A_z, res.ravel()

    # coarse grid over the frequencies, amplitudes solved linearly
    best = None
    for V_z in np.linspace(500, 3000, 26):
        for k in np.linspace(100, 1500, 29):
            for V_zr in np.linspace(0, 2000, 21):
                A_r, A_z, res = amplitudes(V_z, k, V_zr)
                cost = float(res @ res)
                if best is None or cost < best[0]:
                    best = (cost, V_z, k, V_zr)
    sol = optimize.least_squares(lambda x: amplitudes(*x)[2], best[1:], method="lm", x_scale=[100, 50, 50])
    V_z, k, V_zr = sol.x
    A_r, A_z, _ = amplitudes(V_z, k, V_zr)
    if not (A_r > 0 and A_z > 0):
        raise RuntimeError("degenerate axis-symmetric fit (non-positive amplitude)")
    # keep the published sign convention for the radial wavenumber
    return ForceParams(A_r=float(A_r), A_z=float(A_z), V_z=float(abs(V_z)), V_xr=-float(abs(k)),
                       V_zr=float(abs(V_zr)))


def _fit_sinusoid_axis(x, f, w):
    def amp(V):
        s = np.sin(V * x)
        return np.sum(w * s * f) / max(np.sum(w * s * s), 1e-300)

    grid = np.linspace(20, 3000, 300)
    costs = [np.sum(w * (amp(V) * np.sin(V * x) - f) ** 2) for V in grid]
    V0 = grid[int(np.argmin(costs))]
    sol = optimize.least_squares(lambda V: np.sqrt(w) * (amp(V[0]) * np.sin(V[0] * x) - f), [V0])
    V = float(sol.x[0])
    return float(amp(V)), V


def fit_models(data: FitData, floor: float = 0.01):
    """Least-squares fits of the three models; returns (ForceParams, LegacyParams, errors).

    Residuals are weighted by 1/|F| of the trap's peak so traps far from the
    array centre (weaker fields) count as much as central ones.  ``errors``
    maps model name to the mean relative error over samples above the noise
    floor (``floor`` times each trap's peak force).
    """
    m = data.mask(floor)
    if m.sum() < 10:
        raise RuntimeError("too few informative probes for a fit")
    mag = np.linalg.norm(data.F, axis=1)
    peak = np.zeros(data.trap.max() + 1)
    np.maximum.at(peak, data.trap, mag)
    w = 1.0 / peak[data.trap] ** 2
    d, F = data.d, data.F
    # spring: F_i = -K_i d_i
    K = []
    for i in range(3):
        den = np.sum(w * d[:, i] ** 2)
        if den <= 0:
            raise RuntimeError("degenerate spring fit (no spread along an axis)")
        K.append(-float(np.sum(w * d[:, i] * F[:, i]) / den))
    A, V = zip(*(_fit_sinusoid_axis(d[:, i], F[:, i], w) for i in range(3)))
    legacy = LegacyParams(K=tuple(K), A=tuple(A), V=tuple(V))
    axisym = _fit_axisym(data, w)
    errors = {
        "spring": mean_relative_error(-np.asarray(K) * d, data, floor),
        "sinusoidal": mean_relative_error(np.asarray(A) * np.sin(np.asarray(V) * d), data, floor),
        "axis-symmetric": mean_relative_error(axisym_force_offset(axisym, d), data, floor),
    }
    return axisym, legacy, errors


def write_error_report(errors: dict, path, samples: int | None = None):
    with open(path, "w") as fh:
        fh.write("model,mean_relative_error,samples\n")
        for name in ("spring", "sinusoidal", "axis-symmetric"):
            fh.write(f"{name},{errors[name]!r},{'' if samples is None else samples}\n")


def calibrate(force_fn, traps_per_axis: int = 3, probes: int = 100, seed: int = 0,
              half_extent: float = 0.02, floor: float = 0.01) -> tuple[Calibration, FitData]:
    """Sample ``force_fn`` around a cubic trap grid and fit all three models."""
    data = sample_oracle(force_fn, trap_grid(traps_per_axis, half_extent), probes, seed)
    fitted, legacy, errors = fit_models(data, floor)
    return Calibration(fitted=fitted, legacy=legacy, errors=errors), data
