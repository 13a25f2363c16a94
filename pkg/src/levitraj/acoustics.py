"""Two-array phased levitator: pressure field and Gor'kov radiation force.

Each transducer is a far-field circular piston,

    p(x) = P0 * a_j * D(alpha) / d * exp(i (k d + phi_j)),
    D(alpha) = 2 J1(k r sin alpha) / (k r sin alpha),

summed over both 16 x 16 arrays.  The Gor'kov potential of a small sphere is

    U = K1 |p|^2 - K2 |grad p|^2,
    K1 = V f1 / (4 rho c^2),  K2 = 3 V f2 / (8 rho omega^2),

and the radiation force is F = -grad U.  This module is only the force
oracle used to calibrate the analytic trap models; it is never used while
planning trajectories.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import j0, j1

WORKING_HALF_EXTENT = 0.04  # 8 x 8 x 8 cm working volume around the centre


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    grid: int = 16
    pitch: float = 0.0105  # m
    separation: float = 0.239  # m between the two array planes
    frequency: float = 40e3  # Hz
    sound_speed: float = 346.0  # m/s
    density: float = 1.18  # kg/m^3
    transducer_radius: float = 0.0045  # m
    p0: float = 3.4  # Pa m, on-axis amplitude at 1 m for full drive

    def __post_init__(self):
        if self.separation <= 0 or self.pitch <= 0 or self.grid < 1:
            raise ValueError("separation, pitch and grid must be positive")

    @property
    def k(self) -> float:
        return 2 * math.pi * self.frequency / self.sound_speed

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.frequency

    @property
    def omega(self) -> float:
        return 2 * math.pi * self.frequency

    def transducers(self) -> tuple[np.ndarray, np.ndarray]:
        """Positions (512, 3) and unit normals; bottom array faces +z, top faces -z."""
        g = (np.arange(self.grid) - (self.grid - 1) / 2) * self.pitch
        X, Y = np.meshgrid(g, g, indexing="ij")
        xy = np.column_stack([X.ravel(), Y.ravel()])
        h = self.separation / 2
        n = len(xy)
        pos = np.vstack([np.column_stack([xy, np.full(n, -h)]),
                         np.column_stack([xy, np.full(n, h)])])
        nrm = np.vstack([np.tile([0.0, 0.0, 1.0], (n, 1)), np.tile([0.0, 0.0, -1.0], (n, 1))])
        return pos, nrm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ArrayConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TransducerActivation:
    phase: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=float)
        self.amplitude = np.asarray(self.amplitude, dtype=float)
        if self.phase.shape != self.amplitude.shape:
            raise ValueError("phase and amplitude shapes differ")
        if not (np.all(np.isfinite(self.phase)) and np.all(np.isfinite(self.amplitude))):
            raise ValueError("activation must be finite")
        if np.any(self.amplitude < 0) or np.any(self.amplitude > 1):
            raise ValueError("amplitudes must lie in [0, 1]")

    def scaled(self, s: float) -> "TransducerActivation":
        return TransducerActivation(self.phase.copy(), self.amplitude * s)


@dataclass(frozen=True)
class ParticleProps:
    radius: float = 0.8e-3  # m
    density: float = 29.0  # kg/m^3 (expanded polystyrene)
    mass: float = 0.7e-7  # kg, used by the dynamics
    sound_speed: float = 900.0  # m/s, only enters f1 through the compressibility ratio

    def check(self, cfg: ArrayConfig):
        if self.mass <= 0 or self.radius <= 0:
            raise ValueError("radius and mass must be positive")
        if self.radius > cfg.wavelength / 10:
            raise ValueError(f"particle radius {self.radius:g} m exceeds lambda/10 "
                             f"= {cfg.wavelength / 10:g} m")

    def gorkov_constants(self, cfg: ArrayConfig) -> tuple[float, float]:
        vol = 4.0 / 3.0 * math.pi * self.radius ** 3
        rho, c = cfg.density, cfg.sound_speed
        f1 = 1.0 - (rho * c ** 2) / (self.density * self.sound_speed ** 2)
        f2 = 2.0 * (self.density - rho) / (2.0 * self.density + rho)
        K1 = vol * f1 / (4.0 * rho * c ** 2)
        K2 = 3.0 * vol * f2 / (8.0 * rho * cfg.omega ** 2)
        return K1, K2


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def in_working_volume(x, half: float = WORKING_HALF_EXTENT) -> bool:
    return bool(np.all(np.abs(np.asarray(x, dtype=float)) <= half + 1e-12))


def focus_activation(cfg: ArrayConfig, point) -> TransducerActivation:
    pos, _ = cfg.transducers()
    d = np.linalg.norm(pos - np.asarray(point, dtype=float), axis=1)
    return TransducerActivation(np.mod(-cfg.k * d, 2 * math.pi), np.ones(len(pos)))


def twin_trap_activation(cfg: ArrayConfig, trap_pos, balance: bool = True) -> TransducerActivation:
    """Focus at ``trap_pos`` plus a pi signature on the top array.

    With opposed arrays the signature plane is the horizontal plane through
    the trap; the result is the vertical twin trap, whose force field is close
    to axis-symmetric about the vertical through the trap.  With ``balance``
    the array nearer to the trap is attenuated so both halves contribute
    equal pressure at the trap, which keeps the null deep off-centre.
    """
    trap_pos = np.asarray(trap_pos, dtype=float)
    if not in_working_volume(trap_pos):
        raise FieldError(f"trap {trap_pos} outside the working volume")
    act = focus_activation(cfg, trap_pos)
    pos, _ = cfg.transducers()
    sig = pos[:, 2] > trap_pos[2]
    if balance:
        top = abs(pressure(cfg, TransducerActivation(act.phase, act.amplitude * sig), trap_pos))
        bot = abs(pressure(cfg, TransducerActivation(act.phase, act.amplitude * ~sig), trap_pos))
        if top > bot:
            act.amplitude = np.where(sig, bot / top, 1.0)
        elif bot > top:
            act.amplitude = np.where(sig, 1.0, top / bot)
    act.phase = np.mod(act.phase + np.where(sig, math.pi, 0.0), 2 * math.pi)
    return act


# --------------------------------------------------------------------------
# field
# --------------------------------------------------------------------------

def _d_over_s(s):
    """D'(s) / s for D(s) = 2 J1(s)/s, finite at s = 0 (limit -1/4)."""
    out = np.full_like(s, -0.25)
    big = s > 1e-4
    sb = s[big]
    J1 = j1(sb)
    dJ1 = j0(sb) - J1 / sb
    out[big] = 2 * (dJ1 * sb - J1) / sb ** 3
    return out


def _directivity(s):
    out = np.ones_like(s)
    big = s > 1e-8
    out[big] = 2 * j1(s[big]) / s[big]
    return out


def _terms(cfg: ArrayConfig, act: TransducerActivation, x, grad: bool):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pos, nrm = cfg.transducers()
    r = x[:, None, :] - pos[None, :, :]  # (m, n, 3)
    d = np.linalg.norm(r, axis=2)
    if np.any(d < 1e-3):
        raise FieldError("evaluation point within 1 mm of a transducer")
    rh = r / d[..., None]
    cosa = np.einsum("mnk,nk->mn", rh, nrm)
    sina = np.sqrt(np.clip(1 - cosa ** 2, 0, None))
    ka = cfg.k * cfg.transducer_radius
    s = ka * sina
    D = _directivity(s)
    e = cfg.p0 * act.amplitude * np.exp(1j * (cfg.k * d + act.phase)) / d
    p = np.sum(e * D, axis=1)
    if not grad:
        return p, None
    dcos = (nrm[None] - cosa[..., None] * rh) / d[..., None]
    dD = -(ka ** 2) * (cosa * _d_over_s(s))[..., None] * dcos
    g = e[..., None] * ((1j * cfg.k - 1 / d)[..., None] * rh * D[..., None] + dD)
    return p, np.sum(g, axis=1)


def pressure(cfg: ArrayConfig, act: TransducerActivation, x) -> np.ndarray:
    """Complex pressure (Pa) at one point (scalar) or many (shape (m,))."""
    p, _ = _terms(cfg, act, x, grad=False)
    return p[0] if np.ndim(x) == 1 else p


def pressure_gradient(cfg: ArrayConfig, act: TransducerActivation, x, method: str = "analytic"):
    """(p, grad p); ``method='fd'`` uses central differences with h = 1e-6 m."""
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    if method == "analytic":
        p, g = _terms(cfg, act, x2, grad=True)
    else:
        h = 1e-6
        p, _ = _terms(cfg, act, x2, grad=False)
        g = np.empty((len(x2), 3), dtype=complex)
        for i in range(3):
            dx = np.zeros(3)
            dx[i] = h
            g[:, i] = (_terms(cfg, act, x2 + dx, False)[0] - _terms(cfg, act, x2 - dx, False)[0]) / (2 * h)
    if np.ndim(x) == 1:
        return p[0], g[0]
    return p, g


def gorkov_potential(cfg: ArrayConfig, act: TransducerActivation, particle: ParticleProps, x,
                     method: str = "analytic"):
    p, g = pressure_gradient(cfg, act, x, method)
    K1, K2 = particle.gorkov_constants(cfg)
    return K1 * np.abs(p) ** 2 - K2 * np.sum(np.abs(g) ** 2, axis=-1)


def gorkov_force(cfg: ArrayConfig, act: TransducerActivation, particle: ParticleProps, x,
                 h: float = 1e-5, method: str = "analytic") -> np.ndarray:
    """-grad U by central differences of the potential (step ``h``)."""
    particle.check(cfg)
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    m = len(x2)
    offs = np.vstack([np.eye(3) * h, -np.eye(3) * h])
    pts = (x2[:, None, :] + offs[None]).reshape(-1, 3)
    U = gorkov_potential(cfg, act, particle, pts, method).reshape(m, 6)
    F = -(U[:, :3] - U[:, 3:]) / (2 * h)
    return F[0] if np.ndim(x) == 1 else F


# --------------------------------------------------------------------------
# oracle convenience and export
# --------------------------------------------------------------------------

@dataclass
class TwinTrapOracle:
    """Force on a particle at p from a twin trap created at u."""

    cfg: ArrayConfig = field(default_factory=ArrayConfig)
    particle: ParticleProps = field(default_factory=ParticleProps)

    def force(self, p, u) -> np.ndarray:
        act = twin_trap_activation(self.cfg, u)
        return gorkov_force(self.cfg, act, self.particle, p)


def field_scan(cfg: ArrayConfig, act: TransducerActivation, particle: ParticleProps, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    p = pressure(cfg, act, points)
    F = gorkov_force(cfg, act, particle, points)
    return np.column_stack([points, p.real, p.imag, F])


def write_field_scan(fname, rows):
    with open(fname, "w") as fh:
        fh.write("x,y,z,re_p,im_p,Fx,Fy,Fz\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
