"""Reference paths q(theta) and the two baseline timing strategies.

Every path maps a scalar parameter theta in [theta0, thetaf] to a position in
metres.  Builtin shapes are finite Fourier series in a vertical plane, so all
derivatives are exact; user shapes are periodic or clamped quintic splines.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, interpolate, optimize

TWO_PI = 2.0 * math.pi

# (horizontal axis, vertical axis) of the 2D outline inside the 3D frame
PLANES = {
    "xz": (0, 2),
    "yz": (1, 2),
    "xy": (0, 1),
}


class PathDomainError(ValueError):
    pass


class ReferencePath:
    """Base class; subclasses implement ``_derivative(theta, order)``."""

    theta0: float = 0.0
    thetaf: float = TWO_PI
    periodic: bool = True
    kind: str = "custom"

    @property
    def span(self) -> float:
        return self.thetaf - self.theta0

    def _wrap(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.periodic:
            return self.theta0 + np.mod(theta - self.theta0, self.span)
        tol = 1e-12 * max(1.0, abs(self.span))
        if np.any(theta < self.theta0 - tol) or np.any(theta > self.thetaf + tol):
            raise PathDomainError(
                f"theta outside [{self.theta0}, {self.thetaf}] for non-periodic path"
            )
        return np.clip(theta, self.theta0, self.thetaf)

    def derivative(self, theta, order: int = 0) -> np.ndarray:
        """d^order q / d theta^order; shape (..., 3)."""
        return self._derivative(self._wrap(theta), order)

    def eval(self, theta) -> np.ndarray:
        return self.derivative(theta, 0)

    def eval_derivs(self, theta):
        """Return (q, dq/dtheta, d2q/dtheta2)."""
        th = self._wrap(theta)
        return (self._derivative(th, 0), self._derivative(th, 1),
                self._derivative(th, 2))

    def scaled(self, factor: float) -> "ReferencePath":
        raise NotImplementedError

    def arc_length(self, a: float | None = None, b: float | None = None) -> float:
        a = self.theta0 if a is None else a
        b = self.thetaf if b is None else b
        return _speed_integral(self, a, b)

    def bbox(self, samples: int = 4001) -> tuple[np.ndarray, np.ndarray]:
        pts = self.eval(np.linspace(self.theta0, self.thetaf, samples))
        return pts.min(axis=0), pts.max(axis=0)


class FourierPath(ReferencePath):
    """q(theta) = c + sum_k A_k cos(k theta) + B_k sin(k theta), theta in [0, 2 pi]."""

    def __init__(self, center, cos_coef, sin_coef, kind: str = "fourier"):
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.cos_coef = np.asarray(cos_coef, dtype=float)  # (H, 3), harmonic k = row + 1
        self.sin_coef = np.asarray(sin_coef, dtype=float)
        if self.cos_coef.shape != self.sin_coef.shape or self.cos_coef.shape[1] != 3:
            raise ValueError("coefficient arrays must both have shape (H, 3)")
        self.kind = kind
        self.theta0, self.thetaf, self.periodic = 0.0, TWO_PI, True
        self._k = np.arange(1, self.cos_coef.shape[0] + 1, dtype=float)

    def _derivative(self, theta, order):
        theta = np.asarray(theta, dtype=float)
        kt = np.multiply.outer(theta, self._k)
        c, s = np.cos(kt), np.sin(kt)
        kp = self._k ** order
        # derivatives of cos/sin cycle with period 4
        r = order % 4
        if r == 0:
            cc, ss = c, s
        elif r == 1:
            cc, ss = -s, c
        elif r == 2:
            cc, ss = -c, -s
        else:
            cc, ss = s, -c
        out = (cc * kp) @ self.cos_coef + (ss * kp) @ self.sin_coef
        if order == 0:
            out = out + self.center
        return out

    def scaled(self, factor, about=None):
        about = self.center if about is None else np.asarray(about, dtype=float)
        return FourierPath(about + factor * (self.center - about), factor * self.cos_coef,
                           factor * self.sin_coef, kind=self.kind)

    def to_dict(self):
        return {"type": "fourier", "kind": self.kind, "center": self.center.tolist(),
                "cos": self.cos_coef.tolist(), "sin": self.sin_coef.tolist()}


class SplinePath(ReferencePath):
    """Interpolating quintic spline through waypoints.

    The parameter runs over [0, 2 pi] proportionally to cumulative chord
    length.  Quintic rather than cubic so that the third derivative used by
    the optimizer's Jacobian is continuous.
    """

    def __init__(self, waypoints, periodic: bool = True):
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("waypoints must be an (n, 3) array")
        if len(pts) < 4:
            raise ValueError("at least 4 waypoints are required")
        if periodic and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        closed = np.vstack([pts, pts[:1]]) if periodic else pts
        chords = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        if np.any(chords <= 1e-12):
            raise ValueError("consecutive duplicate waypoints")
        knots = np.concatenate([[0.0], np.cumsum(chords)])
        knots *= TWO_PI / knots[-1]
        self.waypoints = pts
        self.periodic = periodic
        self.kind = "spline"
        self.theta0, self.thetaf = 0.0, TWO_PI
        if periodic:
            self._spl = interpolate.make_interp_spline(knots, closed, k=5, bc_type="periodic")
        else:
            # natural-type ends: third and fourth derivatives vanish
            zeros = np.zeros(3)
            bc = ([(3, zeros), (4, zeros)], [(3, zeros), (4, zeros)])
            self._spl = interpolate.make_interp_spline(knots, closed, k=5, bc_type=bc)
        self._knots = knots

    def _derivative(self, theta, order):
        if order > 5:
            return np.zeros(np.shape(theta) + (3,))
        return self._spl(theta, nu=order)

    def scaled(self, factor, about=None):
        about = np.zeros(3) if about is None else np.asarray(about, dtype=float)
        return SplinePath(about + factor * (self.waypoints - about), periodic=self.periodic)

    def to_dict(self):
        return {"type": "spline", "waypoints": self.waypoints.tolist(),
                "periodic": self.periodic}


def _speed_integral(path, a, b):
    def speed(t):
        return float(np.linalg.norm(path.derivative(t, 1)))

    # split at a fixed grid so quad never has to find cusps on its own
    edges = np.linspace(a, b, 65)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += integrate.quad(speed, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)[0]
    return total


# --------------------------------------------------------------------------
# builtin shapes
# --------------------------------------------------------------------------

def _embed(h_cos, h_sin, v_cos, v_sin, center, plane):
    """Lift 2D Fourier coefficients (horizontal h, vertical v) into 3D."""
    ih, iv = PLANES[plane]
    H = max(len(h_cos), len(v_cos))
    cos_coef = np.zeros((H, 3))
    sin_coef = np.zeros((H, 3))
    cos_coef[: len(h_cos), ih] = h_cos
    sin_coef[: len(h_sin), ih] = h_sin
    cos_coef[: len(v_cos), iv] = v_cos
    sin_coef[: len(v_sin), iv] = v_sin
    return cos_coef, sin_coef


def circle(radius: float, center=(0.0, 0.0, 0.0), plane: str = "xz") -> FourierPath:
    """Circle starting at the bottom, counter-clockwise in (h, v)."""
    cos_c, sin_c = _embed([0.0], [radius], [-radius], [0.0], center, plane)
    return FourierPath(center, cos_c, sin_c, kind="circle")


def cardioid(r: float, center=(0.0, 0.0, 0.0), plane: str = "xz") -> FourierPath:
    """q = (r sin t (1 + cos t), r - r cos t (1 + cos t)) with the cusp at t = pi."""
    # r sin t (1 + cos t) = r sin t + r/2 sin 2t
    # r - r cos t - r cos^2 t = r/2 - r cos t - r/2 cos 2t
    cos_c, sin_c = _embed([0.0, 0.0], [r, r / 2], [-r, -r / 2], [0.0, 0.0], center, plane)
    c = np.asarray(center, dtype=float).copy()
    c[PLANES[plane][1]] += r / 2
    return FourierPath(c, cos_c, sin_c, kind="cardioid")


SQUIRCLE_EXPONENT = 4
SQUIRCLE_HARMONICS = 7  # odd harmonics 1..7; more terms ring and add curvature ripple


def _squircle_series(harmonics: int | None = None, n: int = SQUIRCLE_EXPONENT):
    """Fourier coefficients of sgn(cos t)|cos t|^(2/n) up to the given harmonic."""
    harmonics = SQUIRCLE_HARMONICS if harmonics is None else harmonics
    m = 1 << 14
    t = np.arange(m) * TWO_PI / m
    f = np.sign(np.cos(t)) * np.abs(np.cos(t)) ** (2.0 / n)
    spec = np.fft.rfft(f) / m
    a = 2.0 * spec.real[1: harmonics + 1]  # cos coefficients
    a[1::2] = 0.0  # odd symmetry about pi/2 leaves odd harmonics only
    return a


def squircle(half_width: float, center=(0.0, 0.0, 0.0), plane: str = "xz") -> FourierPath:
    """Superellipse |x|^4 + |z|^4 = a^4 smoothed to a truncated Fourier series.

    x uses cos k t, z the matching sin k t series (sin-phase of the same
    function), so the outline is symmetric under both axis reflections.
    """
    a = _squircle_series()
    k = np.arange(1, len(a) + 1)
    # sgn(sin t)|sin t|^p = f(t - pi/2); cos(k(t - pi/2)) for odd k = (-1)^((k-1)/2) sin(k t)
    sgn = np.where(k % 2 == 1, (-1.0) ** ((k - 1) // 2), 0.0)
    h_cos, v_sin = a, a * sgn
    zeros = np.zeros_like(a)
    cos_c, sin_c = _embed(h_cos, zeros, zeros, v_sin, center, plane)
    path = FourierPath(center, cos_c, sin_c, kind="squircle")
    lo, hi = path.bbox()
    ih = PLANES[plane][0]
    return path.scaled(2 * half_width / (hi[ih] - lo[ih]))


FISH_ASPECT = 1.0


def fish(width: float, center=(0.0, 0.0, 0.0), plane: str = "xz") -> FourierPath:
    """Two-harmonic fish outline whose tail fins cross in a loop.

    h = cos t - sin^2 t / sqrt(2), v = sin t cos t (scaled by FISH_ASPECT);
    the body sits at h > 0, the tail crossing at h = -1/sqrt(2).
    """
    s2 = math.sqrt(2.0)
    # sin^2 t = (1 - cos 2t)/2
    h_cos = [1.0, 1.0 / (2 * s2)]
    v_sin = [0.0, FISH_ASPECT / 2]
    cos_c, sin_c = _embed(h_cos, [0.0, 0.0], [0.0, 0.0], v_sin, center, plane)
    c = np.asarray(center, dtype=float).copy()
    c[PLANES[plane][0]] -= 1.0 / (2 * s2)
    path = FourierPath(c, cos_c, sin_c, kind="fish")
    lo, hi = path.bbox()
    ih = PLANES[plane][0]
    # recentre horizontally on the bounding box before scaling
    shift = np.zeros(3)
    shift[ih] = 0.5 * (lo[ih] + hi[ih]) - center[ih]
    path = FourierPath(path.center - shift, path.cos_coef, path.sin_coef, kind="fish")
    return path.scaled(width / (hi[ih] - lo[ih]), about=np.asarray(center, dtype=float))


BUILTINS = ("circle", "cardioid", "squircle", "fish")


def make_builtin(kind: str, width: float, center=(0.0, 0.0, 0.0), plane: str = "xz"):
    """Builtin test shape with the given horizontal bounding-box width (m)."""
    if width <= 0:
        raise ValueError("width must be positive")
    if plane not in PLANES:
        raise ValueError(f"unknown plane {plane!r}")
    if kind == "circle":
        return circle(width / 2, center, plane)
    if kind == "cardioid":
        return cardioid(width / CARDIOID_WIDTH_PER_R, center, plane)
    if kind == "squircle":
        return squircle(width / 2, center, plane)
    if kind == "fish":
        return fish(width, center, plane)
    raise ValueError(f"unknown builtin shape {kind!r}")


# max of sin t (1 + cos t) is at t = pi/3
CARDIOID_WIDTH_PER_R = 2 * math.sin(math.pi / 3) * 1.5


class LapPath(ReferencePath):
    """``laps`` consecutive traversals of a closed path as one open path."""

    periodic = False

    def __init__(self, base: ReferencePath, laps: int):
        if not base.periodic or laps < 1:
            raise ValueError("need a closed base path and at least one lap")
        self.base, self.laps = base, int(laps)
        self.theta0 = base.theta0
        self.thetaf = base.theta0 + laps * base.span
        self.kind = base.kind

    def _derivative(self, theta, order):
        return self.base.derivative(theta, order)


def spline_path(waypoints, periodic: bool = True) -> SplinePath:
    return SplinePath(waypoints, periodic=periodic)


def horizontal_width(path: ReferencePath) -> float:
    lo, hi = path.bbox()
    return float(max(hi[0] - lo[0], hi[1] - lo[1]))


# --------------------------------------------------------------------------
# baseline timings
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineTiming:
    strategy: str  # "arc" (equidistant arc length) or "param" (equidistant theta)
    T: float
    N: int

    def __post_init__(self):
        if self.strategy not in ("arc", "param"):
            raise ValueError("strategy must be 'arc' or 'param'")
        if self.T <= 0 or self.N < 2:
            raise ValueError("need T > 0 and N >= 2")


def arc_length_table(path: ReferencePath, n: int = 2048):
    """Cumulative arc length on a uniform theta grid (n + 1 points)."""
    th = np.linspace(path.theta0, path.thetaf, n + 1)
    s = np.zeros(n + 1)

    def speed(t):
        return float(np.linalg.norm(path.derivative(t, 1)))

    for i in range(n):
        s[i + 1] = s[i] + integrate.quad(speed, th[i], th[i + 1], epsabs=1e-13,
                                         epsrel=1e-11)[0]
    return th, s


def invert_arc_length(path, targets, table=None, tol: float = 1e-9):
    """theta values at which the arc length reaches each target (m)."""
    th, s = arc_length_table(path) if table is None else table
    out = np.empty(len(targets))

    def speed(t):
        return float(np.linalg.norm(path.derivative(t, 1)))

    for j, target in enumerate(targets):
        i = int(np.clip(np.searchsorted(s, target) - 1, 0, len(s) - 2))
        if target <= s[i]:
            out[j] = th[i]
            continue
        if target >= s[i + 1]:
            out[j] = th[i + 1]
            continue

        def resid(t, i=i, target=target):
            return s[i] + integrate.quad(speed, th[i], t, epsabs=1e-13, epsrel=1e-11)[0] - target

        out[j] = optimize.brentq(resid, th[i], th[i + 1], xtol=1e-14)
    return out


def baseline_timing(path: ReferencePath, timing: BaselineTiming):
    """Sampled (t_k, theta_k), k = 0..N, of a constant-rate timing law."""
    t = np.linspace(0.0, timing.T, timing.N + 1)
    if timing.strategy == "param":
        theta = np.linspace(path.theta0, path.thetaf, timing.N + 1)
        return t, theta
    table = arc_length_table(path)
    total = table[1][-1]
    theta = invert_arc_length(path, np.linspace(0.0, total, timing.N + 1), table)
    theta[0], theta[-1] = path.theta0, path.thetaf
    return t, theta


def finite_difference_accel(points: np.ndarray, dt: float, periodic: bool = True):
    """Second central difference of sampled positions (rows = samples)."""
    if periodic:
        pts = points[:-1] if np.allclose(points[0], points[-1]) else points
        return (np.roll(pts, -1, axis=0) - 2 * pts + np.roll(pts, 1, axis=0)) / dt ** 2
    return (points[2:] - 2 * points[1:-1] + points[:-2]) / dt ** 2


# --------------------------------------------------------------------------
# shape documents
# --------------------------------------------------------------------------

@dataclass
class ShapeSpec:
    kind: str | None = None
    waypoints: list | None = None
    size_m: float | None = None
    plane: str = "xz"
    center_m: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    periodic: bool = True

    def build(self) -> ReferencePath:
        if self.kind is not None and self.kind != "spline":
            if self.size_m is None:
                raise ValueError("builtin shapes need size_m")
            return make_builtin(self.kind, self.size_m, self.center_m, self.plane)
        if self.waypoints is None:
            raise ValueError("shape needs either kind or waypoints")
        path = spline_path(self.waypoints, periodic=self.periodic)
        if self.size_m is not None:
            path = path.scaled(self.size_m / horizontal_width(path),
                               about=np.asarray(self.center_m, dtype=float))
        return path

    def to_dict(self):
        d = {"plane": self.plane, "center_m": list(self.center_m)}
        if self.kind is not None:
            d["kind"] = self.kind
        if self.waypoints is not None:
            d["waypoints"] = [list(map(float, p)) for p in self.waypoints]
            d["periodic"] = self.periodic
        if self.size_m is not None:
            d["size_m"] = self.size_m
        return d


def load_shape(source) -> ShapeSpec:
    """Shape from a JSON file/dict or a waypoint CSV (one ``x,y,z`` row per point)."""
    if isinstance(source, dict):
        doc = source
    else:
        p = Path(source)
        if p.suffix.lower() == ".csv":
            return ShapeSpec(waypoints=read_waypoints_csv(p).tolist())
        doc = json.loads(p.read_text())
    unknown = set(doc) - {"kind", "waypoints", "size_m", "plane", "center_m", "periodic"}
    if unknown:
        raise ValueError(f"unknown shape keys: {sorted(unknown)}")
    return ShapeSpec(kind=doc.get("kind"), waypoints=doc.get("waypoints"),
                     size_m=doc.get("size_m"), plane=doc.get("plane", "xz"),
                     center_m=doc.get("center_m", [0.0, 0.0, 0.0]),
                     periodic=doc.get("periodic", True))


def read_waypoints_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    return np.asarray(rows)
