"""Forward simulation of a particle pulled by a moving acoustic trap.

    m p'' = F(p, u(t))  (+ optional gravity)

integrated with classic RK4.  The trap path u(t) is the cubic spline through
the device samples; the force is the axis-symmetric model.  The inner loop is
compiled with numba, so a 2 s run at 100 kHz takes a few milliseconds.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .forcemodel import ForceParams, axisym_force
from .paths import ReferencePath
from .trapsolve import TrapTrajectory, baseline_trajectory, splice

GRAVITY = 9.81


@njit(cache=True)
def _force(dx, dy, dz, A_r, A_z, Vz, k, Vzr):
    r = math.sqrt(dx * dx + dy * dy)
    fr = A_r * math.cos(Vz * dz) * math.sin(k * r)
    fz = A_z * math.sin(Vz * dz) * math.cos(Vzr * r)
    if r > 0.0:
        return fr * dx / r, fr * dy / r, fz
    return 0.0, 0.0, fz


@njit(cache=True)
def _trap(t, x, c, period, tend):
    if period > 0.0:
        t = t - math.floor(t / period) * period
    elif t > tend:
        t = tend
    elif t < x[0]:
        t = x[0]
    i = np.searchsorted(x, t, side="right") - 1
    if i < 0:
        i = 0
    if i > x.shape[0] - 2:
        i = x.shape[0] - 2
    s = t - x[i]
    out = np.empty(3)
    for j in range(3):
        out[j] = ((c[0, i, j] * s + c[1, i, j]) * s + c[2, i, j]) * s + c[3, i, j]
    return out


@njit(cache=True)
def _accel(t, p, x, c, period, tend, A_r, A_z, Vz, k, Vzr, mass, g):
    u = _trap(t, x, c, period, tend)
    fx, fy, fz = _force(u[0] - p[0], u[1] - p[1], u[2] - p[2], A_r, A_z, Vz, k, Vzr)
    a = np.empty(3)
    a[0] = fx / mass
    a[1] = fy / mass
    a[2] = fz / mass - g
    return a


@njit(cache=True, nogil=True)
def _integrate(p0, v0, t0, dt, nsteps, every, x, c, period, tend,
               A_r, A_z, Vz, k, Vzr, mass, g, r_escape):
    nout = nsteps // every + 1
    ts = np.empty(nout)
    P = np.empty((nout, 3))
    V = np.empty((nout, 3))
    p = p0.copy()
    v = v0.copy()
    t = t0
    ts[0] = t
    P[0] = p
    V[0] = v
    n = 1
    escaped = -1.0
    for step in range(1, nsteps + 1):
        k1v = _accel(t, p, x, c, period, tend, A_r, A_z, Vz, k, Vzr, mass, g)
        k1p = v
        k2v = _accel(t + dt / 2, p + dt / 2 * k1p, x, c, period, tend, A_r, A_z, Vz, k, Vzr, mass, g)
        k2p = v + dt / 2 * k1v
        k3v = _accel(t + dt / 2, p + dt / 2 * k2p, x, c, period, tend, A_r, A_z, Vz, k, Vzr, mass, g)
        k3p = v + dt / 2 * k2v
        k4v = _accel(t + dt, p + dt * k3p, x, c, period, tend, A_r, A_z, Vz, k, Vzr, mass, g)
        k4p = v + dt * k3v
        p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        t = t0 + step * dt
        u = _trap(t, x, c, period, tend)
        d = math.sqrt((p[0] - u[0]) ** 2 + (p[1] - u[1]) ** 2 + (p[2] - u[2]) ** 2)
        if step % every == 0 or d > r_escape:
            ts[n] = t
            P[n] = p
            V[n] = v
            n += 1
        if d > r_escape:
            escaped = t
            break
    return ts[:n], P[:n], V[:n], escaped


# --------------------------------------------------------------------------

@dataclass
class SimTrace:
    t: np.ndarray
    p: np.ndarray
    pdot: np.ndarray
    u: np.ndarray
    accel: np.ndarray  # F(p, u) / m (+ gravity) at the recorded samples
    escaped: bool
    escape_time: float | None
    period: float
    e: np.ndarray | None = None  # nearest-point deviation vectors, filled by attach_path
    meta: dict = field(default_factory=dict)

    @property
    def accel_horizontal(self) -> np.ndarray:
        return np.hypot(self.accel[:, 0], self.accel[:, 1])

    @property
    def accel_vertical(self) -> np.ndarray:
        return self.accel[:, 2]

    def attach_path(self, path: ReferencePath, projector: "NearestPoint | None" = None):
        proj = projector or NearestPoint(path)
        self.e = self.p - proj(self.p)[1]
        return self

    def window(self, t0: float, period: float | None = None) -> "SimTrace":
        """Samples from ``t0`` on, e.g. the periodic part after a ramp."""
        sel = self.t >= t0 - 1e-12
        return SimTrace(t=self.t[sel], p=self.p[sel], pdot=self.pdot[sel], u=self.u[sel],
                        accel=self.accel[sel], escaped=self.escaped, escape_time=self.escape_time,
                        period=self.period if period is None else period,
                        e=None if self.e is None else self.e[sel], meta=dict(self.meta))

    def to_csv(self, fname):
        e = np.linalg.norm(self.e, axis=1) if self.e is not None else np.full(len(self.t), np.nan)
        with open(fname, "w") as fh:
            fh.write("t,p_x,p_y,p_z,e,ax_h,a_z\n")
            for row in zip(self.t, self.p[:, 0], self.p[:, 1], self.p[:, 2], e,
                           self.accel_horizontal, self.accel_vertical):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def escape_radius(params: ForceParams) -> float:
    return math.pi / params.kxr


def simulate(traj: TrapTrajectory, params: ForceParams, p0=None, v0=None, dt=None,
             duration=None, gravity: bool = False, record_every: int | None = None) -> SimTrace:
    """RK4 run of the particle under ``traj``.

    Defaults: start on the reference at t = 0 with the reference velocity,
    dt = 1 / (10 rate), record at the device rate, and run for an integer
    number of periods covering at least 2 s (periodic) or the trajectory
    length otherwise.
    """
    dt = 1.0 / (10 * traj.rate) if dt is None else float(dt)
    spl = traj.spline("u")
    x = np.ascontiguousarray(spl.x)
    c = np.ascontiguousarray(spl.c)
    period = traj.T if traj.periodic else -1.0
    if duration is None:
        duration = math.ceil(2.0 / traj.T) * traj.T if traj.periodic else traj.t[-1] - traj.t[0]
    nsteps = int(round(duration / dt))
    if record_every is None:
        record_every = max(1, int(round(1.0 / (traj.rate * dt))))
    qs = traj.spline("q")
    p0 = qs(traj.t[0]) if p0 is None else np.asarray(p0, dtype=float)
    v0 = qs(traj.t[0], 1) if v0 is None else np.asarray(v0, dtype=float)
    g = GRAVITY if gravity else 0.0
    ts, P, V, esc = _integrate(np.array(p0, dtype=float), np.array(v0, dtype=float),
                               float(traj.t[0]), dt, nsteps, record_every, x, c, float(period),
                               float(traj.t[-1]), params.A_r, params.A_z, params.V_z, params.kxr,
                               params.V_zr, params.mass, g, escape_radius(params))
    U = spl(ts if traj.periodic else np.clip(ts, traj.t[0], traj.t[-1]))
    if traj.periodic:
        U = spl(np.mod(ts, traj.T))
    acc = axisym_force(params, P, U) / params.mass
    acc[:, 2] -= g
    return SimTrace(t=ts, p=P, pdot=V, u=U, accel=acc, escaped=esc >= 0,
                    escape_time=float(esc) if esc >= 0 else None, period=traj.T,
                    meta={"dt": dt})


# --------------------------------------------------------------------------
# nearest-point projection and metrics
# --------------------------------------------------------------------------

class NearestPoint:
    """theta*(p) = argmin |p - q(theta)|: grid lookup plus Newton refinement."""

    def __init__(self, path: ReferencePath, samples: int = 20000):
        self.path = path
        endpoint = not path.periodic
        self.grid = np.linspace(path.theta0, path.thetaf, samples, endpoint=endpoint)
        self.tree = cKDTree(path.eval(self.grid))
        self.step = path.span / (samples - (1 if endpoint else 0))

    def __call__(self, p, newton: int = 4):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        _, idx = self.tree.query(p)
        th = self.grid[idx]
        lo, hi = th - self.step, th + self.step
        for _ in range(newton):
            q, dq, ddq = self.path.eval_derivs(self._clip(th))
            r = p - q
            g = -np.einsum("ij,ij->i", r, dq)
            h = np.einsum("ij,ij->i", dq, dq) - np.einsum("ij,ij->i", r, ddq)
            safe = np.where(h > 0, h, 1.0)
            th = np.where(h > 0, np.clip(th - g / safe, lo, hi), th)
        th = self._clip(th)
        return th, self.path.eval(th)

    def _clip(self, th):
        if self.path.periodic:
            return th
        return np.clip(th, self.path.theta0, self.path.thetaf)


def metrics(trace: SimTrace, path: ReferencePath, min_duration: float = 2.0) -> dict:
    """Nearest-point tracking error over whole periods (at least ``min_duration``).

    ``rmse_normalized`` is 100 * RMSE / path length, the scale used when
    comparing shapes of different size.
    """
    if trace.escaped:
        raise ValueError("particle escaped; tracking error is undefined")
    if trace.e is None:
        trace.attach_path(path)
    periods = max(1, math.ceil(min_duration / trace.period - 1e-9))
    t_end = trace.t[0] + periods * trace.period
    sel = trace.t < t_end - 1e-12
    step = float(np.median(np.diff(trace.t))) if len(trace.t) > 1 else 0.0
    if trace.t[-1] < t_end - 1.5 * step - trace.period * 1e-6:
        raise ValueError(f"trace shorter than {periods} periods")
    err = np.linalg.norm(trace.e[sel], axis=1)
    rmse = float(np.sqrt(np.mean(err ** 2)))
    length = path.arc_length()
    return {"rmse": rmse, "rmse_normalized": 100.0 * rmse / length, "max_error": float(err.max()),
            "path_length": length, "periods": periods,
            "accel_horizontal": trace.accel_horizontal, "accel_vertical": trace.accel_vertical,
            "speed": np.linalg.norm(trace.pdot, axis=1), "t": trace.t}


# --------------------------------------------------------------------------
# randomised trials
# --------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    position_sigma: float = 1e-4  # m, Gaussian initial offset per axis
    force_jitter: float = 0.05  # relative, uniform in [-j, j] on A_r and A_z

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls(0.0, 0.0)


@dataclass
class FeasibilityReport:
    success: bool
    trials: int
    successes: int
    escape_times: list  # per trial, None when the particle stayed trapped
    max_error: float  # worst nearest-point deviation over trials that stayed trapped (m), nan if none
    rmse_normalized: float  # mean over trials that stayed trapped
    rmse_normalized_trials: list = field(default_factory=list)
    jitter: list = field(default_factory=list)  # (A_r, A_z) relative scale per trial
    ramp_T: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def worker_count() -> int:
    """Thread count for concurrent trials (``LEVITRAJ_THREADS``, default 1)."""
    try:
        return max(1, int(os.environ.get("LEVITRAJ_THREADS", "1")))
    except ValueError:
        return 1


def perturbed_trials(traj: TrapTrajectory, params: ForceParams, path: ReferencePath,
                     n: int = 10, noise: NoiseSpec | None = None, seed: int = 0,
                     ramp: TrapTrajectory | None = None, duration: float = 2.0,
                     gravity: bool = False, workers: int | None = None) -> FeasibilityReport:
    """``n`` runs with a perturbed start and jittered force scale.

    A periodic ``traj`` without ``ramp`` starts on the orbit at full speed
    and repeats for at least ``duration`` seconds.  With ``ramp`` the orbit is
    spliced after it; a non-periodic ``traj`` (e.g. a ramped baseline) is run
    as given.  Non-periodic runs start at the first reference sample with the
    reference velocity there.  Tracking error is measured over the whole
    orbit periods after the ramp.  A run succeeds when the particle never
    escapes; the report succeeds when at least ceil(0.9 n) runs do.
    """
    if n < 1:
        raise ValueError("need at least one trial")
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(seed)
    proj = NearestPoint(path)
    if ramp is not None:
        run = splice(ramp, traj, max(1, math.ceil(duration / traj.T - 1e-9)))
    else:
        run = traj
    qs = run.spline("q")
    p_ref, v_ref = qs(run.t[0]), qs(run.t[0], 1)
    if run.periodic:
        period = run.T
        periods = max(1, math.ceil(duration / period - 1e-9))
        t_orbit, dur = run.t[0], periods * period
    else:
        period = float(run.meta.get("orbit_T", run.T))
        t_orbit = run.t[0] + float(run.meta.get("ramp", 0.0))
        periods = max(1, int(math.floor((run.t[-1] - t_orbit) / period + 1e-6)))
        dur = None
    draws = []
    for _ in range(n):
        dp = rng.normal(0.0, noise.position_sigma, 3) if noise.position_sigma > 0 else np.zeros(3)
        if noise.force_jitter > 0:
            jr, jz = rng.uniform(-noise.force_jitter, noise.force_jitter, 2)
        else:
            jr = jz = 0.0
        draws.append((dp, 1 + float(jr), 1 + float(jz)))

    def one(draw):
        dp, sr, sz = draw
        prm = replace(params, A_r=params.A_r * sr, A_z=params.A_z * sz)
        tr = simulate(run, prm, p0=p_ref + dp, v0=v_ref, duration=dur, gravity=gravity)
        if tr.escaped:
            return tr.escape_time, None
        m = metrics(tr.window(t_orbit, period).attach_path(path, proj), path,
                    min_duration=periods * period)
        return None, m

    workers = worker_count() if workers is None else max(1, int(workers))
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, draws))
    else:
        results = [one(d) for d in draws]
    esc = [r[0] for r in results]
    ms = [r[1] for r in results if r[1] is not None]
    rn = [m["rmse_normalized"] for m in ms]
    ok = len(ms)
    need = math.ceil(0.9 * n)
    return FeasibilityReport(success=ok >= need, trials=n, successes=ok, escape_times=esc,
                             max_error=max((m["max_error"] for m in ms), default=float("nan")),
                             rmse_normalized=float(np.mean(rn)) if rn else float("nan"),
                             rmse_normalized_trials=rn, jitter=[(d[1], d[2]) for d in draws],
                             ramp_T=float(t_orbit - run.t[0]))


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------

BASELINE_RAMP = 0.5  # s


def baseline_feasible(path: ReferencePath, T: float, params: ForceParams, strategy: str = "param",
                      ramp: float = BASELINE_RAMP, duration: float = 2.0) -> bool:
    """True when the nominal particle survives a ramped baseline run."""
    traj = baseline_trajectory(path, T, strategy, ramp=ramp, duration=duration)
    return not simulate(traj, params).escaped


def baseline_max_size(kind: str, T: float, params: ForceParams, strategy: str = "param",
                      plane: str = "xz", ramp: float = BASELINE_RAMP, duration: float = 2.0,
                      **search):
    """Largest builtin width whose ramped baseline run does not escape."""
    from .ocp import max_size_for_time
    from .paths import make_builtin

    def timer(width):
        ok = baseline_feasible(make_builtin(kind, width, plane=plane), T, params, strategy,
                               ramp, duration)
        return T if ok else float("nan")

    return max_size_for_time(kind, T, params, plane=plane, timer=timer, **search)
