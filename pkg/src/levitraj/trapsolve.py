"""Trap recovery: from a timing solution to device-rate trap positions u(t).

Per sample the required force m*q''(theta(t)) is known; the trap offset
d = u - q is found by Powell's dog leg on the force equations, warm-started
from the previous sample so consecutive traps stay on one solution branch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .forcemodel import ForceParams, axisym_force_jacobian, axisym_force_offset, offset_guess

log = logging.getLogger(__name__)

DEVICE_RATE = 10_000.0
WORKING_VOLUME = 0.12  # half-extent of the levitator cube around the origin (m)


class RecoveryError(RuntimeError):
    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


# --------------------------------------------------------------------------
# Powell dog leg
# --------------------------------------------------------------------------

@dataclass
class DoglegResult:
    x: np.ndarray
    cost: float  # squared residual norm
    iterations: int
    success: bool


def dogleg(fun, jac, x0, radius=1e-3, tol=1e-12, max_iter=100, scale=None):
    """Trust-region dog leg for min ||r(x)||^2 (square or overdetermined).

    ``scale`` divides the residual (keeps ``tol`` meaningful when r is in
    newtons).  Success when ||r/scale||^2 <= tol.
    """
    x = np.array(x0, dtype=float)
    s = 1.0 if scale is None else scale
    r = np.asarray(fun(x)) / s
    cost = r @ r
    delta = radius
    for it in range(1, max_iter + 1):
        if cost <= tol:
            return DoglegResult(x, cost, it - 1, True)
        J = np.asarray(jac(x)) / s
        g = J.T @ r
        try:
            gn = -np.linalg.lstsq(J, r, rcond=None)[0]
        except np.linalg.LinAlgError:
            gn = -g
        Jg = J @ g
        denom = Jg @ Jg
        sd = -(g @ g) / denom * g if denom > 0 else -g
        ngn = np.linalg.norm(gn)
        if ngn <= delta:
            step = gn
        elif np.linalg.norm(sd) >= delta:
            step = delta * sd / np.linalg.norm(sd)
        else:
            dd = gn - sd
            a, b, c = dd @ dd, 2 * sd @ dd, sd @ sd - delta * delta
            t = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
            step = sd + t * dd
        xn = x + step
        rn = np.asarray(fun(xn)) / s
        cn = rn @ rn
        pred = cost - np.sum((r + J @ step) ** 2)
        rho = (cost - cn) / pred if pred > 0 else -1.0
        if rho > 0.75:
            delta = max(delta, 3 * np.linalg.norm(step))
        elif rho < 0.25:
            delta = 0.25 * np.linalg.norm(step)
        if rho > 0 or cn < cost:
            x, r, cost = xn, rn, cn
        if delta < 1e-15 * (1 + np.linalg.norm(x)):
            break
    return DoglegResult(x, cost, max_iter, cost <= tol)


# --------------------------------------------------------------------------
# single-trap inversion
# --------------------------------------------------------------------------

def _zeta_residual(params: ForceParams, zeta):
    z = np.asarray(zeta, dtype=float)
    k, vz, vzr = params.kxr, params.V_z, params.V_zr

    def fun(d):
        s = z[5] * d[0] + z[4] * d[1]  # signed radial offset along the zeta azimuth
        return np.array([math.sin(k * s) - z[0], math.cos(vz * d[2]) - z[1],
                         math.sin(vz * d[2]) - z[2], math.cos(vzr * s) - z[3],
                         d[0] - s * z[5], d[1] - s * z[4]])

    def jac(d):
        s = z[5] * d[0] + z[4] * d[1]
        ds = np.array([z[5], z[4], 0.0])
        J = np.zeros((6, 3))
        J[0] = k * math.cos(k * s) * ds
        J[1, 2] = -vz * math.sin(vz * d[2])
        J[2, 2] = vz * math.cos(vz * d[2])
        J[3] = -vzr * math.sin(vzr * s) * ds
        J[4] = np.array([1.0, 0.0, 0.0]) - z[5] * ds
        J[5] = np.array([0.0, 1.0, 0.0]) - z[4] * ds
        return J

    return fun, jac


def recover_trap(params: ForceParams, q, zeta, u_prev=None, radius=1e-3, tol=1e-12,
                 max_iter=100) -> np.ndarray:
    """Trap position u realising the trigonometric terms ``zeta`` for a particle at q.

    The solver starts from ``u_prev`` (default q) and so returns the solution
    nearest to it.  Residual tolerance is on the squared 6-vector residual.
    """
    q = np.asarray(q, dtype=float)
    start = q if u_prev is None else np.asarray(u_prev, dtype=float)
    fun, jac = _zeta_residual(params, zeta)
    res = dogleg(fun, jac, start - q, radius=radius, tol=tol, max_iter=max_iter)
    if not res.success:
        raise RecoveryError(f"dog leg did not converge (|r|^2={res.cost:.3e})")
    return q + res.x


def solve_offset(params: ForceParams, force, guess, tol=1e-24, max_iter=100):
    """Offset d = u - p with axisym_force_offset(d) = force.  Returns (d, ok).

    Residual scaled by A_r; ``tol`` is on its square, so 1e-24 means ~1e-12 A_r.
    """
    f = np.asarray(force, dtype=float)
    res = dogleg(lambda d: axisym_force_offset(params, d) - f,
                 lambda d: axisym_force_jacobian(params, d), guess,
                 radius=1e-3, tol=tol, max_iter=max_iter, scale=params.A_r)
    ok = res.success and _first_peak(params, res.x)
    return res.x, ok


def _first_peak(params, d):
    r = math.hypot(d[0], d[1])
    return params.kxr * r <= math.pi / 2 + 1e-9 and abs(params.V_z * d[2]) <= math.pi / 2 + 1e-9


# --------------------------------------------------------------------------
# dense timing law
# --------------------------------------------------------------------------

class DenseTiming:
    """theta(t) with v piecewise linear between nodes (piecewise cubic theta, C^2).

    This is the natural continuous extension of the trapezoidal collocation:
    theta' and v match the nodes exactly and theta matches to O(h^2), with a
    telescoping drift removed so periodic timings close exactly and rest-mode
    timings end exactly on the last node.
    """

    def __init__(self, timing):
        self.T = float(timing.T)
        self.N = timing.N
        self.h = self.T / self.N
        self.periodic = timing.boundary == "periodic"
        v = np.asarray(timing.v, dtype=float)
        h = self.h
        w = np.empty(self.N + 1)
        th = np.empty(self.N + 1)
        w[0], th[0] = timing.theta_dot[0], timing.theta[0]
        for k in range(self.N):
            w[k + 1] = w[k] + 0.5 * h * (v[k] + v[k + 1])
            th[k + 1] = th[k] + h * w[k] + h * h * (2 * v[k] + v[k + 1]) / 6
        self.v, self.w, self.th = v, w, th
        self.span = float(timing.theta[-1] - timing.theta[0])
        self._drift = th[-1] - (th[0] + self.span)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        n_per = np.floor(t / self.T) if self.periodic else np.zeros_like(t)
        tl = t - n_per * self.T if self.periodic else np.clip(t, 0.0, self.T)
        k = np.minimum((tl / self.h).astype(int), self.N - 1)
        s = tl - k * self.h
        v0, v1 = self.v[k], self.v[k + 1]
        dv = (v1 - v0) / self.h
        w0, th0 = self.w[k], self.th[k]
        theta = th0 + w0 * s + v0 * s * s / 2 + dv * s ** 3 / 6
        rate = w0 + v0 * s + dv * s * s / 2
        acc = v0 + dv * s
        tau = (k * self.h + s) / self.T
        if self.periodic:
            theta = theta - self._drift * tau + n_per * self.span
            rate = rate - self._drift / self.T
        else:
            # smootherstep keeps theta', theta'' at both ends (rest start, splice)
            D = self._drift
            theta = theta - D * tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
            rate = rate - D * 30 * tau ** 2 * (1 - tau) ** 2 / self.T
            acc = acc - D * 60 * tau * (1 - tau) * (1 - 2 * tau) / self.T ** 2
        return theta, rate, acc


# --------------------------------------------------------------------------
# trajectory
# --------------------------------------------------------------------------

@dataclass
class TrapTrajectory:
    t: np.ndarray
    u: np.ndarray  # (n, 3)
    q: np.ndarray  # (n, 3)
    T: float
    rate: float = DEVICE_RATE
    periodic: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 3)
        if len(self.t) != len(self.u) or len(self.t) != len(self.q):
            raise ValueError("t, u and q lengths differ")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must increase")

    def __len__(self):
        return len(self.t)

    def spline(self, which="u") -> CubicSpline:
        """Cubic interpolant of u(t) (or q(t)); periodic splines wrap at T."""
        y = self.u if which == "u" else self.q
        if self.periodic:
            t = np.append(self.t, self.t[0] + self.T)
            return CubicSpline(t, np.vstack([y, y[:1]]), bc_type="periodic", axis=0)
        return CubicSpline(self.t, y, axis=0)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t_s,u_x_m,u_y_m,u_z_m\n")
            for ti, ui in zip(self.t, self.u):
                fh.write(f"{float(ti)!r},{float(ui[0])!r},{float(ui[1])!r},{float(ui[2])!r}\n")

    def sidecar(self) -> dict:
        doc = {"T": self.T, "rate": self.rate, "periodic": self.periodic, "samples": len(self)}
        doc.update(self.meta)
        doc["q"] = self.q.tolist()
        return doc

    def save(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        self.to_csv(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.sidecar(), indent=1) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None) -> "TrapTrajectory":
        csv_path = Path(csv_path)
        data = read_device_csv(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        meta = json.loads(json_path.read_text()) if json_path.exists() else {}
        q = np.asarray(meta.pop("q", data[:, 1:]), dtype=float)
        T = float(meta.pop("T", data[-1, 0] + (data[1, 0] - data[0, 0])))
        rate = float(meta.pop("rate", 1.0 / (data[1, 0] - data[0, 0])))
        periodic = bool(meta.pop("periodic", True))
        meta.pop("samples", None)
        return cls(t=data[:, 0], u=data[:, 1:], q=q, T=T, rate=rate, periodic=periodic, meta=meta)


def read_device_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["t_s", "u_x_m", "u_y_m", "u_z_m"]:
            raise ValueError(f"unexpected header {header}")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return np.asarray(rows, dtype=float).reshape(-1, 4)


def params_hash(params: ForceParams) -> str:
    blob = json.dumps(params.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_times(T: float, rate: float, periodic: bool) -> np.ndarray:
    n = int(math.floor(T * rate + 1e-9))
    t = np.arange(n if periodic else n + 1) / rate
    if not periodic and t[-1] < T - 1e-12:
        t = np.append(t, T)
    return t


def _recover_dense(path, params: ForceParams, timing, rate: float, u0_hint=None):
    dense = DenseTiming(timing)
    periodic = timing.boundary == "periodic"
    t = sample_times(timing.T, rate, periodic)
    theta, rate_th, acc_th = dense(t)
    q, dq, ddq = path.eval_derivs(theta)
    F = params.mass * (ddq * rate_th[:, None] ** 2 + dq * acc_th[:, None])
    d = np.empty_like(q)
    phi = 0.0
    prev = None
    for i in range(len(t)):
        if prev is None:
            guess = offset_guess(params, F[i], phi) if u0_hint is None else u0_hint - q[i]
        else:
            guess = prev
        di, ok = solve_offset(params, F[i], guess)
        if not ok:
            di, ok = solve_offset(params, F[i], offset_guess(params, F[i], phi))
        if not ok:
            raise RecoveryError(f"no trap offset realises the force at theta={theta[i]:.5f}",
                                theta=float(theta[i]))
        if math.hypot(di[0], di[1]) > 1e-12:
            phi = math.atan2(di[1], di[0])
        d[i] = di
        prev = di
    return t, q, q + d, theta


@dataclass(frozen=True)
class RecoveryConfig:
    rate: float = DEVICE_RATE
    epsilon_growth: float = 1.5
    epsilon_max: float = 0.5
    snap_period: bool = True  # stretch T up to a whole number of device samples


def recover_trajectory(timing, path, params: ForceParams, cfg: RecoveryConfig | None = None,
                       ocp_cfg=None, resolve=None) -> TrapTrajectory:
    """Device-rate trap trajectory for ``timing``.

    On a failed inversion epsilon grows by ``epsilon_growth`` and the timing
    problem is re-solved, either through ``resolve(epsilon)`` or, when
    ``ocp_cfg`` is given, by re-running the timing solver with the new margin.
    Without either, the failure is raised directly.
    """
    from . import ocp

    cfg = cfg or RecoveryConfig()
    if resolve is None and ocp_cfg is not None:
        def resolve(eps, _warm=timing):
            return ocp.solve_path(path, params, replace(ocp_cfg, epsilon=eps), warm=_warm)
    eps = timing.epsilon
    current = timing
    while True:
        work = current
        if cfg.snap_period and current.boundary == "periodic":
            n = math.ceil(current.T * cfg.rate - 1e-9)
            work = ocp.stretch_timing(current, n / cfg.rate)
        try:
            t, q, u, theta = _recover_dense(path, params, work, cfg.rate)
            break
        except RecoveryError as exc:
            eps_new = eps * cfg.epsilon_growth
            if resolve is None or eps_new >= cfg.epsilon_max:
                raise RecoveryError(f"{exc} (epsilon={eps:.3f}, giving up)", theta=exc.theta) from exc
            log.info("recovery failed at theta=%.4f; epsilon %.3f -> %.3f", exc.theta, eps, eps_new)
            eps = eps_new
            current = resolve(eps)
    periodic = work.boundary == "periodic"
    meta = {"T_opt": current.T, "gamma": current.gamma, "epsilon": eps,
            "params_hash": params_hash(params), "boundary": work.boundary}
    if getattr(path, "kind", None):
        meta["shape"] = path.kind
    traj = TrapTrajectory(t=t, u=u, q=q, T=work.T, rate=cfg.rate, periodic=periodic, meta=meta)
    traj.timing = current
    _check_volume(traj)
    return traj


def _check_volume(traj):
    if np.any(np.abs(traj.u) > WORKING_VOLUME):
        raise RecoveryError("trap positions leave the working volume")


def resample(traj: TrapTrajectory, rate: float) -> TrapTrajectory:
    """Cubic re-interpolation of u (and q) onto a uniform grid at ``rate``."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    t = sample_times(traj.T, rate, traj.periodic) if traj.periodic else \
        np.append(np.arange(int(math.floor((traj.t[-1] - traj.t[0]) * rate + 1e-9)) + 1)[:-1] / rate
                  + traj.t[0], traj.t[-1])
    t = np.unique(t)
    u = traj.spline("u")(t)
    q = traj.spline("q")(t)
    # nested grids: keep coinciding samples bit-identical
    idx = np.searchsorted(traj.t, t)
    idx = np.minimum(idx, len(traj.t) - 1)
    same = np.abs(traj.t[idx] - t) <= 1e-12
    u[same] = traj.u[idx[same]]
    q[same] = traj.q[idx[same]]
    return replace(traj, t=t, u=u, q=q, rate=float(rate), meta=dict(traj.meta))


def velocity_alignment(traj: TrapTrajectory) -> float:
    """min over samples of cos(angle between particle and trap velocities).

    Negative values mean the trap moves against the particle somewhere, the
    signature of the sudden trap jumps produced by too little regularisation.
    """
    dt = 1.0 / traj.rate
    if traj.periodic:
        pd = (np.roll(traj.q, -1, 0) - np.roll(traj.q, 1, 0)) / (2 * dt)
        ud = (np.roll(traj.u, -1, 0) - np.roll(traj.u, 1, 0)) / (2 * dt)
    else:
        pd = np.gradient(traj.q, traj.t, axis=0)
        ud = np.gradient(traj.u, traj.t, axis=0)
    num = np.einsum("ij,ij->i", pd, ud)
    den = np.linalg.norm(pd, axis=1) * np.linalg.norm(ud, axis=1)
    moving = den > 0
    return float(np.min(num[moving] / den[moving])) if moving.any() else 1.0


def baseline_trajectory(path, T: float, strategy: str = "param", rate: float = DEVICE_RATE,
                        ramp: float | None = None, duration: float = 2.0) -> TrapTrajectory:
    """Traps placed on the reference itself under a constant-rate timing law.

    With ``ramp`` (seconds) the lap rate rises from zero along a smoothstep
    and the result is a non-periodic trajectory of ``ramp + duration``
    seconds that starts at rest.
    """
    from .paths import BaselineTiming, baseline_timing

    n = int(round(T * rate))
    if abs(n / rate - T) > 1e-9:
        raise ValueError("baseline period must be a whole number of device samples")
    t, theta = baseline_timing(path, BaselineTiming(strategy, T, n))
    meta = {"timing": f"baseline-{strategy}", "shape": getattr(path, "kind", "")}
    if ramp is None:
        t, theta = t[:-1], theta[:-1]
        q = path.eval(theta)
        return TrapTrajectory(t=t, u=q.copy(), q=q, T=T, rate=rate, periodic=True, meta=meta)
    if ramp <= 0 or duration <= 0:
        raise ValueError("ramp and duration must be positive")
    ts = np.arange(int(math.floor((ramp + duration) * rate + 1e-9)) + 1) / rate
    s = np.clip(ts / ramp, 0.0, 1.0)
    # laps completed: integral of smoothstep(t / ramp) / T
    laps = np.where(ts < ramp, ramp * (s ** 3 - 0.5 * s ** 4), 0.5 * ramp + (ts - ramp)) / T
    frac = laps - np.floor(laps)
    th = np.interp(frac * n, np.arange(n + 1), theta)
    q = path.eval(th)
    meta.update(ramp=float(ramp), orbit_T=float(T))
    return TrapTrajectory(t=ts, u=q.copy(), q=q, T=float(ts[-1]), rate=rate, periodic=False,
                          meta=meta)


def ramp_up(path, params: ForceParams, traj: TrapTrajectory, ocp_cfg=None,
            recovery: RecoveryConfig | None = None, duration: float | None = None,
            laps: int = 1) -> TrapTrajectory:
    """Run-up from rest that ends on the periodic orbit of ``traj``.

    The rest-to-rest timing problem is solved with the end rate and end
    acceleration of the periodic timing at theta0, so the spliced trajectory
    has continuous theta, theta' and theta''.  The ramp covers ``laps``
    laps.  A time-optimal orbit uses the whole force budget and leaves
    nothing for speeding up, so ramps generally need an orbit with some
    slack (a period above the minimum).  With ``duration`` the ramp length is
    fixed and only the regulariser is minimised, which gives a gentler start
    than the minimum-time ramp.
    """
    from . import ocp
    from .paths import LapPath

    timing = traj.timing
    base = replace(ocp_cfg or ocp.OcpConfig(nodes=timing.N, gamma=timing.gamma),
                   boundary="rest", epsilon=timing.epsilon, fixed_T=duration,
                   end_rate=float(timing.theta_dot[0]), end_accel=float(timing.v[0]))
    cfg = replace(base, nodes=base.nodes * laps)
    lap_path = LapPath(path, laps)
    sol = ocp.solve_path(lap_path, params, cfg)
    ramp = recover_trajectory(sol, lap_path, params, recovery, ocp_cfg=cfg)
    ramp.meta.update(role="ramp", laps=laps)
    return ramp


def splice(ramp: TrapTrajectory, traj: TrapTrajectory, periods: int) -> TrapTrajectory:
    """Ramp followed by ``periods`` repetitions of the periodic trajectory."""
    if not traj.periodic or ramp.periodic:
        raise ValueError("splice needs a non-periodic ramp and a periodic orbit")
    if periods < 1:
        raise ValueError("need at least one period")
    t0 = ramp.t[-1]
    reps = np.arange(periods)[:, None] * traj.T + traj.t[None, :]
    t = np.concatenate([ramp.t[:-1], t0 + reps.ravel(), [t0 + periods * traj.T]])
    u = np.vstack([ramp.u[:-1], np.tile(traj.u, (periods, 1)), traj.u[:1]])
    q = np.vstack([ramp.q[:-1], np.tile(traj.q, (periods, 1)), traj.q[:1]])
    meta = dict(traj.meta, ramp=float(t0 - ramp.t[0]), periods=int(periods), orbit_T=float(traj.T))
    return TrapTrajectory(t=t, u=u, q=q, T=float(t[-1] - t[0]), rate=traj.rate, periodic=False,
                          meta=meta)


def design_trajectory(path, params: ForceParams, ocp_cfg=None, period: float | None = None,
                      auto_gamma: bool = False, allow_slower: bool = False,
                      recovery: RecoveryConfig | None = None) -> TrapTrajectory:
    """Timing solve plus recovery for ``path``, optionally at a fixed ``period``.

    With ``auto_gamma`` gamma is chosen by ``ocp.select_gamma``.  When
    ``period`` is longer than the minimum period the timing is re-solved with
    T fixed, which spreads the slack over the whole lap; if that fails the
    minimum-period timing is stretched to ``period``.  A minimum period
    above ``period`` raises ``InfeasibleError`` unless ``allow_slower``, in
    which case the minimum-period trajectory is returned with
    ``meta['slower'] = True``.
    """
    from . import ocp

    cfg = ocp_cfg or ocp.OcpConfig()
    if cfg.fixed_T is not None:
        raise ValueError("pass the period through ``period``, not fixed_T")
    if auto_gamma:
        choice = ocp.select_gamma(path, params, cfg, recovery=recovery)
        traj = choice.trajectory
        cfg = replace(cfg, gamma=choice.gamma)
        traj.meta["gamma_alignment"] = {f"{g:g}": a for g, a in choice.alignment.items()}
    else:
        sol = ocp.solve_path(path, params, cfg)
        traj = recover_trajectory(sol, path, params, recovery, ocp_cfg=cfg)
    if period is None:
        return traj
    rate = (recovery or RecoveryConfig()).rate
    if traj.T > period + 0.5 / rate:
        if not allow_slower:
            raise ocp.InfeasibleError(
                f"minimum period {traj.T * 1e3:.2f} ms exceeds the requested {period * 1e3:.2f} ms")
        traj.meta["slower"] = True
        return traj
    if traj.T >= period - 0.5 / rate:
        return traj
    fixed = replace(cfg, fixed_T=period, epsilon=traj.timing.epsilon)
    try:
        sol = ocp.solve_path(path, params, fixed, warm=traj.timing)
        out = recover_trajectory(sol, path, params, recovery, ocp_cfg=fixed)
        out.meta["period_fit"] = "resolve"
    except (ocp.InfeasibleError, ocp.SolverFailure, RecoveryError) as exc:
        # slowing the minimum-period timing scales every force down, so it stays reachable
        log.info("fixed-period solve failed (%s); stretching the minimum-period timing", exc)
        slow = ocp.stretch_timing(traj.timing, period, path, params)
        out = recover_trajectory(slow, path, params, recovery)
        out.meta["period_fit"] = "stretch"
    out.meta["T_min"] = traj.T
    return out
