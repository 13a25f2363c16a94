"""Regularised minimum-time path following by trapezoidal collocation.

The timing law theta(t) is a double integrator driven by the virtual input
v = theta''.  Time is normalised, tau = t / T in [0, 1], and per node we use

    w = T * theta',   a = T^2 * v,

so that the required particle acceleration is (q'' w^2 + q' a) / T^2.  The
trap force is represented by six auxiliary variables zeta (the trigonometric
terms of the axis-symmetric model) and the node constraint

    q''(theta) w^2 + q'(theta) a - T^2 F(zeta) / m = 0

replaces explicit inversion of the force law.  Objective:

    T + gamma_phys * int v^2 dt,   gamma_phys = gamma * T_ref^4 / dtheta^2

with T_ref the period of the initial guess, which makes ``gamma``
dimensionless.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from . import nlp as nlpmod
from .forcemodel import ForceParams, force_from_zeta, offset_guess, radial_coupling, zeta_from_offset
from .paths import ReferencePath

log = logging.getLogger(__name__)

NV = 9  # theta, w, a, zeta1..zeta6
TH, W, A, Z = 0, 1, 2, 3


class InfeasibleError(RuntimeError):
    def __init__(self, message, violation=float("nan"), node=None):
        super().__init__(message)
        self.violation = violation
        self.node = node


class SolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class OcpConfig:
    nodes: int = 240
    gamma: float = 1e-4
    epsilon: float = 0.05
    boundary: str = "periodic"  # or "rest"
    fixed_T: float | None = None
    max_iter: int = 300
    tol_constraint: float = 1e-10
    tol_optimality: float = 1e-6
    guess_accel_fraction: float = 0.5
    # rest-to-rest splice targets (theta', theta'') at the end of the ramp
    end_rate: float | None = None
    end_accel: float | None = None

    def __post_init__(self):
        if self.nodes < 16:
            raise ValueError("need at least 16 collocation nodes")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.boundary not in ("periodic", "rest"):
            raise ValueError("boundary must be 'periodic' or 'rest'")
        if self.fixed_T is not None and self.fixed_T <= 0:
            raise ValueError("fixed_T must be positive")


@dataclass
class TimingSolution:
    t: np.ndarray  # node times, k = 0..N (periodic: last node repeats the first)
    theta: np.ndarray
    theta_dot: np.ndarray
    v: np.ndarray
    zeta: np.ndarray  # (N+1, 6)
    T: float
    objective: float
    gamma: float
    epsilon: float
    boundary: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.t) - 1

    def regularizer(self) -> float:
        """Physical int_0^T v^2 dt (trapezoid)."""
        return float(np.trapezoid(self.v ** 2, self.t))

    def to_dict(self) -> dict:
        return {"T": self.T, "gamma": self.gamma, "epsilon": self.epsilon,
                "boundary": self.boundary, "objective": self.objective,
                "t": self.t.tolist(), "theta": self.theta.tolist(),
                "theta_dot": self.theta_dot.tolist(), "v": self.v.tolist(),
                "zeta": self.zeta.tolist(), "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> "TimingSolution":
        return cls(t=np.asarray(d["t"]), theta=np.asarray(d["theta"]),
                   theta_dot=np.asarray(d["theta_dot"]), v=np.asarray(d["v"]),
                   zeta=np.asarray(d["zeta"]).reshape(-1, 6), T=float(d["T"]),
                   objective=float(d["objective"]), gamma=float(d["gamma"]),
                   epsilon=float(d["epsilon"]), boundary=d["boundary"],
                   diagnostics=d.get("diagnostics", {}))


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------

def required_accel(path: ReferencePath, theta, theta_dot, v) -> np.ndarray:
    """q''(theta) theta'^2 + q'(theta) v."""
    _, dq, ddq = path.eval_derivs(theta)
    td = np.asarray(theta_dot, dtype=float)[..., None]
    return ddq * td ** 2 + dq * np.asarray(v, dtype=float)[..., None]


def dynamics_residual(path, params: ForceParams, sol: TimingSolution) -> np.ndarray:
    """m q''(theta(t)) - F(zeta) at every node, in newtons."""
    acc = required_accel(path, sol.theta, sol.theta_dot, sol.v)
    return params.mass * acc - force_from_zeta(params, sol.zeta)


# --------------------------------------------------------------------------
# the transcribed problem
# --------------------------------------------------------------------------

class TimingNLP(nlpmod.SparseNLP):
    """Discretised minimum-time problem.  x = [node blocks (K x 9), T]."""

    def __init__(self, path: ReferencePath, params: ForceParams, cfg: OcpConfig,
                 T_ref: float):
        self.path, self.params, self.cfg = path, params, cfg
        self.periodic = cfg.boundary == "periodic"
        if self.periodic and not path.periodic:
            raise ValueError("periodic boundary needs a periodic path")
        self.N = cfg.nodes
        self.K = self.N if self.periodic else self.N + 1
        self.n = NV * self.K + 1
        self.iT = NV * self.K
        self.dtheta = path.span
        self.T_ref = float(T_ref)
        self.a_ref = params.A_r / params.mass
        self.S = self.T_ref ** 2 * self.a_ref  # scale of the dynamics rows
        K = self.K
        w = np.full(K, 1.0 / self.N)
        if not self.periodic:
            w[0] = w[-1] = 0.5 / self.N
        self.quad_w = w
        self.kappa = params.V_zr / params.kxr
        self._build_bounds()
        self._build_pattern()

    # ---- layout helpers
    def idx(self, k, j):
        return NV * np.asarray(k) + j

    def unpack(self, x):
        blocks = x[: self.iT].reshape(self.K, NV)
        return blocks, x[self.iT]

    def _build_bounds(self):
        K, eps = self.K, self.cfg.epsilon
        lb = np.full((K, NV), -np.inf)
        ub = np.full((K, NV), np.inf)
        lb[:, W] = 0.0
        lb[:, Z + 0], ub[:, Z + 0] = -(1 - eps), 1 - eps  # zeta1: radial peak
        lb[:, Z + 1] = 0.0  # zeta2 = cos(V_z dz) on the first branch
        lb[:, Z + 2], ub[:, Z + 2] = -(1 - eps), 1 - eps  # zeta3: vertical peak
        # |zeta2|, zeta4, zeta5, zeta6 <= 1 follow from the equalities; bounding them
        # as well makes the active set degenerate at zeta6 = +-1
        if not self.periodic:
            lb[:, TH], ub[:, TH] = self.path.theta0, self.path.thetaf
            lb[-1, TH] = ub[-1, TH] = self.path.thetaf
            lb[0, W] = ub[0, W] = 0.0
        lb[0, TH] = ub[0, TH] = self.path.theta0
        lbT, ubT = 1e-4 * self.T_ref, np.inf
        if self.cfg.fixed_T is not None:
            lbT = ubT = self.cfg.fixed_T
        self.lb = np.concatenate([lb.ravel(), [lbT]])
        self.ub = np.concatenate([ub.ravel(), [ubT]])

    def _build_pattern(self):
        K, N = self.K, self.N
        rows, cols = [], []
        k = np.arange(K)
        i = lambda j: NV * k + j  # noqa: E731
        # dynamics rows 6k + 0..2, identities 6k + 3..5
        r = 6 * k
        zc = {0: (Z + 0, Z + 1, Z + 5), 1: (Z + 0, Z + 1, Z + 4), 2: (Z + 2, Z + 3)}
        for comp in range(3):
            for j in (TH, W, A) + zc[comp]:
                rows.append(r + comp)
                cols.append(i(j))
            rows.append(r + comp)
            cols.append(np.full(K, self.iT))
        for row_off, js in ((3, (Z + 1, Z + 2)), (4, (Z + 4, Z + 5)), (5, (Z + 0, Z + 3))):
            for j in js:
                rows.append(r + row_off)
                cols.append(i(j))
        # collocation rows
        base = 6 * K
        kk = np.arange(N)
        k1 = (kk + 1) % K
        for j_a, j_b in ((TH, W), (W, A)):
            row = base + 2 * kk + (0 if j_a == TH else 1)
            for col in (NV * kk + j_a, NV * k1 + j_a, NV * kk + j_b, NV * k1 + j_b):
                rows.append(row)
                cols.append(col)
        self.m = 6 * K + 2 * N
        if not self.periodic:
            # end-of-ramp rate (and acceleration) targets
            extra = []
            if self.cfg.end_rate is not None:
                extra.append(W)
            if self.cfg.end_accel is not None:
                extra.append(A)
            self._extra = extra
            for e, j in enumerate(extra):
                row = self.m + e
                rows += [np.array([row]), np.array([row])]
                cols += [np.array([NV * (K - 1) + j]), np.array([self.iT])]
            self.m += len(extra)
        else:
            self._extra = []
        self._rows = np.concatenate([np.atleast_1d(a) for a in rows])
        self._cols = np.concatenate([np.atleast_1d(a) for a in cols])

    # ---- objective
    def objective(self, x):
        blk, T = self.unpack(x)
        a = blk[:, A] / self.dtheta
        reg = self.quad_w @ (a * a)
        return T / self.T_ref + self.cfg.gamma * (self.T_ref / T) ** 3 * reg

    def gradient(self, x):
        blk, T = self.unpack(x)
        a = blk[:, A] / self.dtheta
        reg = self.quad_w @ (a * a)
        g = np.zeros(self.n)
        c = self.cfg.gamma * (self.T_ref / T) ** 3
        g[A: self.iT: NV] = c * 2 * self.quad_w * a / self.dtheta
        g[self.iT] = 1.0 / self.T_ref - 3 * self.cfg.gamma * self.T_ref ** 3 / T ** 4 * reg
        return g

    # ---- constraints
    def _path_terms(self, theta):
        p = self.path
        return p.derivative(theta, 1), p.derivative(theta, 2), p.derivative(theta, 3)

    def constraints(self, x):
        blk, T = self.unpack(x)
        th, w, a, z = blk[:, TH], blk[:, W], blk[:, A], blk[:, Z:]
        dq, ddq, _ = self._path_terms(th)
        pr = self.params
        F = force_from_zeta(pr, z)
        dyn = (ddq * (w * w)[:, None] + dq * a[:, None] - T * T * F / pr.mass) / self.S
        c = np.empty(self.m)
        K, N = self.K, self.N
        node = np.empty((K, 6))
        node[:, :3] = dyn
        node[:, 3] = z[:, 1] ** 2 + z[:, 2] ** 2 - 1
        node[:, 4] = z[:, 4] ** 2 + z[:, 5] ** 2 - 1
        node[:, 5] = z[:, 3] - radial_coupling(pr, z[:, 0])
        c[: 6 * K] = node.ravel()
        kk = np.arange(N)
        k1 = (kk + 1) % K
        th1 = th[k1] + (self.dtheta if self.periodic else 0.0) * (kk == N - 1) * (k1 == 0)
        col = np.empty((N, 2))
        col[:, 0] = N * (th1 - th[kk]) - 0.5 * (w[kk] + w[k1])
        col[:, 1] = N * (w[k1] - w[kk]) - 0.5 * (a[kk] + a[k1])
        c[6 * K: 6 * K + 2 * N] = col.ravel()
        off = 6 * K + 2 * N
        for e, j in enumerate(self._extra):
            if j == W:
                c[off + e] = blk[-1, W] - T * self.cfg.end_rate
            else:
                c[off + e] = (blk[-1, A] - T * T * self.cfg.end_accel) / self.dtheta
        return c

    def jacobian(self, x):
        blk, T = self.unpack(x)
        th, w, a, z = blk[:, TH], blk[:, W], blk[:, A], blk[:, Z:]
        dq, ddq, dddq = self._path_terms(th)
        pr = self.params
        S, m = self.S, pr.mass
        z1, z2, z3, z4, z5, z6 = (z[:, i] for i in range(6))
        F = force_from_zeta(pr, z)
        TT = T * T / (m * S)
        data = []
        dth = (dddq * (w * w)[:, None] + ddq * a[:, None]) / S
        dw = 2 * ddq * w[:, None] / S
        da = dq / S
        dT = -2 * T * F / (m * S)
        Ar, Az = pr.A_r, pr.A_z
        zpart = {
            0: (-TT * Ar * z2 * z6, -TT * Ar * z1 * z6, -TT * Ar * z1 * z2),
            1: (-TT * Ar * z2 * z5, -TT * Ar * z1 * z5, -TT * Ar * z1 * z2),
            2: (-TT * Az * z4, -TT * Az * z3),
        }
        for comp in range(3):
            data += [dth[:, comp], dw[:, comp], da[:, comp]]
            data += list(zpart[comp])
            data.append(dT[:, comp])
        kap = self.kappa
        zc = np.clip(z1, -1 + 1e-12, 1 - 1e-12)
        dcoup = np.sin(kap * np.arcsin(zc)) * kap / np.sqrt(1 - zc * zc)
        data += [2 * z2, 2 * z3, 2 * z5, 2 * z6, dcoup, np.ones(self.K)]
        N = self.N
        ones = np.ones(N)
        data += [-N * ones, N * ones, -0.5 * ones, -0.5 * ones]
        data += [-N * ones, N * ones, -0.5 * ones, -0.5 * ones]
        for j in self._extra:
            if j == W:
                data += [np.array([1.0]), np.array([-self.cfg.end_rate])]
            else:
                data += [np.array([1.0 / self.dtheta]),
                         np.array([-2 * T * self.cfg.end_accel / self.dtheta])]
        vals = np.concatenate([np.atleast_1d(d) for d in data])
        return sparse.csr_matrix((vals, (self._rows, self._cols)), shape=(self.m, self.n))

    def hessian(self, x, y, sigma=1.0):
        """Hessian of sigma*f + y.c (symmetric, CSR)."""
        blk, T = self.unpack(x)
        th, w, a, z = blk[:, TH], blk[:, W], blk[:, A], blk[:, Z:]
        K, pr = self.K, self.params
        p = self.path
        dq, ddq = p.derivative(th, 1), p.derivative(th, 2)
        d3, d4 = p.derivative(th, 3), p.derivative(th, 4)
        S, m = self.S, pr.mass
        yn = y[: 6 * K].reshape(K, 6)
        yd = yn[:, :3]
        H = np.zeros((K, NV, NV))
        hT = np.zeros((K, NV))  # d2/(dx_k dT)
        H[:, TH, TH] = np.einsum("ki,ki->k", yd, d4 * (w * w)[:, None] + d3 * a[:, None]) / S
        H[:, TH, W] = np.einsum("ki,ki->k", yd, 2 * d3 * w[:, None]) / S
        H[:, TH, A] = np.einsum("ki,ki->k", yd, ddq) / S
        H[:, W, W] = np.einsum("ki,ki->k", yd, 2 * ddq) / S
        z1, z2, z3, z4, z5, z6 = (z[:, i] for i in range(6))
        Ar, Az = pr.A_r, pr.A_z
        c2 = -T * T / (m * S)
        yx, yy, yz = yd[:, 0], yd[:, 1], yd[:, 2]
        zz = Z
        H[:, zz + 0, zz + 1] = c2 * Ar * (yx * z6 + yy * z5)
        H[:, zz + 0, zz + 5] = c2 * Ar * yx * z2
        H[:, zz + 1, zz + 5] = c2 * Ar * yx * z1
        H[:, zz + 0, zz + 4] = c2 * Ar * yy * z2
        H[:, zz + 1, zz + 4] = c2 * Ar * yy * z1
        H[:, zz + 2, zz + 3] = c2 * Az * yz
        # identity rows
        H[:, zz + 1, zz + 1] += 2 * yn[:, 3]
        H[:, zz + 2, zz + 2] += 2 * yn[:, 3]
        H[:, zz + 4, zz + 4] += 2 * yn[:, 4]
        H[:, zz + 5, zz + 5] += 2 * yn[:, 4]
        kap = self.kappa
        zc = np.clip(z1, -1 + 1e-12, 1 - 1e-12)
        s = np.arcsin(zc)
        om = 1 - zc * zc
        H[:, zz + 0, zz + 0] += yn[:, 5] * (np.cos(kap * s) * kap ** 2 / om
                                            + np.sin(kap * s) * kap * zc / om ** 1.5)
        # T couplings
        F = force_from_zeta(pr, z)
        cT = -2 * T / (m * S)
        hT[:, zz + 0] = cT * (Ar * z2 * (yx * z6 + yy * z5))
        hT[:, zz + 1] = cT * (Ar * z1 * (yx * z6 + yy * z5))
        hT[:, zz + 2] = cT * Az * yz * z4
        hT[:, zz + 3] = cT * Az * yz * z3
        hT[:, zz + 4] = cT * Ar * yy * z1 * z2
        hT[:, zz + 5] = cT * Ar * yx * z1 * z2
        hTT = -2 / (m * S) * np.sum(yd * F)
        # objective
        g = self.cfg.gamma
        aa = a / self.dtheta
        reg = self.quad_w @ (aa * aa)
        H[:, A, A] += sigma * g * (self.T_ref / T) ** 3 * 2 * self.quad_w / self.dtheta ** 2
        hT[:, A] += sigma * (-3 * g * self.T_ref ** 3 / T ** 4) * 2 * self.quad_w * aa / self.dtheta
        hTT += sigma * 12 * g * self.T_ref ** 3 / T ** 5 * reg
        off = 6 * K + 2 * self.N
        for e, j in enumerate(self._extra):
            if j == A:
                hTT += y[off + e] * (-2 * self.cfg.end_accel / self.dtheta)
        # symmetrise node blocks
        iu = np.triu_indices(NV, 1)
        H[:, iu[1], iu[0]] = H[:, iu[0], iu[1]]
        blocks = sparse.block_diag(list(H), format="coo")
        col = sparse.coo_matrix(hT.reshape(-1, 1))
        full = sparse.bmat([[blocks, col], [col.T, sparse.coo_matrix([[hTT]])]], format="csr")
        return full

    # ---- conversions
    def to_solution(self, x, result=None) -> TimingSolution:
        blk, T = self.unpack(x)
        th, w, a, z = blk[:, TH], blk[:, W], blk[:, A], blk[:, Z:]
        if self.periodic:
            th = np.append(th, th[0] + self.dtheta)
            w = np.append(w, w[0])
            a = np.append(a, a[0])
            z = np.vstack([z, z[:1]])
        t = np.linspace(0.0, T, self.N + 1)
        gamma_phys = self.cfg.gamma * self.T_ref ** 4 / self.dtheta ** 2
        diag = {"T_ref": self.T_ref, "gamma_phys": gamma_phys, "nodes": self.N}
        obj = float(T + gamma_phys * np.trapezoid((a / T ** 2) ** 2, t))
        if result is not None:
            diag.update(constraint_violation=result.constraint_violation,
                        optimality=result.optimality, iterations=result.iterations,
                        success=result.success,
                        message=result.message)
        return TimingSolution(t=t, theta=th, theta_dot=w / T, v=a / T ** 2, zeta=z, T=float(T),
                              objective=obj, gamma=self.cfg.gamma, epsilon=self.cfg.epsilon,
                              boundary=self.cfg.boundary, diagnostics=diag)

    def from_timing(self, theta, theta_dot, v, T, zeta=None) -> np.ndarray:
        """Decision vector from node-wise timing values (length K)."""
        x = np.zeros(self.n)
        blk = x[: self.iT].reshape(self.K, NV)
        blk[:, TH] = theta[: self.K]
        blk[:, W] = theta_dot[: self.K] * T
        blk[:, A] = v[: self.K] * T * T
        if zeta is None:
            zeta = zeta_for_timing(self.path, self.params, theta[: self.K],
                                   theta_dot[: self.K], v[: self.K])
        blk[:, Z:] = zeta[: self.K]
        x[self.iT] = T
        return x


def zeta_for_timing(path, params: ForceParams, theta, theta_dot, v):
    """Pointwise zeta realising the required force (centred-trap warm start)."""
    from .trapsolve import solve_offset

    acc = required_accel(path, theta, theta_dot, v)
    F = params.mass * acc
    out = np.empty((len(theta), 6))
    phi = 0.0
    d_prev = None
    for i, f in enumerate(F):
        guess = offset_guess(params, f, phi) if d_prev is None else d_prev
        d, ok = solve_offset(params, f, guess)
        if not ok:
            d = offset_guess(params, f, phi)
        if math.hypot(d[0], d[1]) > 0:
            phi = math.atan2(d[1], d[0])
        out[i] = zeta_from_offset(params, d, phi)
        d_prev = d
    # keep the horizontal direction sign-consistent with a continuous azimuth
    return _canonical_zeta(out)


def _canonical_zeta(z):
    """Use the (zeta1, phi) / (-zeta1, phi + pi) freedom to keep phi continuous."""
    z = z.copy()
    for i in range(1, len(z)):
        if z[i - 1, 5] * z[i, 5] + z[i - 1, 4] * z[i, 4] < 0:
            z[i, 0] *= -1
            z[i, 4:6] *= -1
    return z


# --------------------------------------------------------------------------
# initial guess and solve
# --------------------------------------------------------------------------

def conservative_period(path: ReferencePath, params: ForceParams, fraction: float = 0.5,
                        samples: int = 2000) -> float:
    """Period at which constant-rate theta needs at most ``fraction`` of the caps."""
    th = np.linspace(path.theta0, path.thetaf, samples, endpoint=not path.periodic)
    acc = path.derivative(th, 2) * path.span ** 2  # for T = 1
    a_h_cap, a_z_cap = params.max_accel
    h = np.hypot(acc[:, 0], acc[:, 1]) / (fraction * a_h_cap)
    v = np.abs(acc[:, 2]) / (fraction * a_z_cap)
    return float(math.sqrt(max(h.max(), v.max(), 1e-30)))


def initial_guess(nlp: TimingNLP, T0: float | None = None) -> np.ndarray:
    path, cfg = nlp.path, nlp.cfg
    T0 = nlp.T_ref if T0 is None else T0
    if cfg.fixed_T is not None:
        T0 = cfg.fixed_T
    K = nlp.K
    if nlp.periodic:
        theta = path.theta0 + path.span * np.arange(K) / nlp.N
        rate = np.full(K, path.span / T0)
        v = np.zeros(K)
    else:
        s = np.arange(K) / nlp.N
        end_rate = cfg.end_rate or 0.0
        span = path.span
        if end_rate > 0 and cfg.fixed_T is None:
            T0 = min(T0, 2 * span / end_rate)  # keeps the Hermite guess monotone
        # cubic Hermite from rest to (thetaf, end_rate)
        h01, h11 = -2 * s ** 3 + 3 * s ** 2, s ** 3 - s ** 2
        m1 = end_rate * T0
        theta = path.theta0 + span * h01 + m1 * h11
        rate = (span * (-6 * s ** 2 + 6 * s) + m1 * (3 * s ** 2 - 2 * s)) / T0
        v = (span * (-12 * s + 6) + m1 * (6 * s - 2)) / T0 ** 2
        rate = np.maximum(rate, 0.0)
    return nlp.from_timing(theta, rate, v, T0)


def build_nlp(path: ReferencePath, params: ForceParams, cfg: OcpConfig,
              T_ref: float | None = None) -> TimingNLP:
    if T_ref is None:
        T_ref = conservative_period(path, params, cfg.guess_accel_fraction)
        if cfg.boundary == "rest":
            T_ref *= 2.0
    return TimingNLP(path, params, cfg, T_ref)


GAMMA_CONTINUATION_START = 1e-2


def solve_timing(nlp: TimingNLP, x0=None, warm: bool = False) -> TimingSolution:
    """Solve the transcribed problem; raises InfeasibleError / SolverFailure."""
    if x0 is None:
        x0 = initial_guess(nlp)
    opts = nlpmod.IPOptions(max_iter=nlp.cfg.max_iter, tol_constraint=nlp.cfg.tol_constraint,
                            tol_optimality=nlp.cfg.tol_optimality)
    if warm:
        opts.mu0, opts.bound_push = 1e-4, 1e-6
    res = nlpmod.solve(nlp, x0, options=opts)
    sol = nlp.to_solution(res.x, res)
    if not res.success:
        c = nlp.constraints(res.x)
        node_viol = np.abs(c[: 6 * nlp.K]).reshape(nlp.K, 6).max(axis=1)
        worst = int(np.argmax(node_viol))
        if res.constraint_violation > 1e-6:
            raise InfeasibleError(
                f"constraints violated by {res.constraint_violation:.3e} "
                f"(worst node {worst}, theta={sol.theta[worst]:.4f}): {res.message}",
                violation=res.constraint_violation, node=worst)
        if res.optimality > 1e3 * nlp.cfg.tol_optimality:
            raise SolverFailure(f"no convergence: {res.message}, optimality {res.optimality:.2e}")
        log.warning("timing solve finished with %s (optimality %.2e)", res.message, res.optimality)
    return sol


def _gamma_ladder(gamma: float) -> list[float]:
    out = [GAMMA_CONTINUATION_START]
    while out[-1] / 10 > max(gamma, 1e-7) * (1 + 1e-9):
        out.append(out[-1] / 10)
    out.append(gamma)
    return out


def solve_path(path: ReferencePath, params: ForceParams, cfg: OcpConfig | None = None,
               warm: TimingSolution | None = None) -> TimingSolution:
    """Build, guess (or warm start) and solve; falls back to continuation in gamma.

    A failed warm start is retried cold.  Small gamma leaves v nearly
    undetermined on unsaturated arcs, which can stall a cold start; the
    last fallback walks gamma down by decades from
    ``GAMMA_CONTINUATION_START``, warm-starting each solve from the last.
    """
    cfg = cfg or OcpConfig()
    nlp = build_nlp(path, params, cfg)
    if warm is not None:
        try:
            return solve_timing(nlp, warm_start(nlp, warm), warm=True)
        except (InfeasibleError, SolverFailure) as exc:
            log.info("warm start failed (%s); retrying cold", exc)
    try:
        return solve_timing(nlp)
    except (InfeasibleError, SolverFailure) as exc:
        if cfg.gamma >= GAMMA_CONTINUATION_START:
            raise
        log.info("direct solve failed (%s); continuing in gamma", exc)
    sol = None
    for g in _gamma_ladder(cfg.gamma):
        sub = TimingNLP(path, params, replace(cfg, gamma=g), nlp.T_ref)
        sol = solve_timing(sub, None if sol is None else warm_start(sub, sol), warm=sol is not None)
    return sol


def warm_start(nlp: TimingNLP, sol: TimingSolution) -> np.ndarray:
    """Re-use the normalised-time profile of a previous solution on a new problem."""
    T = nlp.cfg.fixed_T or sol.T
    if sol.N == nlp.N and sol.boundary == nlp.cfg.boundary:
        K = nlp.K
        x = nlp.from_timing(sol.theta, sol.theta_dot * sol.T / T, sol.v * (sol.T / T) ** 2, T,
                            zeta=_project_zeta(nlp, sol.zeta[:K]))
        return x
    tau_old = sol.t / sol.T
    tau = np.arange(nlp.K) / nlp.N
    th = np.interp(tau, tau_old, sol.theta)
    w = np.interp(tau, tau_old, sol.theta_dot * sol.T)
    a = np.interp(tau, tau_old, sol.v * sol.T ** 2)
    return nlp.from_timing(th, w / T, a / T ** 2, T)


def _project_zeta(nlp: TimingNLP, zeta):
    """Clip the peak terms into the current margin and restore the identities."""
    z = np.array(zeta, dtype=float)
    lim = 1 - nlp.cfg.epsilon
    z[:, 0] = np.clip(z[:, 0], -lim, lim)
    z[:, 2] = np.clip(z[:, 2], -lim, lim)
    z[:, 1] = np.sqrt(1 - z[:, 2] ** 2)
    z[:, 3] = radial_coupling(nlp.params, z[:, 0])
    nrm = np.hypot(z[:, 4], z[:, 5])
    z[:, 4:6] /= np.where(nrm > 0, nrm, 1.0)[:, None]
    return z


def stretch_timing(sol: TimingSolution, T_new: float, path=None, params=None) -> TimingSolution:
    """Same theta profile played over T_new (>= T lowers every acceleration)."""
    s = sol.T / T_new
    zeta = sol.zeta
    if path is not None and params is not None:
        zeta = zeta_for_timing(path, params, sol.theta, sol.theta_dot * s, sol.v * s * s)
    diag = dict(sol.diagnostics, stretched_from=sol.T)
    return replace(sol, t=sol.t / s, theta_dot=sol.theta_dot * s, v=sol.v * s * s, zeta=zeta,
                   T=float(T_new), diagnostics=diag)


def save_timing(sol: TimingSolution, path):
    Path(path).write_text(json.dumps(sol.to_dict(), indent=1, default=_json_default) + "\n")


def load_timing(path) -> TimingSolution:
    return TimingSolution.from_dict(json.loads(Path(path).read_text()))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


# --------------------------------------------------------------------------
# regularisation choice and size / time searches
# --------------------------------------------------------------------------

GAMMA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class GammaChoice:
    gamma: float
    timing: TimingSolution
    trajectory: object  # trapsolve.TrapTrajectory
    alignment: dict  # gamma -> min cos(p', u') (nan when recovery failed)


def select_gamma(path: ReferencePath, params: ForceParams, cfg: OcpConfig | None = None,
                 grid=GAMMA_GRID, recovery=None) -> GammaChoice:
    """Smallest gamma on ``grid`` whose recovered traps never move against the particle.

    The test is p' . u' > 0 at every device sample.  Falls back to the largest
    grid value when none qualifies.
    """
    from . import trapsolve

    cfg = cfg or OcpConfig()
    seen = {}
    last = None
    for g in sorted(grid):
        c = replace(cfg, gamma=g)
        try:
            sol = solve_path(path, params, c)
            traj = trapsolve.recover_trajectory(sol, path, params, recovery, ocp_cfg=c)
        except (InfeasibleError, SolverFailure, trapsolve.RecoveryError) as exc:
            log.info("gamma %.0e rejected: %s", g, exc)
            seen[g] = float("nan")
            continue
        seen[g] = trapsolve.velocity_alignment(traj)
        last = (g, traj)
        if seen[g] > 0:
            return GammaChoice(g, traj.timing, traj, seen)
    if last is None:
        raise InfeasibleError("no gamma on the grid gives a recoverable trajectory")
    return GammaChoice(last[0], last[1].timing, last[1], seen)


def min_time_for_size(path: ReferencePath, params: ForceParams, cfg: OcpConfig | None = None,
                      recover: bool = True, recovery=None, warm=None) -> float:
    """Shortest period for ``path``; with ``recover`` the epsilon back-off is included."""
    return _timed(path, params, cfg or OcpConfig(), recover, recovery, warm)[0]


def _timed(path, params, cfg, recover, recovery, warm):
    from . import trapsolve

    sol = solve_path(path, params, cfg, warm=warm)
    if not recover:
        return sol.T, sol
    traj = trapsolve.recover_trajectory(sol, path, params, recovery, ocp_cfg=cfg)
    return traj.T, traj.timing


@dataclass
class SizeSearch:
    width: float  # largest feasible width found (nan if none)
    T: float  # period at that width
    bracket: tuple  # (feasible, infeasible) widths
    evaluations: list  # (width, T or nan)


def max_size_for_time(kind: str, T_target: float, params: ForceParams,
                      cfg: OcpConfig | None = None, step: float = 5e-3,
                      resolution: float = 5e-4, recover: bool = True, recovery=None,
                      plane: str = "xz", probe_width: float = 0.05,
                      timer=None) -> SizeSearch:
    """Largest builtin width rendered within ``T_target``.

    Widths grow in ``step`` increments until a probe fails, then bisect down
    to ``resolution``.  The first probe is placed one step below the size
    predicted from the sqrt(size) scaling of the minimum period.
    ``timer(width) -> T`` overrides the default solve (e.g. baseline timings).
    """
    from . import trapsolve
    from .paths import make_builtin

    cfg = cfg or OcpConfig()
    evals = []
    cache = {}

    def period(width):
        key = round(width, 9)
        if key not in cache:
            try:
                if timer is not None:
                    T = timer(width)
                else:
                    T, sol = _timed(make_builtin(kind, width, plane=plane), params, cfg,
                                    recover, recovery, None)
            except (InfeasibleError, SolverFailure, trapsolve.RecoveryError) as exc:
                log.info("width %.4f failed: %s", width, exc)
                T = float("nan")
            cache[key] = T
            evals.append((width, T))
        return cache[key]

    def ok(width):
        T = period(width)
        return bool(np.isfinite(T) and T <= T_target * (1 + 1e-9))

    T0 = period(probe_width)
    if np.isfinite(T0):
        start = max(step, probe_width * (T_target / T0) ** 2 - step)
    else:
        start = step
    lo, hi = None, None
    w = start
    if ok(w):
        lo = w
        while True:
            w = lo + step
            if ok(w):
                lo = w
            else:
                hi = w
                break
    else:
        hi = w
        while w - step > resolution / 2:
            w = max(w - step, resolution)
            if ok(w):
                lo = w
                break
            hi = w
        if lo is None:
            return SizeSearch(float("nan"), float("nan"), (0.0, hi), evals)
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return SizeSearch(lo, period(lo), (lo, hi), evals)
