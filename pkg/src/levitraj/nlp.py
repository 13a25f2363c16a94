"""Primal-dual interior-point Newton solver for sparse equality-constrained NLPs.

    min f(x)  s.t.  c(x) = 0,  lb <= x <= ub

Log-barrier on the bounds, exact Lagrangian Hessian, one sparse LU of the
regularised KKT matrix per iteration.  Convexity of the reduced Hessian is
enforced with an inertia-free curvature test (raise the primal shift until
the step has positive curvature), globalised by a filter line search with
one second-order correction.  Fixed variables (lb == ub) are eliminated.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

log = logging.getLogger(__name__)


class NLPError(RuntimeError):
    pass


@dataclass
class NLPResult:
    x: np.ndarray
    f: float
    lam: np.ndarray
    constraint_violation: float
    optimality: float
    iterations: int
    success: bool
    message: str
    history: list = field(default_factory=list)


@dataclass
class IPOptions:
    tol_constraint: float = 1e-10
    tol_optimality: float = 1e-6
    tol_complementarity: float = 1e-8
    max_iter: int = 300
    mu0: float = 1e-1
    mu_min: float = 1e-11
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau_min: float = 0.99
    bound_push: float = 1e-2
    delta_w0: float = 1e-4
    delta_w_max: float = 1e20
    armijo: float = 1e-4
    min_step: float = 1e-14


class SparseNLP:
    """Interface for :func:`solve`."""

    n: int
    m: int
    lb: np.ndarray
    ub: np.ndarray

    def objective(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def constraints(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> sparse.csr_matrix:
        raise NotImplementedError

    def hessian(self, x, y, sigma=1.0) -> sparse.csr_matrix:
        raise NotImplementedError


def _push_inside(x, lb, ub, push):
    x = x.copy()
    has_l, has_u = np.isfinite(lb), np.isfinite(ub)
    pl = np.where(has_l & has_u, np.minimum(push * np.maximum(1, np.abs(lb)), 0.5 * push * (ub - lb)),
                  push * np.maximum(1, np.abs(lb)))
    pu = np.where(has_l & has_u, np.minimum(push * np.maximum(1, np.abs(ub)), 0.5 * push * (ub - lb)),
                  push * np.maximum(1, np.abs(ub)))
    x = np.where(has_l, np.maximum(x, lb + pl), x)
    x = np.where(has_u, np.minimum(x, ub - pu), x)
    return x


def _frac_to_boundary(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


class _Reduced:
    """View of the problem on the free variables only."""

    def __init__(self, nlp: SparseNLP, x_full):
        self.nlp = nlp
        self.fixed = nlp.lb == nlp.ub
        self.free = np.flatnonzero(~self.fixed)
        self.base = np.array(x_full, dtype=float)
        self.base[self.fixed] = nlp.lb[self.fixed]
        self.lb = nlp.lb[self.free]
        self.ub = nlp.ub[self.free]

    def full(self, xr):
        x = self.base.copy()
        x[self.free] = xr
        return x

    def f(self, xr):
        return float(self.nlp.objective(self.full(xr)))

    def g(self, xr):
        return self.nlp.gradient(self.full(xr))[self.free]

    def c(self, xr):
        return self.nlp.constraints(self.full(xr))

    def J(self, xr):
        return self.nlp.jacobian(self.full(xr))[:, self.free]

    def H(self, xr, y, sigma=1.0):
        return self.nlp.hessian(self.full(xr), y, sigma)[self.free][:, self.free]


class _Filter:
    """(infeasibility, barrier) pairs that later iterates must improve on."""

    def __init__(self, theta_max):
        self.pts = [(theta_max, -np.inf)]

    def acceptable(self, th, ph):
        return all(th < t or ph < p for t, p in self.pts)

    def add(self, th, ph):
        self.pts = [(t, p) for t, p in self.pts if t < th or p < ph] + [(th, ph)]


def _max_step(sl, su, dx, il, iu, tau):
    a = 1.0
    if len(il):
        a = min(a, _frac_to_boundary(sl, dx[il], tau))
    if len(iu):
        a = min(a, _frac_to_boundary(su, -dx[iu], tau))
    return a


def solve(nlp: SparseNLP, x0, y0=None, options: IPOptions | None = None) -> NLPResult:
    # trial points of the line search may overflow; they are rejected by the filter
    with np.errstate(over="ignore", invalid="ignore"):
        return _solve(nlp, x0, y0, options)


def _solve(nlp, x0, y0, options):
    opt = options or IPOptions()
    P = _Reduced(nlp, x0)
    lb, ub = P.lb, P.ub
    il, iu = np.flatnonzero(np.isfinite(lb)), np.flatnonzero(np.isfinite(ub))
    with np.errstate(invalid="ignore"):
        x = _push_inside(np.asarray(x0, dtype=float)[P.free], lb, ub, opt.bound_push)
    n, m = len(x), nlp.m
    mu = opt.mu0
    zl = np.clip(mu / (x[il] - lb[il]), 1e-3, 1e3)
    zu = np.clip(mu / (ub[iu] - x[iu]), 1e-3, 1e3)
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).copy()
    delta_last = 0.0
    history = []
    message, success = "max iterations", False

    def barrier(xv, muv):
        sl_, su_ = xv[il] - lb[il], ub[iu] - xv[iu]
        if np.any(sl_ <= 0) or np.any(su_ <= 0):
            return np.inf
        return P.f(xv) - muv * np.sum(np.log(sl_)) - muv * np.sum(np.log(su_))

    def errors(xv, yv, zlv, zuv, muv, g, c, J):
        r = g + J.T @ yv
        r[il] -= zlv
        r[iu] += zuv
        s_d = max(100.0, (np.abs(yv).sum() + zlv.sum() + zuv.sum())
                  / max(1, m + len(zlv) + len(zuv))) / 100
        comp = 0.0
        if len(il):
            comp = max(comp, float(np.max(np.abs((xv[il] - lb[il]) * zlv - muv))))
        if len(iu):
            comp = max(comp, float(np.max(np.abs((ub[iu] - xv[iu]) * zuv - muv))))
        dual = float(np.max(np.abs(r))) / s_d if n else 0.0
        return dual, (float(np.max(np.abs(c))) if m else 0.0), comp

    c0 = P.c(x)
    th0 = np.abs(c0).sum()
    theta_max = 1e4 * max(1.0, th0)
    theta_min = 1e-4 * max(1.0, th0)
    filt = _Filter(theta_max)
    it = 0
    for it in range(1, opt.max_iter + 1):
        g, c, J = P.g(x), P.c(x), P.J(x).tocsr()
        dual, prim, comp = errors(x, y, zl, zu, 0.0, g, c, J)
        history.append((it, P.f(x), prim, dual, comp, mu))
        log.debug("IP %3d f=%.10g prim=%.2e dual=%.2e comp=%.2e mu=%.1e d=%.1e", it, P.f(x),
                  prim, dual, comp, mu, delta_last)
        if prim <= opt.tol_constraint and dual <= opt.tol_optimality \
                and comp <= opt.tol_complementarity:
            success, message = True, "converged"
            break
        mu_old = mu
        while mu > opt.mu_min:
            d_mu, p_mu, c_mu = errors(x, y, zl, zu, mu, g, c, J)
            if max(d_mu, p_mu, c_mu) > opt.kappa_eps * mu:
                break
            mu = max(opt.mu_min, min(opt.kappa_mu * mu, mu ** opt.theta_mu))
        if mu != mu_old:
            filt = _Filter(theta_max)
        tau = max(opt.tau_min, 1 - mu)
        sl, su = x[il] - lb[il], ub[iu] - x[iu]
        sigma = np.zeros(n)
        sigma[il] += zl / sl
        sigma[iu] += zu / su
        grad_phi = g.copy()
        grad_phi[il] -= mu / sl
        grad_phi[iu] += mu / su
        H = P.H(x, y)
        r_dual = grad_phi + J.T @ y
        # regularise until the tangential step has positive curvature
        delta, delta_c = 0.0, 0.0
        lu = None
        for _attempt in range(40):
            W = (H + sparse.diags(sigma + delta)).tocsc()
            lower = -delta_c * sparse.identity(m) if delta_c else None
            K = sparse.bmat([[W, J.T], [J, lower]], format="csc")
            try:
                lu = spla.splu(K, permc_spec="COLAMD")
                tang = lu.solve(np.concatenate([-r_dual, np.zeros(m)]))
                nrm = lu.solve(np.concatenate([np.zeros(n), -c]))
                ok = np.all(np.isfinite(tang)) and np.all(np.isfinite(nrm))
            except RuntimeError:
                ok = False
            if not ok:
                lu = None
                delta_c = 1e-8 * mu ** 0.25
                delta = opt.delta_w0 if delta == 0 else 8 * delta
                continue
            t = tang[:n]
            if t @ (W @ t) >= 1e-8 * (t @ t):
                break
            lu = None
            delta = max(opt.delta_w0, delta_last / 3) if delta == 0 else 8 * delta
            if delta > opt.delta_w_max:
                break
        if lu is None:
            message = "could not regularise KKT system"
            break
        delta_last = delta
        step = tang + nrm
        dx, dy = step[:n], step[n:]
        dzl = mu / sl - zl - zl / sl * dx[il]
        dzu = mu / su - zu + zu / su * dx[iu]
        a_max = _max_step(sl, su, dx, il, iu, tau)
        a_z = 1.0
        if len(il):
            a_z = min(a_z, _frac_to_boundary(zl, dzl, tau))
        if len(iu):
            a_z = min(a_z, _frac_to_boundary(zu, dzu, tau))
        # filter line search
        th_k = np.abs(c).sum()
        ph_k = barrier(x, mu)
        gd = grad_phi @ dx
        alpha = a_max
        x_new = None
        armijo_step = False
        soc_done = False
        while alpha >= opt.min_step * max(1.0, a_max):
            xt = x + alpha * dx
            ct = P.c(xt)
            th_t, ph_t = np.abs(ct).sum(), barrier(xt, mu)
            if np.isfinite(ph_t) and th_t <= theta_max and filt.acceptable(th_t, ph_t):
                switching = gd < 0 and alpha * (-gd) ** 2.3 > th_k ** 1.1 and th_k <= theta_min
                if switching:
                    if ph_t <= ph_k + opt.armijo * alpha * gd:
                        x_new, armijo_step = xt, True
                        break
                elif th_t <= (1 - 1e-5) * th_k or ph_t <= ph_k - 1e-5 * th_k:
                    x_new = xt
                    break
            if not soc_done and alpha == a_max and np.isfinite(ph_t) and th_t >= th_k:
                soc_done = True
                dsoc = lu.solve(np.concatenate([-r_dual, -(alpha * c + ct)]))[:n]
                a_soc = _max_step(sl, su, dsoc, il, iu, tau)
                xs = x + a_soc * dsoc
                cs = P.c(xs)
                th_s, ph_s = np.abs(cs).sum(), barrier(xs, mu)
                if np.isfinite(ph_s) and filt.acceptable(th_s, ph_s) and (
                        th_s <= (1 - 1e-5) * th_k or ph_s <= ph_k - 1e-5 * th_k):
                    x_new = xs
                    alpha = a_soc
                    break
            alpha *= 0.5
        if x_new is None:
            if prim <= opt.tol_constraint and dual <= 1e2 * opt.tol_optimality:
                message = "line search stalled near optimum"
                break
            # restoration: minimum-norm Gauss-Newton step on c alone
            x_new = _restore(P, x, lb, ub, il, iu, tau, delta_c or 1e-10)
            if x_new is None:
                message = "line search and restoration failed"
                break
            filt.add(th_k, ph_k)
            alpha = 1.0
            y = np.zeros(m) if not np.all(np.isfinite(y)) else y
        elif not armijo_step:
            filt.add((1 - 1e-5) * th_k, ph_k - 1e-5 * th_k)
        log.debug("   a_max=%.3g alpha=%.3g a_z=%.3g |dx|=%.3g", a_max, alpha, a_z,
                  np.max(np.abs(dx)) if n else 0.0)
        x = x_new
        y = y + alpha * dy
        if len(il):
            zl = zl + a_z * dzl
        if len(iu):
            zu = zu + a_z * dzu
        sl, su = x[il] - lb[il], ub[iu] - x[iu]
        if len(il):
            zl = np.clip(zl, mu / (1e10 * sl), 1e10 * mu / sl)
        if len(iu):
            zu = np.clip(zu, mu / (1e10 * su), 1e10 * mu / su)
    g, c, J = P.g(x), P.c(x), P.J(x).tocsr()
    dual, prim, comp = errors(x, y, zl, zu, 0.0, g, c, J)
    if not success and prim <= opt.tol_constraint and dual <= opt.tol_optimality \
            and comp <= opt.tol_complementarity:
        success, message = True, "converged"
    return NLPResult(x=P.full(x), f=P.f(x), lam=y, constraint_violation=prim, optimality=dual,
                     iterations=it, success=success, message=message, history=history)


def _restore(P, x, lb, ub, il, iu, tau, reg):
    """A few damped Gauss-Newton steps reducing ||c||_1; None if no progress."""
    c = P.c(x)
    th0 = np.abs(c).sum()
    xk = x
    for _ in range(5):
        J = P.J(xk).tocsc()
        JJt = (J @ J.T + reg * sparse.identity(J.shape[0])).tocsc()
        try:
            dx = J.T @ spla.spsolve(JJt, -c)
        except RuntimeError:
            return None
        a = _max_step(xk[il] - lb[il], ub[iu] - xk[iu], dx, il, iu, tau)
        while a > 1e-8:
            cn = P.c(xk + a * dx)
            if np.abs(cn).sum() < np.abs(c).sum():
                break
            a *= 0.5
        else:
            break
        xk, c = xk + a * dx, cn
    return xk if np.abs(c).sum() < 0.9 * th0 else None
