"""Dense convex QP solver for the dispatch master problem.

    minimize    1/2 x' diag(q) x + c' x + c0
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lo <= x <= up

Primal-dual interior point (Mehrotra predictor-corrector) on the slack form,
followed by an active-set polish that re-solves the KKT system on the
identified active rows, and optionally a purification pass that walks along
flat directions of the optimal face to a basic solution. Infeasibility and
unboundedness are diagnosed with two auxiliary LPs that are always feasible
and bounded.

Duals use the Lagrangian  f(x) + y'(A_eq x - b_eq) + z'(A_in x - b_in), z >= 0.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)

MAX_ITER = 200
IPM_TOL = 1e-10
KKT_TOL = 1e-8
_REG_PRIMAL = 1e-11
_REG_DUAL = 1e-11


class QpNumericalError(ArithmeticError):
    """KKT factorization broke down."""


@dataclass
class QuadraticProgram:
    q: np.ndarray
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    up: Optional[np.ndarray] = None
    c0: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.q = np.broadcast_to(np.asarray(self.q, dtype=float), (n,)).copy()
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, float).reshape(-1, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).reshape(-1)
        self.A_in = np.zeros((0, n)) if self.A_in is None else np.asarray(self.A_in, float).reshape(-1, n)
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, float).reshape(-1)
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, float).reshape(-1).copy()
        self.up = np.full(n, np.inf) if self.up is None else np.asarray(self.up, float).reshape(-1).copy()
        if self.A_eq.shape[0] != self.b_eq.size or self.A_in.shape[0] != self.b_in.size:
            raise ValueError("constraint matrix and right-hand side sizes differ")
        if self.lo.size != n or self.up.size != n:
            raise ValueError("bound vectors have the wrong length")
        if np.any(self.q < 0):
            raise ValueError("quadratic diagonal must be nonnegative")
        if np.any(self.lo > self.up):
            raise ValueError("lower bound above upper bound")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.q * x) + self.c @ x + self.c0)

    def add_inequality(self, row, rhs: float) -> None:
        self.A_in = np.vstack([self.A_in, np.asarray(row, float).reshape(1, -1)])
        self.b_in = np.append(self.b_in, float(rhs))

    def copy(self) -> "QuadraticProgram":
        return QuadraticProgram(self.q.copy(), self.c.copy(), self.A_eq.copy(), self.b_eq.copy(),
                                self.A_in.copy(), self.b_in.copy(), self.lo.copy(), self.up.copy(),
                                self.c0)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    y_eq: np.ndarray
    z_in: np.ndarray
    z_lo: np.ndarray
    z_up: np.ndarray
    status: str
    iterations: int = 0
    residuals: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# --------------------------------------------------------------------------
# standard form: all inequalities in one block G x <= h, fixed vars as equalities

@dataclass
class _Std:
    q: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    n_in: int
    lo_idx: np.ndarray
    up_idx: np.ndarray
    n_eq: int
    fix_idx: np.ndarray


def _standardize(p: QuadraticProgram) -> _Std:
    n = p.n
    fixed = np.isfinite(p.lo) & (p.lo == p.up)
    fix_idx = np.flatnonzero(fixed)
    lo_idx = np.flatnonzero(np.isfinite(p.lo) & ~fixed)
    up_idx = np.flatnonzero(np.isfinite(p.up) & ~fixed)
    eye = np.eye(n)
    A = np.vstack([p.A_eq, eye[fix_idx]])
    b = np.concatenate([p.b_eq, p.lo[fix_idx]])
    G = np.vstack([p.A_in, -eye[lo_idx], eye[up_idx]])
    h = np.concatenate([p.b_in, -p.lo[lo_idx], p.up[up_idx]])
    return _Std(p.q, p.c, A, b, G, h, p.A_in.shape[0], lo_idx, up_idx, p.A_eq.shape[0], fix_idx)


def _row_scale(M):
    norms = np.abs(M).max(axis=1) if M.size else np.zeros(M.shape[0])
    return np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)


# --------------------------------------------------------------------------
# linear algebra

def _factor(K):
    with warnings.catch_warnings():
        # a zero pivot is reported below with its index
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(K, check_finite=False)
    d = np.abs(np.diag(lu))
    k = int(np.argmin(d))
    if not np.all(np.isfinite(lu)) or d[k] == 0.0:
        raise QpNumericalError(f"KKT factorization broke down at pivot {k} (|u_kk| = {d[k]:.3e})")
    return lu, piv


def _solve_refined(K_reg_f, K_true, rhs, steps=3):
    sol = sla.lu_solve(K_reg_f, rhs, check_finite=False)
    for _ in range(steps):
        r = rhs - K_true @ sol
        if np.abs(r).max(initial=0.0) <= 1e-15 * (1 + np.abs(rhs).max(initial=0.0)):
            break
        sol = sol + sla.lu_solve(K_reg_f, r, check_finite=False)
    return sol


# --------------------------------------------------------------------------
# interior point

@dataclass
class _Iterate:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    iterations: int
    converged: bool
    diverged: bool = False


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(q, c, A, b, G, h, max_iter=MAX_ITER, tol=IPM_TOL) -> _Iterate:
    n, me, mi = c.size, b.size, h.size
    Q = np.diag(q)
    # starting point: least-squares fit of the equality and inequality rows
    K0 = np.block([[Q + G.T @ G + np.eye(n), A.T], [A, -1e-8 * np.eye(me)]])
    try:
        x = np.linalg.solve(K0, np.concatenate([-c + G.T @ h, b]))[:n]
    except np.linalg.LinAlgError:
        x = np.zeros(n)
    y = np.zeros(me)
    r = h - G @ x
    s = np.maximum(r, 1.0)
    z = np.ones(mi)

    scale_c = 1.0 + np.abs(c).max(initial=0.0)
    scale_b = 1.0 + np.abs(b).max(initial=0.0)
    scale_h = 1.0 + np.abs(h).max(initial=0.0)
    big = 1e12 * max(scale_c, scale_b, scale_h)

    for it in range(1, max_iter + 1):
        rd = q * x + c + A.T @ y + G.T @ z
        re = A @ x - b
        ri = G @ x + s - h
        mu = float(s @ z) / mi if mi else 0.0
        pobj = 0.5 * x @ (q * x) + c @ x
        if (np.abs(rd).max(initial=0) <= tol * scale_c and np.abs(re).max(initial=0) <= tol * scale_b
                and np.abs(ri).max(initial=0) <= tol * scale_h and mu <= tol * (1 + abs(pobj)) / max(mi, 1)):
            return _Iterate(x, y, z, s, it - 1, True)
        if max(np.abs(x).max(initial=0), np.abs(z).max(initial=0), np.abs(y).max(initial=0)) > big:
            return _Iterate(x, y, z, s, it - 1, False, diverged=True)

        # unreduced quasi-definite Newton system in (dx, dy, dz)
        K = np.block([[Q, A.T, G.T],
                      [A, np.zeros((me, me)), np.zeros((me, mi))],
                      [G, np.zeros((mi, me)), -np.diag(s / z)]])
        reg = np.concatenate([np.full(n, _REG_PRIMAL), np.full(me, -_REG_DUAL), np.zeros(mi)])
        f = _factor(K + np.diag(reg))

        def direction(rsz):
            rhs = np.concatenate([-rd, -re, rsz / z - ri])
            sol = _solve_refined(f, K, rhs)
            dx, dy, dz = sol[:n], sol[n:n + me], sol[n + me:]
            ds = -ri - G @ dx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / mi if mi else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise QpNumericalError(f"non-finite iterate at IPM iteration {it}")
    return _Iterate(x, y, z, s, max_iter, False)


# --------------------------------------------------------------------------
# polish and purification

def _residuals(q, c, A, b, G, h, x, y, z):
    slack = h - G @ x
    return {
        "primal_eq": float(np.abs(A @ x - b).max(initial=0.0)),
        "primal_in": float(np.maximum(-slack, 0).max(initial=0.0)),
        "dual": float(np.abs(q * x + c + A.T @ y + G.T @ z).max(initial=0.0)),
        "dual_sign": float(np.maximum(-z, 0).max(initial=0.0)),
        "complementarity": float(np.abs(z * slack).max(initial=0.0)),
    }


def _merit(res, c, b, h):
    return max(res["primal_eq"] / (1 + np.abs(b).max(initial=0)),
               res["primal_in"] / (1 + np.abs(h).max(initial=0)),
               res["dual"] / (1 + np.abs(c).max(initial=0)),
               res["dual_sign"], res["complementarity"])


def _polish(q, c, A, b, G, h, x, y, z, s):
    active = z > s
    Ga, ha = G[active], h[active]
    n, me, ma = c.size, b.size, int(active.sum())
    Kt = np.block([[np.diag(q), A.T, Ga.T],
                   [A, np.zeros((me, me)), np.zeros((me, ma))],
                   [Ga, np.zeros((ma, me)), np.zeros((ma, ma))]])
    reg = np.concatenate([np.full(n, 1e-9), np.full(me + ma, -1e-9)])
    try:
        f = _factor(Kt + np.diag(reg))
    except QpNumericalError:
        return None
    sol = _solve_refined(f, Kt, np.concatenate([-c, b, ha]), steps=20)
    xp, yp = sol[:n], sol[n:n + me]
    zp = np.zeros_like(z)
    zp[active] = sol[n + me:]
    if np.any(zp < 0):
        # dependent active rows leave the multipliers non-unique; pick a sign-feasible set
        M = np.hstack([A.T, Ga.T])
        lb = np.concatenate([np.full(me, -np.inf), np.zeros(ma)])
        fit = lsq_linear(M, -(q * xp + c), bounds=(lb, np.inf), method="bvls", tol=1e-14)
        yp = fit.x[:me]
        zp[active] = fit.x[me:]
    return xp, yp, zp


def _purify(q, A, G, h, x, z, tol=1e-9):
    """Walk along flat directions of the optimal face until a basic solution is reached.

    A direction d keeps the objective and all duals valid when d_i = 0 for
    curved variables, A d = 0 and G_a d = 0 on active rows. Among such
    directions the projection of e_i for the smallest usable index i is
    followed, which raises earlier variables first.
    """
    n = x.size
    hscale = 1.0 + np.abs(h)
    for _ in range(n + 1):
        slack = h - G @ x
        active = slack <= tol * hscale
        M = np.vstack([np.eye(n)[q > 0], A, G[active]])
        if M.shape[0]:
            _, sv, vt = np.linalg.svd(M)
            rank = int((sv > 1e-9 * max(sv[0], 1.0)).sum())
            N = vt[rank:].T
        else:
            N = np.eye(n)
        if N.shape[1] == 0:
            return x
        P = N @ N.T
        moved = False
        for i in range(n):
            d = P[:, i]
            if d[i] <= 1e-9:
                continue
            d = d / np.abs(d).max()
            for sign in (1.0, -1.0):
                gd = sign * (G @ d)
                pos = gd > 1e-12
                if not pos.any():
                    continue
                t = float(np.min(np.maximum(slack[pos], 0.0) / gd[pos]))
                x = x + sign * t * d
                moved = True
                break
            if moved:
                break
        if not moved:
            return x
    return x


def _snap(x, lo, up, rtol=1e-12):
    """Move values within roundoff of a finite bound onto it."""
    x = x.copy()
    for bound in (lo, up):
        fin = np.isfinite(bound)
        close = fin & (np.abs(x - np.where(fin, bound, 0.0)) <= rtol * (1.0 + np.abs(np.where(fin, bound, 0.0))))
        x[close] = bound[close]
    return x


# --------------------------------------------------------------------------
# diagnosis of failures

def _phase_one(A, b, G, h) -> float:
    """min 1'u + 1'v + t  s.t.  A x + u - v = b,  G x - t <= h,  u, v, t >= 0."""
    n, me, mi = G.shape[1] if G.size else A.shape[1], b.size, h.size
    nv = n + 2 * me + 1
    c = np.concatenate([np.zeros(n), np.ones(2 * me), [1.0]])
    Ae = np.hstack([A, np.eye(me), -np.eye(me), np.zeros((me, 1))])
    Gi = np.hstack([G, np.zeros((mi, 2 * me)), -np.ones((mi, 1))])
    Gn = np.hstack([np.zeros((2 * me + 1, n)), -np.eye(2 * me + 1)])
    Gall = np.vstack([Gi, Gn])
    hall = np.concatenate([h, np.zeros(2 * me + 1)])
    it = _ipm(np.zeros(nv), c, Ae, b, Gall, hall, tol=1e-9)
    return float(c @ it.x)


def _recession(q, c, A, G) -> float:
    """min c'd over recession directions with flat curvature, boxed to [-1, 1]."""
    n = c.size
    eye = np.eye(n)
    Ae = np.vstack([A, eye[q > 0]])
    Gall = np.vstack([G, eye, -eye])
    hall = np.concatenate([np.zeros(G.shape[0]), np.ones(2 * n)])
    it = _ipm(np.zeros(n), c, Ae, np.zeros(Ae.shape[0]), Gall, hall, tol=1e-9)
    return float(c @ it.x)


# --------------------------------------------------------------------------
# linearized cost mode

def linearize_cost(p: QuadraticProgram, segments: int) -> tuple[QuadraticProgram, np.ndarray]:
    """Replace each curved term 1/2 q_i x_i^2 by its k-segment secant interpolant on [lo_i, up_i].

    Returns the LP in (x, e) where e_i is the epigraph variable of term i, and
    the indices of the curved variables.
    """
    if segments < 1:
        raise ValueError("segments must be positive")
    curved = np.flatnonzero(p.q > 0)
    if np.any(~np.isfinite(p.lo[curved]) | ~np.isfinite(p.up[curved])):
        raise ValueError("linearization needs finite bounds on curved variables")
    n, k = p.n, curved.size
    c = np.concatenate([p.c, np.ones(k)])
    rows, rhs = [], []
    for j, i in enumerate(curved):
        pts = np.linspace(p.lo[i], p.up[i], segments + 1)
        vals = 0.5 * p.q[i] * pts ** 2
        for a, b_, fa, fb in zip(pts[:-1], pts[1:], vals[:-1], vals[1:]):
            slope = (fb - fa) / (b_ - a) if b_ > a else p.q[i] * a
            row = np.zeros(n + k)
            row[i] = slope
            row[n + j] = -1.0
            rows.append(row)
            rhs.append(slope * a - fa)
    pad = lambda M: np.hstack([M, np.zeros((M.shape[0], k))])
    A_in = np.vstack([pad(p.A_in)] + ([np.array(rows)] if rows else []))
    b_in = np.concatenate([p.b_in, rhs])
    lp = QuadraticProgram(np.zeros(n + k), c, pad(p.A_eq), p.b_eq, A_in, b_in,
                          np.concatenate([p.lo, np.full(k, -np.inf)]),
                          np.concatenate([p.up, np.full(k, np.inf)]), p.c0)
    return lp, curved


# --------------------------------------------------------------------------

def solve_qp(p: QuadraticProgram, *, max_iter: int = MAX_ITER, purify: bool = True,
             linearize: int = 0) -> QpSolution:
    """Solve ``p``; statuses: optimal, infeasible, unbounded, max_iter.

    ``linearize=k`` solves the k-segment piecewise-linear cost model instead
    and reports its objective.
    """
    if linearize:
        lp, _ = linearize_cost(p, linearize)
        sol = solve_qp(lp, max_iter=max_iter, purify=purify)
        n = p.n
        return QpSolution(sol.x[:n], sol.objective, sol.y_eq[:p.A_eq.shape[0]], sol.z_in[:p.A_in.shape[0]],
                          sol.z_lo[:n], sol.z_up[:n], sol.status, sol.iterations, sol.residuals)

    st = _standardize(p)
    n = p.n
    # row scaling for conditioning; duals are mapped back afterwards
    ra, rg = _row_scale(st.A), _row_scale(st.G)
    A, b = st.A * ra[:, None], st.b * ra
    G, h = st.G * rg[:, None], st.h * rg
    q, c = st.q, st.c

    it = _ipm(q, c, A, b, G, h, max_iter=max_iter)
    x, y, z, s = it.x, it.y, it.z, it.s

    if it.converged:
        res = _residuals(q, c, A, b, G, h, x, y, z)
        pol = _polish(q, c, A, b, G, h, x, y, z, s)
        if pol is not None:
            pres = _residuals(q, c, A, b, G, h, *pol)
            if _merit(pres, c, b, h) <= _merit(res, c, b, h):
                x, y, z = pol
                res = pres
        if purify:
            x = _purify(q, A, G, h, x, z)
        x = _snap(x, p.lo, p.up)
        status = "optimal"
    else:
        status = _diagnose(q, c, A, b, G, h, it)

    # unscale duals and split them per block
    y_full = y * ra
    z_full = z * rg
    y_eq = y_full[:st.n_eq]
    # fixed variables: their equality multipliers become bound multipliers
    z_lo, z_up = np.zeros(n), np.zeros(n)
    yf = y_full[st.n_eq:]
    z_lo[st.fix_idx] = np.maximum(-yf, 0)
    z_up[st.fix_idx] = np.maximum(yf, 0)
    z_in = z_full[:st.n_in]
    z_lo[st.lo_idx] = z_full[st.n_in:st.n_in + st.lo_idx.size]
    z_up[st.up_idx] = z_full[st.n_in + st.lo_idx.size:]
    residuals = _residuals(st.q, st.c, st.A, st.b, st.G, st.h, x, y_full, z_full)

    if status == "optimal" and not kkt_ok(residuals, st.c, st.b, st.h):
        log.warning("QP KKT residuals above tolerance: %s", residuals)
    return QpSolution(x, p.objective(x), y_eq, z_in, z_lo, z_up, status, it.iterations, residuals)


def kkt_ok(res: dict, c, b, h, tol: float = KKT_TOL) -> bool:
    bnorm = max(np.abs(b).max(initial=0.0), np.abs(h).max(initial=0.0))
    return (max(res["primal_eq"], res["primal_in"]) <= tol * (1 + bnorm)
            and res["dual"] <= tol * (1 + np.abs(c).max(initial=0.0))
            and res["dual_sign"] <= tol and res["complementarity"] <= tol)


def _diagnose(q, c, A, b, G, h, it: _Iterate) -> str:
    scale = 1.0 + max(np.abs(b).max(initial=0), np.abs(h).max(initial=0))
    try:
        if _phase_one(A, b, G, h) > 1e-7 * scale:
            return "infeasible"
        if _recession(q, c, A, G) < -1e-7 * (1 + np.abs(c).max(initial=0)):
            return "unbounded"
    except QpNumericalError:
        pass
    return "max_iter"
