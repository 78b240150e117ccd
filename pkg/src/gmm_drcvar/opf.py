"""Distributionally robust DC-OPF with CVaR constraints, solved by outer cutting planes.

Decision vector x = (p_hat[G], r_up[G], r_dn[G], alpha[G], f_hat[L]).
Random constraints share one affine form: exposure y(x) = Y x + y0 (W-vector)
and threshold h(x) = a . x + h0, enforced as  risk(y(x)) <= h(x).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .case_model import NetworkCase, PtdfSet, build_ptdf
from .qp import QpSolution, QuadraticProgram, solve_qp
from .wccvar import risk_evaluator

log = logging.getLogger(__name__)

BETA_RESERVE = 0.02
BETA_BRANCH = 0.04
TAU_FEAS = 1e-6
MAX_OUTER = 50
DROP_AFTER = 5


class ModelInfeasible(RuntimeError):
    """The dispatch problem (or its master relaxation) has no feasible point."""

    def __init__(self, message, violating=()):
        super().__init__(message)
        self.violating = list(violating)


@dataclass(frozen=True)
class DecisionLayout:
    n_gen: int
    n_line: int

    @property
    def size(self) -> int:
        return 4 * self.n_gen + self.n_line

    def _block(self, k):
        return slice(k * self.n_gen, (k + 1) * self.n_gen)

    @property
    def p(self) -> slice:
        return self._block(0)

    @property
    def r_up(self) -> slice:
        return self._block(1)

    @property
    def r_dn(self) -> slice:
        return self._block(2)

    @property
    def alpha(self) -> slice:
        return self._block(3)

    @property
    def f(self) -> slice:
        return slice(4 * self.n_gen, 4 * self.n_gen + self.n_line)


@dataclass
class RandomConstraintSpec:
    kind: str            # branch_upper | branch_lower | reserve_up | reserve_dn
    source: int          # line index or generator index
    beta: float
    Y: np.ndarray        # (W, n)
    y0: np.ndarray       # (W,)
    a: np.ndarray        # (n,)
    h0: float
    cut_managed: bool = True

    @property
    def name(self) -> str:
        return f"{self.kind}[{self.source}]"

    def exposure(self, x) -> np.ndarray:
        return self.Y @ x + self.y0

    def threshold(self, x) -> float:
        return float(self.a @ x + self.h0)


@dataclass
class SolverConfig:
    beta_reserve: float = BETA_RESERVE
    beta_branch: float = BETA_BRANCH
    tau_feas: float = TAU_FEAS
    max_iter: int = MAX_OUTER
    drop_inactive: bool = False
    linearize: int = 0

    def __post_init__(self):
        for b in (self.beta_reserve, self.beta_branch):
            if not 0 < b < 1:
                raise ValueError("risk levels must lie in (0, 1)")
        if not self.tau_feas > 0:
            raise ValueError("tau_feas must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class DispatchSolution:
    p: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    alpha: np.ndarray
    flows: np.ndarray
    objective: float
    iterations: int = 0
    cuts_added: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.r_up, self.r_dn, self.alpha, self.flows])

    @classmethod
    def from_x(cls, x, layout: DecisionLayout, objective: float, iterations=0, cuts_added=0):
        x = np.asarray(x, dtype=float)
        return cls(x[layout.p].copy(), x[layout.r_up].copy(), x[layout.r_dn].copy(),
                   x[layout.alpha].copy(), x[layout.f].copy(), float(objective), iterations, cuts_added)

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "r_up": self.r_up.tolist(), "r_dn": self.r_dn.tolist(),
                "alpha": self.alpha.tolist(), "flows": self.flows.tolist(),
                "objective": self.objective, "iterations": self.iterations,
                "cuts_added": self.cuts_added}

    @classmethod
    def from_dict(cls, d: dict) -> "DispatchSolution":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("p", "r_up", "r_dn", "alpha", "flows")),
                   float(d["objective"]), int(d.get("iterations", 0)), int(d.get("cuts_added", 0)))


@dataclass
class SolveReport:
    status: str
    records: list = field(default_factory=list)
    cuts_added: int = 0
    wall_time: float = 0.0
    theta_up: Optional[float] = None
    theta_dn: Optional[float] = None
    theta_clamped: list = field(default_factory=list)
    max_violation: float = 0.0
    violating: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"status": self.status, "iterations": self.records, "cuts_added": self.cuts_added,
                "wall_time": self.wall_time, "theta_up": self.theta_up, "theta_dn": self.theta_dn,
                "theta_clamped": self.theta_clamped, "max_violation": self.max_violation,
                "violating": self.violating}


# --------------------------------------------------------------------------
# master problem

def check_structure(case: NetworkCase) -> None:
    net = case.total_demand - case.total_forecast
    lo = sum(g.p_min for g in case.generators)
    hi = sum(g.p_max for g in case.generators)
    if not lo - 1e-9 <= net <= hi + 1e-9:
        raise ModelInfeasible(f"net demand {net:.4f} MW outside generation range [{lo:.4f}, {hi:.4f}] MW")


def build_master(case: NetworkCase, ptdf: PtdfSet, theta_up: Optional[float] = None,
                 theta_dn: Optional[float] = None, nominal_limits: bool = False):
    """Quadratic master problem and its layout.

    Reserve coupling rows alpha_g * theta <= r_g are added when the thetas are
    given; ``nominal_limits`` adds |f_hat| <= f_bar on limited lines.
    """
    check_structure(case)
    gens = case.generators
    ng, nl = len(gens), len(case.branches)
    lay = DecisionLayout(ng, nl)
    n = lay.size
    eye_g = np.eye(ng)

    c2 = np.array([g.cost_c2 for g in gens])
    q = np.zeros(n)
    q[lay.p] = 2.0 * c2
    c = np.zeros(n)
    c[lay.p] = [g.cost_c1 for g in gens]
    c[lay.r_up] = [g.c_up for g in gens]
    c[lay.r_dn] = [g.c_dn for g in gens]
    c0 = float(sum(g.cost_c0 for g in gens))

    # equalities: balance, alpha sum, flow definition
    A = np.zeros((2 + nl, n))
    b = np.zeros(2 + nl)
    A[0, lay.p] = 1.0
    b[0] = case.total_demand - case.total_forecast
    A[1, lay.alpha] = 1.0
    b[1] = 1.0
    A[2:, lay.f] = np.eye(nl)
    A[2:, lay.p] = -ptdf.h_gen
    w_hat = np.array([w.forecast for w in case.wind_farms])
    d = np.array([ld.demand for ld in case.loads])
    b[2:] = (ptdf.h_wind @ w_hat if w_hat.size else 0.0) - (ptdf.h_load @ d if d.size else 0.0)

    rows, rhs = [], []

    def row(entries, value):
        r = np.zeros(n)
        for sl, coef in entries:
            r[sl] += coef
        rows.append(r)
        rhs.append(value)

    for k, g in enumerate(gens):
        pk, uk, dk, ak = (lay.p.start + k, lay.r_up.start + k, lay.r_dn.start + k, lay.alpha.start + k)
        row([(pk, 1.0), (uk, 1.0)], g.p_max)
        row([(pk, -1.0), (dk, 1.0)], -g.p_min)
        if theta_up is not None:
            row([(ak, theta_up), (uk, -1.0)], 0.0)
        if theta_dn is not None:
            row([(ak, theta_dn), (dk, -1.0)], 0.0)
    if nominal_limits:
        for l in case.limited_lines:
            fl = case.branches[l].flow_limit
            row([(lay.f.start + l, 1.0)], fl)
            row([(lay.f.start + l, -1.0)], fl)

    lo = np.full(n, -np.inf)
    up = np.full(n, np.inf)
    lo[lay.r_up] = 0.0
    up[lay.r_up] = [g.r_up_max for g in gens]
    lo[lay.r_dn] = 0.0
    up[lay.r_dn] = [g.r_dn_max for g in gens]
    lo[lay.alpha] = 0.0
    up[lay.alpha] = 1.0
    # finite generation bounds keep the linearized cost mode well defined
    lo[lay.p] = [min(g.p_min, g.p_max) for g in gens]
    up[lay.p] = [g.p_max for g in gens]

    qp = QuadraticProgram(q, c, A, b, np.array(rows).reshape(-1, n), np.array(rhs), lo, up, c0)
    return qp, lay


def reserve_thetas(source, beta_reserve: float, dim: int):
    """Risk of the aggregate shortfall (exposure -1) and surplus (exposure +1).

    Negative values are clamped at zero with a warning; returns
    ``(theta_up, theta_dn, clamped_names)``.
    """
    risk = risk_evaluator(source)
    ones = np.ones(dim)
    vals, _ = risk(np.vstack([-ones, ones]), beta_reserve)
    out, clamped = [], []
    for name, v in zip(("theta_up", "theta_dn"), vals):
        if v < 0:
            warnings.warn(f"{name} = {v:.6g} < 0 clamped to 0")
            clamped.append(name)
            v = 0.0
        out.append(float(v))
    return out[0], out[1], clamped


def assemble_random_constraints(case: NetworkCase, ptdf: PtdfSet, layout: DecisionLayout,
                                config: SolverConfig) -> list:
    """Two branch specs per limited line (cut-managed) and two reserve specs per generator."""
    w = len(case.wind_farms)
    n = layout.size
    specs = []
    for l in case.limited_lines:
        fl = case.branches[l].flow_limit
        Y = np.zeros((w, n))
        Y[:, layout.alpha] = -ptdf.h_gen[l][None, :]
        y0 = ptdf.h_wind[l].copy()
        a = np.zeros(n)
        a[layout.f.start + l] = -1.0
        specs.append(RandomConstraintSpec("branch_upper", l, config.beta_branch, Y, y0, a, fl))
        specs.append(RandomConstraintSpec("branch_lower", l, config.beta_branch, -Y, -y0, -a, fl))
    for g in range(layout.n_gen):
        for kind, sign, blk in (("reserve_up", -1.0, layout.r_up), ("reserve_dn", 1.0, layout.r_dn)):
            Y = np.zeros((w, n))
            Y[:, layout.alpha.start + g] = sign
            a = np.zeros(n)
            a[blk.start + g] = 1.0
            specs.append(RandomConstraintSpec(kind, g, config.beta_reserve, Y, np.zeros(w), a, 0.0,
                                              cut_managed=False))
    return specs


def evaluate_specs(x, specs, source):
    """Risk value, gradient and threshold of each spec at x, grouped by risk level."""
    k = len(specs)
    cvar = np.zeros(k)
    grads = [None] * k
    thr = np.array([s.threshold(x) for s in specs])
    if k == 0:
        return cvar, grads, thr
    risk = risk_evaluator(source)
    betas = sorted({s.beta for s in specs})
    for beta in betas:
        idx = [i for i, s in enumerate(specs) if s.beta == beta]
        Y = np.array([specs[i].exposure(x) for i in idx])
        if Y.shape[1] == 0:
            continue
        v, g = risk(Y, beta)
        for j, i in enumerate(idx):
            cvar[i] = v[j]
            grads[i] = g[j]
    return cvar, grads, thr


def check_feasibility(sol: DispatchSolution, specs, source, config: Optional[SolverConfig] = None) -> dict:
    """Signed slack h_k(x) - risk_k(x) per constraint; negative means violated."""
    tau = (config or SolverConfig()).tau_feas
    cvar, _, thr = evaluate_specs(sol.x, specs, source)
    slack = thr - cvar
    return {"names": [s.name for s in specs], "cvar": cvar.tolist(), "threshold": thr.tolist(),
            "slack": slack.tolist(), "min_slack": float(slack.min(initial=np.inf)),
            "feasible": bool(np.all(slack >= -tau))}


def _cut_row(spec: RandomConstraintSpec, x, cvar: float, grad):
    """Linear row of  cvar + grad.(y(x) - y*) <= h(x)."""
    y_star = spec.exposure(x)
    coef = grad @ spec.Y - spec.a
    rhs = spec.h0 - cvar + grad @ y_star - grad @ spec.y0
    return coef, float(rhs)


def solve_dro_opf(case: NetworkCase, ptdf: Optional[PtdfSet], source, config: Optional[SolverConfig] = None):
    """Outer cutting-plane loop; returns ``(DispatchSolution, SolveReport)``.

    ``source`` selects the risk model: an AmbiguitySet (DG), fixed GmmParams
    (NA), a MomentSet (M), or any object with ``cvar_batch(Y, beta)``.
    Raises ModelInfeasible when the master becomes infeasible.
    """
    config = config or SolverConfig()
    ptdf = ptdf or build_ptdf(case)
    t0 = time.perf_counter()
    w = len(case.wind_farms)
    if w == 0:
        qp, lay = build_master(case, ptdf, nominal_limits=True)
        report = SolveReport("optimal")
        sol = _solve_master(qp, config, [])
        report.records.append({"iter": 1, "objective": sol.objective, "cuts_added": [],
                               "max_violation": 0.0})
        report.wall_time = time.perf_counter() - t0
        return DispatchSolution.from_x(sol.x, lay, sol.objective, 1, 0), report

    th_up, th_dn, clamped = reserve_thetas(source, config.beta_reserve, w)
    base, lay = build_master(case, ptdf, th_up, th_dn)
    specs = [s for s in assemble_random_constraints(case, ptdf, lay, config) if s.cut_managed]
    report = SolveReport("max_iter", theta_up=th_up, theta_dn=th_dn, theta_clamped=clamped)

    cuts = []        # [coef, rhs, spec index, idle count]
    x = None
    objective = np.nan
    for it in range(1, config.max_iter + 1):
        qp = base.copy()
        for cut in cuts:
            qp.add_inequality(cut[0], cut[1])
        sol = _solve_master(qp, config, cuts, specs)
        x, objective = sol.x, sol.objective
        if config.drop_inactive and cuts:
            z = sol.z_in[base.A_in.shape[0]:]
            for cut, zk in zip(cuts, z):
                cut[3] = cut[3] + 1 if zk <= 1e-9 else 0

        cvar, grads, thr = evaluate_specs(x, specs, source)
        viol = cvar - thr
        bad = np.flatnonzero(viol > config.tau_feas)
        added = []
        for k in bad:
            coef, rhs = _cut_row(specs[k], x, cvar[k], grads[k])
            cuts.append([coef, rhs, int(k), 0])
            added.append(specs[k].name)
        report.records.append({"iter": it, "objective": objective, "cuts_added": added,
                               "max_violation": float(viol.max(initial=0.0))})
        report.cuts_added += len(added)
        report.max_violation = float(viol.max(initial=0.0))
        log.info("iteration %d: objective %.6f, %d cuts", it, objective, len(added))
        if not added:
            report.status = "optimal"
            break
        if config.drop_inactive:
            cuts = [cut for cut in cuts if cut[3] < DROP_AFTER]
    report.wall_time = time.perf_counter() - t0
    n_iter = len(report.records)
    return DispatchSolution.from_x(x, lay, objective, n_iter, report.cuts_added), report


def _solve_master(qp: QuadraticProgram, config: SolverConfig, cuts, specs=()) -> QpSolution:
    sol = solve_qp(qp, linearize=config.linearize)
    if sol.status == "infeasible":
        names = sorted({specs[c[2]].name for c in cuts}) if specs else []
        raise ModelInfeasible("DR-infeasible: master problem infeasible", names)
    if sol.status != "optimal":
        raise ArithmeticError(f"master problem solve ended with status {sol.status}")
    return sol


def solve_deterministic(case: NetworkCase, ptdf: Optional[PtdfSet] = None, config=None):
    """Dispatch that ignores forecast errors: nominal flow limits, no reserve requirement."""
    config = config or SolverConfig()
    ptdf = ptdf or build_ptdf(case)
    t0 = time.perf_counter()
    qp, lay = build_master(case, ptdf, nominal_limits=True)
    sol = _solve_master(qp, config, [])
    report = SolveReport("optimal", [{"iter": 1, "objective": sol.objective, "cuts_added": [],
                                      "max_violation": 0.0}], wall_time=time.perf_counter() - t0)
    return DispatchSolution.from_x(sol.x, lay, sol.objective, 1, 0), report
