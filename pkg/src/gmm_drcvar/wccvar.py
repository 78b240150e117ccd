"""Worst-case CVaR of a linear exposure y^T xi over a GMM ambiguity set.

For a fixed exposure ``y`` the worst-case mixture is found in closed form per
component (mean on the ellipsoid boundary, covariance inflated along ``y``),
then the mixing weights and the VaR are found jointly by bisection on the
convex one-dimensional function

    T(t) = t + (1/beta) * max_{pi in C} sum_m pi_m Q_m(t),

where Q_m(t) = E[(Z_m - t)^+] for Z_m ~ N(mu_bar_m, sigma_bar_m^2). The value
and gradient at ``y`` give a supporting cutting plane of the worst-case CVaR.
All batch routines accept a (K, W) stack of exposures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .ambiguity import AmbiguitySet, CovRegion, MeanRegion, WeightRegion
from .gmm import GmmParams

SIGMA_FLOOR = 1e-12
BISECT_TOL = 1e-5
MAX_EXPANSIONS = 60
_ZERO_Y = 1e-15
_GRAD_SLACK = 1e-12  # rounding noise in the subgradient at a bracket endpoint
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class BracketError(RuntimeError):
    pass


def norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


def norm_cdf(z):
    return ndtr(z)


def norm_ppf(p):
    return ndtri(p)


@dataclass
class ComponentStats:
    mu_bar: float
    sigma_bar: float

    def __post_init__(self):
        self.sigma_bar = max(float(self.sigma_bar), 0.0)


@dataclass
class WcCvarResult:
    cvar: float
    var: float
    worst_weights: np.ndarray
    worst_means: np.ndarray
    worst_covs: np.ndarray
    component_stats: list
    gradient: np.ndarray
    beta: float
    bracket: float = 0.0

    def to_dict(self) -> dict:
        return {"cvar": self.cvar, "var": self.var, "beta": self.beta,
                "worst_weights": self.worst_weights.tolist(),
                "worst_means": self.worst_means.tolist(),
                "worst_covs": self.worst_covs.tolist(),
                "component_stats": [[s.mu_bar, s.sigma_bar] for s in self.component_stats],
                "gradient": self.gradient.tolist()}


# --------------------------------------------------------------------------
# pieces

def _q(t, mu, sig):
    """Elementwise E[(Z - t)^+], Z ~ N(mu, sig^2); deterministic branch below the floor."""
    t, mu, sig = np.broadcast_arrays(np.asarray(t, float), np.asarray(mu, float), np.asarray(sig, float))
    out = np.array(np.maximum(mu - t, 0.0))
    ok = sig >= SIGMA_FLOOR
    if np.any(ok):
        z = (t[ok] - mu[ok]) / sig[ok]
        out[ok] = sig[ok] * norm_pdf(z) + (mu[ok] - t[ok]) * ndtr(-z)
    return out


def _cdf(t, mu, sig):
    t, mu, sig = np.broadcast_arrays(np.asarray(t, float), np.asarray(mu, float), np.asarray(sig, float))
    out = np.array(t >= mu, dtype=float)
    ok = sig >= SIGMA_FLOOR
    if np.any(ok):
        out[ok] = ndtr((t[ok] - mu[ok]) / sig[ok])
    return out


def _density(t, mu, sig):
    t, mu, sig = np.broadcast_arrays(np.asarray(t, float), np.asarray(mu, float), np.asarray(sig, float))
    out = np.zeros(t.shape)
    ok = sig >= SIGMA_FLOOR
    if np.any(ok):
        out[ok] = norm_pdf((t[ok] - mu[ok]) / sig[ok]) / sig[ok]
    return out


def q_m(t: float, stats: ComponentStats) -> float:
    """Expected excess E[(Z - t)^+] of a normal component (MW)."""
    return float(_q(t, stats.mu_bar, stats.sigma_bar))


def worst_mean(y, region: MeanRegion):
    """Maximiser of y^T mu over the mean ellipsoid, and the attained y^T mu."""
    y = np.asarray(y, dtype=float)
    ly = region.shape @ y
    yly = float(y @ ly)
    if region.radius <= 0 or yly <= 0:
        mu = region.center.copy()
    else:
        mu = region.center + math.sqrt(region.radius / yly) * ly
    return mu, float(y @ mu)


def worst_cov(y, region: CovRegion):
    """Maximiser of y^T Sigma y over the Frobenius ball, and the attained standard deviation."""
    y = np.asarray(y, dtype=float)
    yy = float(y @ y)
    if yy == 0:
        raise ValueError("zero exposure has no worst-case covariance direction")
    cov = region.center + region.radius * np.outer(y, y) / yy
    return cov, math.sqrt(max(float(y @ region.center @ y) + region.radius * yy, 0.0))


def _sort_weights(lower, upper, scores):
    """Greedy maximiser of pi . scores over the box-constrained simplex; rows independent."""
    scores = np.asarray(scores, dtype=float)
    lower = np.broadcast_to(lower, scores.shape)
    cap = np.broadcast_to(upper, scores.shape) - lower
    order = np.argsort(-scores, axis=-1, kind="stable")
    cap_sorted = np.take_along_axis(cap, order, axis=-1)
    remaining = 1.0 - lower.sum(axis=-1, keepdims=True)
    before = np.cumsum(cap_sorted, axis=-1) - cap_sorted
    add_sorted = np.clip(remaining - before, 0.0, cap_sorted)
    add = np.empty_like(add_sorted)
    np.put_along_axis(add, order, add_sorted, axis=-1)
    return lower + add


def sort_weights(region: WeightRegion, scores) -> np.ndarray:
    """Weights in the credible region maximising sum_m pi_m * scores_m (ties by index)."""
    return _sort_weights(region.lower, region.upper, scores)


def _t_gradient(t, pi, mu, sig, beta):
    return 1.0 - 1.0 / beta + (pi * _cdf(t[:, None], mu, sig)).sum(axis=1) / beta


def _scalar_stats(t, mu, sig):
    """(Q_m(t), Phi_m(t)) for one component using the math module."""
    if sig < SIGMA_FLOOR:
        return max(mu - t, 0.0), float(t >= mu)
    z = (t - mu) / sig
    upper_tail = 0.5 * math.erfc(z / math.sqrt(2.0))
    return sig * _INV_SQRT_2PI * math.exp(-0.5 * z * z) + (mu - t) * upper_tail, 1.0 - upper_tail


def _scalar_weights(lower, upper, q):
    pi = list(lower)
    remaining = 1.0 - sum(lower)
    for i in sorted(range(len(q)), key=lambda i: -q[i]):
        add = min(max(remaining, 0.0), upper[i] - lower[i])
        pi[i] += add
        remaining -= add
    return pi


def _bisect_one(mu, sig, lower, upper, beta, tol):
    """Single-exposure bisection in pure Python floats (fast path for one row)."""
    m = len(mu)
    z = float(norm_ppf(1.0 - beta))
    checks = [mu[i] + z * sig[i] for i in range(m)]
    lo, hi = min(checks), max(checks)

    def step(t):
        qs, cdf = zip(*(_scalar_stats(t, mu[i], sig[i]) for i in range(m)))
        pi = _scalar_weights(lower, upper, qs)
        g = 1.0 - 1.0 / beta + sum(p * c for p, c in zip(pi, cdf)) / beta
        return pi, g

    for _ in range(MAX_EXPANSIONS):
        bad_lo = step(lo)[1] > _GRAD_SLACK
        bad_hi = step(hi)[1] < -_GRAD_SLACK
        if not (bad_lo or bad_hi):
            break
        width = max(hi - lo, 1.0)
        lo, hi = (lo - width if bad_lo else lo), (hi + width if bad_hi else hi)
    else:
        raise BracketError("bracket failure")

    t = 0.5 * (lo + hi)
    pi = step(t)[0]
    while hi - lo > tol:
        t = 0.5 * (lo + hi)
        pi, g = step(t)
        if g < 0:
            lo = t
        else:
            hi = t
    return pi, t, lo, hi


def _bisect(mu, sig, lower, upper, beta, tol=BISECT_TOL):
    """Row-wise bisection for the worst-case VaR; mu, sig are (K, M)."""
    if mu.shape[0] == 1:
        pi, t, lo, hi = _bisect_one(mu[0].tolist(), sig[0].tolist(), np.asarray(lower, float).tolist(),
                                    np.asarray(upper, float).tolist(), beta, tol)
        return _polish(np.array([pi]), np.array([t]), np.array([lo]), np.array([hi]),
                       mu, sig, lower, upper, beta)
    z = norm_ppf(1.0 - beta)
    t_check = mu + z * sig
    lo = t_check.min(axis=1)
    hi = t_check.max(axis=1)

    def weights_at(t):
        return _sort_weights(lower, upper, _q(t[:, None], mu, sig))

    # the minimiser is provably inside [lo, hi]; expand only if the subgradient disagrees
    for _ in range(MAX_EXPANSIONS):
        g_lo = _t_gradient(lo, weights_at(lo), mu, sig, beta)
        g_hi = _t_gradient(hi, weights_at(hi), mu, sig, beta)
        bad_lo = g_lo > _GRAD_SLACK
        bad_hi = g_hi < -_GRAD_SLACK
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.maximum(hi - lo, 1.0)
        lo = np.where(bad_lo, lo - width, lo)
        hi = np.where(bad_hi, hi + width, hi)
    else:
        raise BracketError("bracket failure")

    t = 0.5 * (lo + hi)
    pi = weights_at(t)
    active = hi - lo > tol
    while active.any():
        idx = np.flatnonzero(active)
        t_mid = 0.5 * (lo[idx] + hi[idx])
        pi_mid = _sort_weights(lower, upper, _q(t_mid[:, None], mu[idx], sig[idx]))
        g = _t_gradient(t_mid, pi_mid, mu[idx], sig[idx], beta)
        t[idx] = t_mid
        pi[idx] = pi_mid
        neg = g < 0
        lo[idx[neg]] = t_mid[neg]
        hi[idx[~neg]] = t_mid[~neg]
        active = hi - lo > tol
    return _polish(pi, t, lo, hi, mu, sig, lower, upper, beta)


def _polish(pi, t, lo, hi, mu, sig, lower, upper, beta, steps=3):
    """Newton steps on sum_m pi_m Phi_m(t) = 1 - beta inside the final bracket.

    The bisection midpoint is only 1e-5 accurate, which leaves a first-order
    error in the tangent gradient. Steps leaving [lo, hi] are rejected, so the
    returned t still lies in the bisection bracket.
    """
    for _ in range(steps):
        f = (pi * _cdf(t[:, None], mu, sig)).sum(axis=1) - (1.0 - beta)
        fp = (pi * _density(t[:, None], mu, sig)).sum(axis=1)
        t_new = t - f / np.where(fp > 0, fp, np.inf)
        edge = 1e-12 * (1.0 + np.abs(t))
        ok = (fp > 0) & (t_new >= lo - edge) & (t_new <= hi + edge)
        if not ok.any():
            break
        t = np.where(ok, t_new, t)
        pi = np.where(ok[:, None], _sort_weights(lower, upper, _q(t[:, None], mu, sig)), pi)
    # a component below the sigma floor puts a kink in T at its mean; Newton cannot
    # reach it, so try each such mean lying in the bracket as a candidate minimiser
    for r in np.flatnonzero((sig < SIGMA_FLOOR).any(axis=1)):
        cand = [t[r]] + [v for v, sd in zip(mu[r], sig[r]) if sd < SIGMA_FLOOR and lo[r] <= v <= hi[r]]
        cand = np.array(cand)
        q = _q(cand[:, None], mu[r][None], sig[r][None])
        w = _sort_weights(lower, upper, q)
        k = int(np.argmin(cand + (w * q).sum(axis=1) / beta))
        t[r], pi[r] = cand[k], w[k]
    return pi, t, hi - lo


def bisect_var(stats, region: WeightRegion, beta: float, tol: float = BISECT_TOL):
    """Worst-case weights and VaR for given per-component worst-case stats.

    Returns ``(weights, var, bracket_width)``.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    mu = np.array([[s.mu_bar for s in stats]])
    sig = np.array([[s.sigma_bar for s in stats]])
    pi, t, width = _bisect(mu, sig, region.lower, region.upper, beta, tol)
    return pi[0], float(t[0]), float(width[0])


def t_objective(t, stats, region: WeightRegion, beta: float):
    """T(t) evaluated pointwise (array ``t``), with the inner weight maximisation."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mu = np.array([s.mu_bar for s in stats])
    sig = np.array([s.sigma_bar for s in stats])
    q = _q(t[:, None], mu[None], sig[None])
    pi = _sort_weights(region.lower, region.upper, q)
    return t + (pi * q).sum(axis=1) / beta


# --------------------------------------------------------------------------
# batched evaluation

def _region_arrays(amb: AmbiguitySet):
    centers = np.array([r.center for r in amb.mean_regions])       # (M, W)
    shapes = np.array([r.shape for r in amb.mean_regions])          # (M, W, W)
    g_mu = np.array([r.radius for r in amb.mean_regions])           # (M,)
    sig_c = np.array([r.center for r in amb.cov_regions])           # (M, W, W)
    g_sig = np.array([r.radius for r in amb.cov_regions])           # (M,)
    return centers, shapes, g_mu, sig_c, g_sig


def wc_cvar_batch(Y, amb: AmbiguitySet, beta: float, tol: float = BISECT_TOL):
    """Worst-case CVaR, VaR, weights and gradient for each row of ``Y``.

    Returns a dict of arrays: ``cvar`` (K,), ``var`` (K,), ``weights`` (K, M),
    ``mu_bar`` and ``sigma_bar`` (K, M), ``gradient`` (K, W), ``bracket`` (K,).
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    k, w = Y.shape
    m = amb.n_components
    centers, shapes, g_mu, sig_c, g_sig = _region_arrays(amb)
    lower, upper = amb.weight_region.lower, amb.weight_region.upper

    out = {"cvar": np.zeros(k), "var": np.zeros(k), "gradient": np.zeros((k, w)),
           "mu_bar": np.zeros((k, m)), "sigma_bar": np.zeros((k, m)),
           "bracket": np.zeros(k),
           "weights": np.tile(_sort_weights(lower, upper, np.zeros(m)), (k, 1))}
    nz = np.flatnonzero(np.abs(Y).max(axis=1) > _ZERO_Y) if k else np.array([], int)
    if nz.size == 0:
        return out
    y = Y[nz]

    ly = np.einsum("mij,kj->kmi", shapes, y)                      # Lambda_m y
    yly = np.einsum("ki,kmi->km", y, ly)
    scale = np.where((g_mu[None] > 0) & (yly > 0), np.sqrt(g_mu[None] / np.where(yly > 0, yly, 1.0)), 0.0)
    mu_wc = centers[None] + scale[..., None] * ly                  # (K, M, W)
    mu_bar = np.einsum("ki,kmi->km", y, mu_wc)

    sy = np.einsum("mij,kj->kmi", sig_c, y)                        # Sigma_hat_m y
    sig_y = sy + g_sig[None, :, None] * y[:, None, :]              # Sigma_wc y
    sig_bar = np.sqrt(np.maximum(np.einsum("ki,kmi->km", y, sig_y), 0.0))

    pi, t, width = _bisect(mu_bar, sig_bar, lower, upper, beta, tol)
    q = _q(t[:, None], mu_bar, sig_bar)
    cvar = t + (pi * q).sum(axis=1) / beta

    tail = 1.0 - _cdf(t[:, None], mu_bar, sig_bar)
    dens = _density(t[:, None], mu_bar, sig_bar)
    grad = np.einsum("km,kmi->ki", pi * tail, mu_wc) + np.einsum("km,kmi->ki", pi * dens, sig_y)
    grad /= beta

    out["cvar"][nz] = cvar
    out["var"][nz] = t
    out["weights"][nz] = pi
    out["mu_bar"][nz] = mu_bar
    out["sigma_bar"][nz] = sig_bar
    out["gradient"][nz] = grad
    out["bracket"][nz] = width
    out["_mu_wc"] = (nz, mu_wc)
    return out


def wc_cvar(y, amb: AmbiguitySet, beta: float, tol: float = BISECT_TOL) -> WcCvarResult:
    """Worst-case CVaR_{1-beta}(y^T xi) over ``amb`` with worst-case distribution and gradient.

    A zero exposure returns cvar = var = 0 and a zero gradient.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != amb.dim:
        raise ValueError(f"exposure length {y.size} != ambiguity dimension {amb.dim}")
    res = wc_cvar_batch(y[None], amb, beta, tol)
    m, w = amb.n_components, amb.dim
    if np.abs(y).max(initial=0.0) <= _ZERO_Y:
        means = np.array([r.center for r in amb.mean_regions])
        covs = np.array([r.center for r in amb.cov_regions])
    else:
        means = res["_mu_wc"][1][0]
        yy = float(y @ y)
        covs = np.array([r.center + r.radius * np.outer(y, y) / yy for r in amb.cov_regions])
    stats = [ComponentStats(res["mu_bar"][0, i], res["sigma_bar"][0, i]) for i in range(m)]
    return WcCvarResult(float(res["cvar"][0]), float(res["var"][0]), res["weights"][0].copy(),
                        means.reshape(m, w), covs.reshape(m, w, w), stats,
                        res["gradient"][0].copy(), beta, float(res["bracket"][0]))


def cvar_fixed(y, params: GmmParams, beta: float, tol: float = BISECT_TOL) -> WcCvarResult:
    """CVaR of y^T xi under a GMM with known parameters (no ambiguity)."""
    return wc_cvar(y, AmbiguitySet.singleton(params), beta, tol)


# --------------------------------------------------------------------------
# moment-based comparator

@dataclass
class MomentSet:
    """All distributions with the given mean and covariance."""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float).reshape(self.mean.size, self.mean.size)

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MomentSet":
        return cls(d["mean"], d["cov"])

    @classmethod
    def from_samples(cls, x) -> "MomentSet":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def moment_wc_cvar_batch(Y, mean, cov, beta: float):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    k = math.sqrt((1.0 - beta) / beta)
    sy = Y @ np.asarray(cov).T
    sd = np.sqrt(np.maximum(np.einsum("ki,ki->k", Y, sy), 0.0))
    value = Y @ mean + k * sd
    safe = np.where(sd > 0, sd, 1.0)
    grad = mean[None] + np.where(sd[:, None] > 0, k * sy / safe[:, None], 0.0)
    return value, grad


def moment_wc_cvar(y, mean, cov, beta: float):
    """Worst-case CVaR over all laws with the given mean/covariance: value and gradient."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    value, grad = moment_wc_cvar_batch(np.asarray(y, float)[None], np.asarray(mean, float),
                                       np.asarray(cov, float), beta)
    return float(value[0]), grad[0]


# --------------------------------------------------------------------------
# cuts and dispatch over ambiguity sources

@dataclass
class AffineCut:
    """g(y) = constant + coef . y"""
    constant: float
    coef: np.ndarray

    def __call__(self, y) -> float:
        return float(self.constant + self.coef @ np.asarray(y, dtype=float))


def cutting_plane(res: WcCvarResult, y_star) -> AffineCut:
    y_star = np.asarray(y_star, dtype=float)
    return AffineCut(float(res.cvar - res.gradient @ y_star), res.gradient.copy())


def risk_evaluator(source) -> Callable:
    """Map an ambiguity source to ``f(Y, beta) -> (cvar (K,), gradient (K, W))``.

    Sources: AmbiguitySet (distributionally robust), GmmParams (fixed mixture),
    MomentSet (moment-based bound), or any object with ``cvar_batch(Y, beta)``.
    """
    if isinstance(source, AmbiguitySet):
        def f(Y, beta):
            r = wc_cvar_batch(Y, source, beta)
            return r["cvar"], r["gradient"]
        return f
    if isinstance(source, GmmParams):
        return risk_evaluator(AmbiguitySet.singleton(source))
    if isinstance(source, MomentSet):
        return lambda Y, beta: moment_wc_cvar_batch(Y, source.mean, source.cov, beta)
    if hasattr(source, "cvar_batch"):
        return source.cvar_batch
    raise TypeError(f"unsupported ambiguity source {type(source).__name__}")
