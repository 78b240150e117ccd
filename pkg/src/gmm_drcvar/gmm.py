"""Gaussian mixture models: EM fitting, BIC selection, density and sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .rng import make_rng, spawn

log = logging.getLogger(__name__)

EM_TOL = 1e-8
MAX_ITER = 500
N_RESTARTS = 5
EMPTY_WEIGHT = 1e-8


class GmmFitError(RuntimeError):
    pass


@dataclass
class GmmParams:
    weights: np.ndarray      # (M,)
    means: np.ndarray        # (M, W)
    covariances: np.ndarray  # (M, W, W)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        m = self.weights.size
        self.means = np.asarray(self.means, dtype=float).reshape(m, -1)
        w = self.means.shape[1]
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(m, w, w)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mixture_moments(self):
        """Overall mean and covariance of the mixture."""
        mean = self.weights @ self.means
        dev = self.means - mean
        cov = np.einsum("m,mij->ij", self.weights, self.covariances) + np.einsum(
            "m,mi,mj->ij", self.weights, dev, dev)
        return mean, cov

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        return cls(d["weights"], d["means"], d["covariances"])

    def copy(self) -> "GmmParams":
        return GmmParams(self.weights.copy(), self.means.copy(), self.covariances.copy())


@dataclass
class FitResult:
    params: GmmParams
    log_likelihood: float
    bic: float
    memberships: np.ndarray  # (J, M) posterior component probabilities
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # log-likelihood per E-step

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "log_likelihood": self.log_likelihood,
                "bic": self.bic, "n_components": self.params.n_components,
                "iterations": self.iterations, "converged": self.converged}


@dataclass
class SampleSet:
    """Forecast-error observations, one row per time stamp, one column per wind farm (MW)."""
    values: np.ndarray
    ids: list = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.ids is None:
            self.ids = [f"wf{i + 1}" for i in range(self.values.shape[1])]
        if len(self.ids) != self.values.shape[1]:
            raise ValueError("number of ids does not match number of columns")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sample set contains non-finite entries")
        j, w = self.values.shape
        if j < w + 1:
            raise ValueError(f"need at least W + 1 = {w + 1} observations, got {j}")


def _as_array(data) -> np.ndarray:
    x = data.values if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite entries")
    return x


def n_free_parameters(m: int, w: int) -> int:
    return (m - 1) + m * w + m * w * (w + 1) // 2


def psd_floor(x: np.ndarray) -> float:
    """Minimum covariance eigenvalue enforced during EM for this data set."""
    w = x.shape[1]
    sample_cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    return max(1e-6 * np.trace(sample_cov) / w, 1e-12)


def _floor_cov(cov: np.ndarray, eps: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= eps:
        return cov
    vals = np.maximum(vals, eps)
    return (vecs * vals) @ vecs.T


def _component_logpdf(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """(J, M) matrix of log N(x_j | mu_m, Sigma_m)."""
    j, w = x.shape
    out = np.empty((j, params.n_components))
    for m in range(params.n_components):
        chol = np.linalg.cholesky(params.covariances[m])
        z = np.linalg.solve(chol, (x - params.means[m]).T)
        out[:, m] = -0.5 * (w * math.log(2 * math.pi) + np.sum(z * z, axis=0)) \
            - np.sum(np.log(np.diag(chol)))
    return out


def _e_step(x, params):
    with np.errstate(divide="ignore"):
        joint = _component_logpdf(x, params) + np.log(params.weights)
    point_ll = logsumexp(joint, axis=1)
    resp = np.exp(joint - point_ll[:, None])
    return float(point_ll.sum()), resp, point_ll


def _m_step(x, resp, eps, point_ll=None) -> GmmParams:
    j, w = x.shape
    nk = resp.sum(axis=0)
    weights = nk / j
    means = np.zeros((resp.shape[1], w))
    covs = np.zeros((resp.shape[1], w, w))
    sample_cov = None
    for m in range(resp.shape[1]):
        if weights[m] < EMPTY_WEIGHT:
            # empty component: restart it on the worst-explained datum
            if sample_cov is None:
                sample_cov = _floor_cov(np.atleast_2d(np.cov(x, rowvar=False, bias=True)), eps)
            worst = int(np.argmin(point_ll)) if point_ll is not None else m % j
            means[m] = x[worst]
            covs[m] = sample_cov
            weights[m] = 1.0 / j
            continue
        means[m] = resp[:, m] @ x / nk[m]
        d = x - means[m]
        covs[m] = _floor_cov((resp[:, m, None] * d).T @ d / nk[m], eps)
    return GmmParams(weights / weights.sum(), means, covs)


def kmeanspp_memberships(x: np.ndarray, m: int, rng) -> np.ndarray:
    """Hard memberships from k-means++ seeded centres (one assignment pass)."""
    j = x.shape[0]
    centres = [x[rng.integers(j)]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        idx = rng.integers(j) if total <= 0 else rng.choice(j, p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    c = np.array(centres)
    labels = np.argmin(((x[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
    z = np.zeros((j, m))
    z[np.arange(j), labels] = 1.0
    return z


def em_fit(data, m: int, init: Union[GmmParams, np.ndarray, None] = None, seed=0,
           tol: float = EM_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Maximum-likelihood GMM by expectation-maximisation.

    ``init`` may be starting parameters, a (J, M) membership matrix, or None
    for k-means++ seeding drawn from ``seed``. Stops when the relative
    log-likelihood improvement drops below ``tol``.
    """
    x = _as_array(data)
    j, w = x.shape
    if m < 1:
        raise ValueError("component count must be >= 1")
    eps = psd_floor(x)
    if init is None:
        params = _m_step(x, kmeanspp_memberships(x, m, make_rng(seed)), eps)
    elif isinstance(init, GmmParams):
        if init.n_components != m or init.dim != w:
            raise ValueError(f"init has shape (M={init.n_components}, W={init.dim}), "
                             f"expected (M={m}, W={w})")
        params = GmmParams(init.weights, init.means,
                           np.array([_floor_cov(c, eps) for c in init.covariances]))
    else:
        z = np.asarray(init, dtype=float)
        if z.shape != (j, m):
            raise ValueError(f"membership matrix has shape {z.shape}, expected {(j, m)}")
        params = _m_step(x, z, eps)

    history = []
    converged = False
    for it in range(max_iter):
        ll, resp, point_ll = _e_step(x, params)
        if not np.isfinite(ll):
            raise GmmFitError(f"non-finite log-likelihood at iteration {it}")
        history.append(ll)
        if it > 0 and abs(ll - history[-2]) <= tol * abs(ll):
            converged = True
            break
        params = _m_step(x, resp, eps, point_ll)
    else:
        ll, resp, _ = _e_step(x, params)
        history.append(ll)

    bic = -2.0 * ll + n_free_parameters(m, w) * math.log(j)
    return FitResult(params, ll, bic, resp, len(history), converged, history)


def fit_best_of(data, m: int, seed=0, n_restarts: int = N_RESTARTS, **kw) -> FitResult:
    """Best-likelihood EM fit over ``n_restarts`` k-means++ initialisations."""
    best, errors = None, []
    for rng in spawn(seed, n_restarts):
        try:
            fit = em_fit(data, m, None, rng, **kw)
        except (GmmFitError, np.linalg.LinAlgError) as exc:
            errors.append(exc)
            continue
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best is None:
        raise GmmFitError(f"all {n_restarts} restarts failed for M={m}: {errors[-1]}")
    return best


def select_m_bic(data, m_range: Sequence[int], seed=0, n_restarts: int = N_RESTARTS) -> FitResult:
    """Fit every M in the inclusive range ``(lo, hi)`` and keep the lowest BIC."""
    lo, hi = m_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad component range {m_range}")
    best = None
    for m, sub in zip(range(lo, hi + 1), spawn(seed, hi - lo + 1)):
        try:
            fit = fit_best_of(data, m, sub, n_restarts)
        except GmmFitError as exc:
            log.warning("M=%d failed: %s", m, exc)
            continue
        log.debug("M=%d  logL=%.4f  BIC=%.4f", m, fit.log_likelihood, fit.bic)
        if best is None or fit.bic < best.bic:
            best = fit
    if best is None:
        raise GmmFitError(f"no component count in {lo}..{hi} could be fitted")
    return best


def gmm_pdf(params: GmmParams, point) -> Union[float, np.ndarray]:
    """Mixture density at one W-vector or at each row of an (n, W) array."""
    pts = np.asarray(point, dtype=float)
    single = pts.ndim <= 1 and (pts.size == params.dim)
    x = pts.reshape(-1, params.dim)
    if x.shape[1] != params.dim:
        raise ValueError(f"point dimension {x.shape[1]} != {params.dim}")
    with np.errstate(divide="ignore"):
        dens = np.exp(logsumexp(_component_logpdf(x, params) + np.log(params.weights), axis=1))
    return float(dens[0]) if single else dens


def gmm_sample(params: GmmParams, n: int, seed=0) -> np.ndarray:
    """Draw ``n`` points: component by weight, then mean + Cholesky factor times N(0, I)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    comp = rng.choice(params.n_components, size=n, p=params.weights / params.weights.sum())
    z = rng.standard_normal((n, params.dim))
    out = np.empty((n, params.dim))
    for m in range(params.n_components):
        sel = comp == m
        if not sel.any():
            continue
        chol = np.linalg.cholesky(params.covariances[m])
        out[sel] = params.means[m] + z[sel] @ chol.T
    return out


# --------------------------------------------------------------------------
# file formats

def write_samples_csv(path, values, ids: Optional[Sequence[str]] = None) -> None:
    s = values if isinstance(values, SampleSet) else SampleSet(values, ids)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(s.ids)
        for row in s.values:
            wr.writerow([repr(float(v)) for v in row])


def read_samples_csv(path) -> SampleSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    vals = []
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{k}: expected {len(header)} fields, got {len(r)}")
        try:
            vals.append([float(v) for v in r])
        except ValueError:
            raise ValueError(f"{path}:{k}: non-numeric field") from None
    if not vals:
        raise ValueError(f"{path}: no observations")
    return SampleSet(np.array(vals), list(header))


def save_params(path, params: GmmParams, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**params.to_dict(), **extra}, fh, indent=2)


def load_params(path) -> GmmParams:
    with open(path) as fh:
        d = json.load(fh)
    return GmmParams.from_dict(d.get("params", d))
