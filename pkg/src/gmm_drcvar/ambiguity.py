"""Bootstrap credible regions for GMM parameters and the resulting ambiguity set."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gmm import FitResult, GmmFitError, GmmParams, _as_array, em_fit, select_m_bic
from .rng import spawn

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.95
DEFAULT_RESAMPLES = 2000
MAX_RETRIES = 3


@dataclass
class WeightRegion:
    lower: np.ndarray
    upper: np.ndarray
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper + 1e-15):
            raise ValueError("weight lower bound above upper bound")
        if self.lower.sum() > 1 + 1e-12 or self.upper.sum() < 1 - 1e-12:
            raise ValueError("weight region does not intersect the simplex")

    def contains(self, w, tol: float = 1e-12) -> bool:
        w = np.asarray(w)
        return bool(np.all(w >= self.lower - tol) and np.all(w <= self.upper + tol)
                    and abs(w.sum() - 1) <= 1e-9)


@dataclass
class MeanRegion:
    """Ellipsoid {mu : (mu - center)^T shape^-1 (mu - center) <= radius}."""
    center: np.ndarray
    shape: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(-1)
        self.shape = np.asarray(self.shape, dtype=float).reshape(self.center.size, self.center.size)
        self.radius = float(self.radius)

    def distance(self, mu) -> float:
        d = np.asarray(mu, dtype=float) - self.center
        return float(d @ np.linalg.solve(self.shape, d))

    def contains(self, mu, tol: float = 1e-9) -> bool:
        return self.distance(mu) <= self.radius + tol


@dataclass
class CovRegion:
    """Frobenius ball {Sigma SPD : ||Sigma - center||_F <= radius}."""
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.atleast_2d(np.asarray(self.center, dtype=float))
        self.radius = float(self.radius)

    def contains(self, cov, tol: float = 1e-9) -> bool:
        return float(np.linalg.norm(np.asarray(cov) - self.center, "fro")) <= self.radius + tol


@dataclass
class AmbiguitySet:
    weight_region: WeightRegion
    mean_regions: list
    cov_regions: list

    def __post_init__(self):
        m = len(self.weight_region.lower)
        if len(self.mean_regions) != m or len(self.cov_regions) != m:
            raise ValueError("component count differs between regions")

    @property
    def n_components(self) -> int:
        return len(self.mean_regions)

    @property
    def dim(self) -> int:
        return self.mean_regions[0].center.size

    @property
    def delta(self) -> float:
        return self.weight_region.delta

    @classmethod
    def singleton(cls, params: GmmParams) -> "AmbiguitySet":
        """The degenerate set holding exactly ``params``."""
        w = params.dim
        return cls(WeightRegion(params.weights.copy(), params.weights.copy(), 1.0),
                   [MeanRegion(mu, np.eye(w), 0.0) for mu in params.means],
                   [CovRegion(c, 0.0) for c in params.covariances])

    def contains(self, params: GmmParams) -> bool:
        return (self.weight_region.contains(params.weights)
                and all(r.contains(mu) for r, mu in zip(self.mean_regions, params.means))
                and all(r.contains(c) for r, c in zip(self.cov_regions, params.covariances)))

    def center_params(self) -> GmmParams:
        """A member of the set: region centres with weights projected into the box-simplex."""
        lo, up = self.weight_region.lower, self.weight_region.upper
        mid = 0.5 * (lo + up)
        # bisection on a shift so that clip(mid + s, lo, up) sums to one
        a, b = -1.0, 1.0
        for _ in range(200):
            s = 0.5 * (a + b)
            if np.clip(mid + s, lo, up).sum() > 1:
                b = s
            else:
                a = s
        w = np.clip(mid + 0.5 * (a + b), lo, up)
        return GmmParams(w / w.sum(), np.array([r.center for r in self.mean_regions]),
                         np.array([r.center for r in self.cov_regions]))

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "weight_region": {"lower": self.weight_region.lower.tolist(),
                              "upper": self.weight_region.upper.tolist()},
            "mean_regions": [{"center": r.center.tolist(), "shape": r.shape.tolist(),
                              "radius": r.radius} for r in self.mean_regions],
            "cov_regions": [{"center": r.center.tolist(), "radius": r.radius}
                            for r in self.cov_regions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AmbiguitySet":
        wr = d["weight_region"]
        return cls(WeightRegion(wr["lower"], wr["upper"], d.get("delta", DEFAULT_DELTA)),
                   [MeanRegion(r["center"], r["shape"], r["radius"]) for r in d["mean_regions"]],
                   [CovRegion(r["center"], r["radius"]) for r in d["cov_regions"]])


def save_ambiguity(path, amb: AmbiguitySet, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**amb.to_dict(), **extra}, fh, indent=2)


def load_ambiguity(path) -> AmbiguitySet:
    with open(path) as fh:
        return AmbiguitySet.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# bootstrap

def align_components(params: GmmParams, reference: GmmParams) -> GmmParams:
    """Permute components of ``params`` to best match ``reference`` by mean distance."""
    cost = np.linalg.norm(params.means[:, None, :] - reference.means[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(reference.n_components, dtype=int)
    perm[cols] = rows
    return GmmParams(params.weights[perm], params.means[perm], params.covariances[perm])


def _one_resample(x, base: GmmParams, rng):
    j = x.shape[0]
    idx = rng.integers(0, j, size=j)
    y = x[idx]
    last = None
    for attempt in range(MAX_RETRIES):
        init = base if attempt == 0 else None
        try:
            fit = em_fit(y, base.n_components, init, rng)
        except (GmmFitError, np.linalg.LinAlgError) as exc:
            last = exc
            continue
        return align_components(fit.params, base)
    raise GmmFitError(str(last))


def bootstrap_fits(data, base: FitResult, n_resamples: int, seed=0, threads: int = 1) -> list:
    """Refit the mixture on ``n_resamples`` with-replacement resamples of ``data``.

    Each resample's EM starts from the base parameters and keeps the base
    component count; results are label-aligned to the base fit. Resamples
    whose fit fails after the retries are dropped with a warning.
    """
    if n_resamples < 2:
        raise ValueError("N >= 2 required")
    x = _as_array(data)
    rngs = spawn(seed, n_resamples)

    def run(k):
        try:
            return _one_resample(x, base.params, rngs[k])
        except GmmFitError as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(n_resamples)))
    else:
        results = [run(k) for k in range(n_resamples)]
    fits = [r for r in results if isinstance(r, GmmParams)]
    dropped = [k for k, r in enumerate(results) if not isinstance(r, GmmParams)]
    if dropped:
        warnings.warn(f"dropped {len(dropped)} bootstrap resamples after repeated EM failure: "
                      f"{dropped[:10]}")
    if len(fits) < 2:
        raise GmmFitError("fewer than two bootstrap fits succeeded")
    return fits


def quantile(values: Sequence[float], q: float) -> float:
    """Order-statistic quantile, linear interpolation at position (n - 1) q."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("quantile of empty list")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    return float(np.quantile(v, q, method="linear"))


def build_weight_region(boot: Sequence[GmmParams], delta: float) -> WeightRegion:
    w = np.array([p.weights for p in boot])
    lower = np.clip([quantile(col, (1 - delta) / 2) for col in w.T], 0, 1)
    upper = np.clip([quantile(col, (1 + delta) / 2) for col in w.T], 0, 1)
    m = lower.size
    # repair: shift bounds evenly until the box meets the simplex
    for _ in range(100):
        excess = lower.sum() - 1
        if excess <= 1e-15:
            break
        warnings.warn(f"weight lower bounds sum to {lower.sum():.6f}; widening")
        lower = np.clip(lower - excess / m, 0, 1)
    for _ in range(100):
        deficit = 1 - upper.sum()
        if deficit <= 1e-15:
            break
        warnings.warn(f"weight upper bounds sum to {upper.sum():.6f}; widening")
        upper = np.clip(upper + deficit / m, 0, 1)
    return WeightRegion(np.minimum(lower, upper), upper, delta)


def _ridge(cov: np.ndarray) -> np.ndarray:
    w = cov.shape[0]
    lam = max(1e-10, 1e-8 * np.trace(cov) / w)
    if np.linalg.eigvalsh(cov).min() < lam:
        cov = cov + lam * np.eye(w)
    return cov


def build_mean_region(boot: Sequence[GmmParams], m: int, delta: float) -> MeanRegion:
    mus = np.array([p.means[m] for p in boot])
    center = mus.mean(axis=0)
    dev = mus - center
    shape = _ridge(dev.T @ dev / (len(mus) - 1))
    dist = np.einsum("ni,ni->n", dev, np.linalg.solve(shape, dev.T).T)
    return MeanRegion(center, shape, quantile(dist, delta))


def build_cov_region(boot: Sequence[GmmParams], m: int, delta: float) -> CovRegion:
    covs = np.array([p.covariances[m] for p in boot])
    center = covs.mean(axis=0)
    dist = np.linalg.norm(covs - center, ord="fro", axis=(1, 2))
    return CovRegion(center, quantile(dist, delta))


def regions_from_bootstrap(boot: Sequence[GmmParams], delta: float) -> AmbiguitySet:
    m = boot[0].n_components
    return AmbiguitySet(build_weight_region(boot, delta),
                        [build_mean_region(boot, k, delta) for k in range(m)],
                        [build_cov_region(boot, k, delta) for k in range(m)])


def build_ambiguity_set(data, delta: float = DEFAULT_DELTA, n_resamples: int = DEFAULT_RESAMPLES,
                        m_range: Sequence[int] = (1, 6), seed=0, threads: int = 1,
                        base: Optional[FitResult] = None):
    """Base MLE fit (M chosen by BIC), bootstrap refits, and the three credible regions.

    Returns ``(ambiguity_set, base_fit)``.
    """
    fit_seed, boot_seed = spawn(seed, 2)
    if base is None:
        base = select_m_bic(data, m_range, fit_seed)
    boot = bootstrap_fits(data, base, n_resamples, boot_seed, threads)
    amb = regions_from_bootstrap(boot, delta)
    if not amb.contains(base.params):
        warnings.warn("base fit lies outside its own bootstrap credible regions")
    return amb, base
