"""Independent checks: Monte-Carlo CVaR, out-of-sample testing, synthetic forecast errors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import tomli
from scipy import stats

from .gmm import SampleSet, read_samples_csv, write_samples_csv
from .rng import make_rng

_CHUNK = 2_000_000  # projected values held in memory at once


@dataclass
class ScenarioSet:
    values: np.ndarray
    ids: list = None
    seed: Optional[int] = None
    tag: str = ""

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] < 1:
            raise ValueError("scenario set is empty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scenario set contains non-finite entries")
        if self.ids is None:
            self.ids = [f"wf{i + 1}" for i in range(self.values.shape[1])]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        write_samples_csv(path, SampleSet(self.values, self.ids))

    @classmethod
    def from_csv(cls, path, tag: str = "") -> "ScenarioSet":
        s = read_samples_csv(path)
        return cls(s.values, s.ids, tag=tag or str(path))


def _values(scenarios) -> np.ndarray:
    if isinstance(scenarios, (ScenarioSet, SampleSet)):
        return scenarios.values
    return np.atleast_2d(np.asarray(scenarios, dtype=float))


def tail_count(n: int, beta: float) -> int:
    return int(math.ceil(beta * n - 1e-9))


def _tail_stats(z: np.ndarray, beta: float):
    """Top-ceil(beta n) mean, its standard error, and the tail index set."""
    n = z.size
    k = tail_count(n, beta)
    idx = np.argpartition(z, n - k)[n - k:]
    est = float(z[idx].mean())
    var = float(z[idx].min())
    # delta-method error of VaR + E[(Z - VaR)+]/beta
    excess = np.maximum(z - var, 0.0)
    se = float(np.sqrt(excess.var() / n) / beta)
    return est, se, idx


def mc_cvar(y, scenarios, beta: float):
    """Empirical CVaR of y' xi: mean of the ceil(beta n) largest values, with standard error."""
    x = _values(scenarios)
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    n = x.shape[0]
    if n * beta < 1:
        raise ValueError(f"need at least 1/beta = {1 / beta:.0f} scenarios, got {n}")
    z = x @ np.asarray(y, dtype=float).reshape(-1)
    est, se, _ = _tail_stats(z, beta)
    return est, se


class EmpiricalRisk:
    """Sample-average CVaR as a risk source: ``cvar_batch(Y, beta)`` gives value and subgradient."""

    def __init__(self, scenarios):
        self.values = _values(scenarios)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def cvar_batch(self, Y, beta: float):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = np.zeros(Y.shape[0])
        grad = np.zeros_like(Y)
        for i, y in enumerate(Y):
            z = self.values @ y
            est, _, idx = _tail_stats(z, beta)
            out[i] = est
            grad[i] = self.values[idx].mean(axis=0)
        return out, grad


# --------------------------------------------------------------------------
# out-of-sample test

@dataclass
class OosReport:
    names: list
    empirical_cvar: np.ndarray
    threshold: np.ndarray
    stderr: np.ndarray
    n_sigma: float = 3.0
    passed: bool = True
    n_scenarios: int = 0

    @property
    def violation(self) -> np.ndarray:
        return self.empirical_cvar - self.threshold

    @property
    def max_violation(self) -> float:
        return float(self.violation.max(initial=-np.inf)) if len(self.names) else 0.0

    def to_dict(self) -> dict:
        return {"n_scenarios": self.n_scenarios, "n_sigma": self.n_sigma, "passed": self.passed,
                "max_violation": self.max_violation,
                "constraints": [{"name": nm, "empirical_cvar": float(c), "threshold": float(t),
                                 "violation": float(c - t), "stderr": float(s)}
                                for nm, c, t, s in zip(self.names, self.empirical_cvar,
                                                       self.threshold, self.stderr)]}


def out_of_sample_test(sol, specs: Sequence, scenarios, config=None, n_sigma: float = 3.0) -> OosReport:
    """Hold the dispatch fixed and measure each constraint's empirical CVaR on ``scenarios``.

    Violation = empirical CVaR - threshold (positive means violated). The report
    passes when every violation is within ``n_sigma`` standard errors plus the
    solver feasibility tolerance.
    """
    x = sol.x if hasattr(sol, "x") else np.asarray(sol, dtype=float)
    xi = _values(scenarios)
    tau = getattr(config, "tau_feas", 0.0) if config is not None else 0.0
    k = len(specs)
    est, se, thr = np.zeros(k), np.zeros(k), np.zeros(k)
    for i, s in enumerate(specs):
        est[i], se[i] = mc_cvar(s.exposure(x), xi, s.beta)
        thr[i] = s.threshold(x)
    ok = bool(np.all(est - thr <= n_sigma * se + tau)) if k else True
    return OosReport([s.name for s in specs], est, thr, se, n_sigma, ok, xi.shape[0])


# --------------------------------------------------------------------------
# synthetic forecast errors via a Gaussian copula

@dataclass
class Marginal:
    """One farm's forecast-error law: normal, uniform, beta or a 1-D two-component mixture."""
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "beta", "gmm"):
            raise ValueError(f"unsupported marginal type {self.kind!r}")
        if self.kind == "gmm":
            w = np.asarray(self.params["weights"], float)
            if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
                raise ValueError("mixture weights must be a probability vector")

    def _frozen(self):
        p = self.params
        if self.kind == "normal":
            return stats.norm(p.get("mean", 0.0), p["std"])
        if self.kind == "uniform":
            return stats.uniform(p["low"], p["high"] - p["low"])
        if self.kind == "beta":
            return stats.beta(p["a"], p["b"], loc=p.get("loc", 0.0), scale=p.get("scale", 1.0))
        return None

    def cdf(self, x):
        d = self._frozen()
        if d is not None:
            return d.cdf(x)
        p = self.params
        x = np.asarray(x, dtype=float)[..., None]
        return (np.asarray(p["weights"]) * stats.norm.cdf(x, p["means"], p["stds"])).sum(axis=-1)

    def ppf(self, u):
        d = self._frozen()
        if d is not None:
            return d.ppf(u)
        # no closed form for a mixture quantile: vectorized bisection on the cdf
        p = self.params
        m, s = np.asarray(p["means"], float), np.asarray(p["stds"], float)
        u = np.asarray(u, dtype=float)
        lo = np.full(u.shape, (m - 40 * s).min())
        hi = np.full(u.shape, (m + 40 * s).max())
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        return {"type": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "Marginal":
        d = dict(d)
        kind = d.pop("type")
        d.pop("id", None)
        return cls(kind, d)


def repair_correlation(corr, tol: float = 1e-8) -> np.ndarray:
    c = np.atleast_2d(np.asarray(corr, dtype=float))
    if c.shape[0] != c.shape[1] or not np.allclose(c, c.T, atol=1e-12):
        raise ValueError("correlation matrix must be square and symmetric")
    if not np.allclose(np.diag(c), 1.0, atol=1e-12):
        raise ValueError("correlation matrix must have a unit diagonal")
    vals, vecs = np.linalg.eigh(c)
    if vals.min() >= 1e-12:
        return c
    if vals.min() < -tol:
        warnings.warn(f"correlation matrix not positive semidefinite (min eigenvalue {vals.min():.3g}); clipped")
    c = (vecs * np.maximum(vals, 1e-10)) @ vecs.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def spearman_to_pearson(rho_s):
    """Latent normal correlation giving rank correlation ``rho_s`` under a Gaussian copula."""
    return 2.0 * np.sin(np.pi * np.asarray(rho_s, dtype=float) / 6.0)


def synth_wind_errors(marginals: Sequence, corr, n: int, seed=0, corr_type: str = "pearson",
                      ids: Optional[Sequence[str]] = None) -> ScenarioSet:
    """Correlated forecast errors: latent normals with ``corr``, mapped through each marginal's quantile.

    ``corr_type="spearman"`` treats ``corr`` as a target rank correlation.
    """
    margs = [m if isinstance(m, Marginal) else Marginal.from_dict(m) for m in marginals]
    w = len(margs)
    c = np.atleast_2d(np.asarray(corr, dtype=float))
    if c.shape != (w, w):
        raise ValueError(f"correlation matrix shape {c.shape} does not match {w} marginals")
    if corr_type == "spearman":
        c = spearman_to_pearson(c)
        np.fill_diagonal(c, 1.0)
    elif corr_type != "pearson":
        raise ValueError(f"unknown corr_type {corr_type!r}")
    c = repair_correlation(c)
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    z = rng.standard_normal((n, w)) @ np.linalg.cholesky(c).T
    u = stats.norm.cdf(z)
    x = np.column_stack([m.ppf(u[:, i]) for i, m in enumerate(margs)])
    return ScenarioSet(x, list(ids) if ids else None, seed if isinstance(seed, int) else None,
                       "gaussian-copula")


def load_marginal_spec(path) -> dict:
    """Read a TOML generator spec: ``corr``, optional ``corr_type``/``n``, and ``[[farm]]`` tables."""
    with open(path, "rb") as fh:
        d = tomli.load(fh)
    farms = d.get("farm", [])
    if not farms:
        raise ValueError(f"{path}: no [[farm]] tables")
    return {"ids": [f.get("id", f"wf{i + 1}") for i, f in enumerate(farms)],
            "marginals": [Marginal.from_dict(f) for f in farms],
            "corr": np.asarray(d.get("corr", np.eye(len(farms))), dtype=float),
            "corr_type": d.get("corr_type", "pearson"),
            "n": d.get("n")}


def generate_from_spec(path, n: Optional[int] = None, seed=0) -> ScenarioSet:
    spec = load_marginal_spec(path)
    n = n or spec["n"]
    if not n:
        raise ValueError("sample count not given")
    return synth_wind_errors(spec["marginals"], spec["corr"], int(n), seed, spec["corr_type"], spec["ids"])
