import itertools
import math
import time

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from gmm_drcvar.ambiguity import AmbiguitySet, CovRegion, MeanRegion, WeightRegion
from gmm_drcvar.gmm import GmmParams, gmm_sample
from gmm_drcvar.oracle import mc_cvar
from gmm_drcvar.wccvar import (BISECT_TOL, ComponentStats, MomentSet, bisect_var, cutting_plane, cvar_fixed,
                               moment_wc_cvar, q_m, risk_evaluator, sort_weights, t_objective, wc_cvar,
                               wc_cvar_batch, worst_cov, worst_mean)

PHI95 = stats.norm.pdf(stats.norm.ppf(0.95)) / 0.05


def _spd(rng, w, scale=1.0):
    a = rng.normal(size=(w, w)) * scale
    return a @ a.T + 0.5 * np.eye(w)


def _random_gmm(rng, m, w):
    wts = rng.dirichlet(np.ones(m) * 2)
    return GmmParams(wts, rng.normal(scale=3, size=(m, w)), [_spd(rng, w) for _ in range(m)])


def _random_amb(rng, m, w):
    p = _random_gmm(rng, m, w)
    lo = np.clip(p.weights - rng.uniform(0, 0.15, m), 0, 1)
    up = np.clip(p.weights + rng.uniform(0, 0.15, m), 0, 1)
    return AmbiguitySet(WeightRegion(lo, up, 0.95),
                        [MeanRegion(mu, _spd(rng, w, 0.3), rng.uniform(0.5, 6)) for mu in p.means],
                        [CovRegion(c, rng.uniform(0.05, 0.8)) for c in p.covariances]), p


# ---------------------------------------------------------------- pieces

def test_q_m_examples():
    assert q_m(0.0, ComponentStats(0.0, 1.0)) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert q_m(1e3, ComponentStats(0.0, 1.0)) == 0.0
    assert q_m(-10.0, ComponentStats(0.0, 1.0)) == pytest.approx(10.0, rel=1e-10)
    ref, _ = integrate.quad(lambda z: (z - 1) * stats.norm.pdf(z, 2, 3), 1, np.inf, epsabs=1e-13)
    assert q_m(1.0, ComponentStats(2.0, 3.0)) == pytest.approx(ref, abs=1e-8)
    # deterministic branch below the sigma floor
    assert q_m(1.0, ComponentStats(3.0, 0.0)) == 2.0
    assert q_m(5.0, ComponentStats(3.0, 0.0)) == 0.0


def test_q_m_convex_nonincreasing():
    s = ComponentStats(0.7, 1.3)
    t = np.linspace(-6, 8, 401)
    q = np.array([q_m(v, s) for v in t])
    assert np.all(q >= 0) and np.all(np.diff(q) <= 1e-15)
    assert np.all(np.diff(q, 2) >= -1e-12)


def test_worst_mean_examples():
    r = MeanRegion([1.0, 2.0], np.eye(2), 0.0)
    mu, val = worst_mean([3.0, -1.0], r)
    assert np.array_equal(mu, [1.0, 2.0]) and val == 1.0
    mu, val = worst_mean([1.0, 0.0], MeanRegion([0.0, 0.0], np.eye(2), 1.0))
    assert np.allclose(mu, [1, 0]) and val == pytest.approx(1.0)


def _ascent_mean(y, region, iters=3000):
    # maximise y . (c + sqrt(g) L u) over the unit ball by projected gradient ascent
    lch = np.linalg.cholesky(region.shape)
    d = lch.T @ y
    u = np.zeros_like(y)
    for _ in range(iters):
        u = u + 0.1 * d / np.linalg.norm(d)
        u /= max(1.0, np.linalg.norm(u))
    return y @ (region.center + math.sqrt(region.radius) * lch @ u)


def _ascent_cov(y, region, iters=3000):
    # maximise y' (C + g D) y over ||D||_F <= 1 by projected gradient ascent
    grad = np.outer(y, y)
    d = np.zeros_like(grad)
    for _ in range(iters):
        d = d + 0.05 * grad / np.linalg.norm(grad)
        d /= max(1.0, np.linalg.norm(d))
    return y @ (region.center + region.radius * d) @ y


def test_worst_mean_cov_match_iterative_oracles():
    rng = np.random.default_rng(0)
    for _ in range(10):
        y = rng.normal(size=3)
        mr = MeanRegion(rng.normal(size=3), _spd(rng, 3), rng.uniform(0.1, 5))
        mu, val = worst_mean(y, mr)
        assert val == pytest.approx(_ascent_mean(y, mr), abs=1e-6)
        assert mr.contains(mu, tol=1e-9)
        cr = CovRegion(_spd(rng, 3), rng.uniform(0.1, 2))
        cov, sd = worst_cov(y, cr)
        assert sd ** 2 == pytest.approx(_ascent_cov(y, cr), abs=1e-6)
        assert cr.contains(cov, tol=1e-9)
        assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov).min() > 0


def test_worst_cov_examples():
    cov, sd = worst_cov([1.0, 0.0], CovRegion(np.eye(2), 1.0))
    assert np.allclose(cov, np.diag([2.0, 1.0])) and sd == pytest.approx(math.sqrt(2))
    cov, _ = worst_cov([1.0, 2.0], CovRegion(np.eye(2), 0.0))
    assert np.array_equal(cov, np.eye(2))


def test_sort_weights_examples():
    r = WeightRegion([0.2, 0.2], [0.8, 0.8])
    assert np.allclose(sort_weights(r, [3.0, 1.0]), [0.8, 0.2])
    r3 = WeightRegion([0.1, 0.2, 0.1], [0.5, 0.5, 0.5])
    assert np.allclose(sort_weights(r3, [1.0, 1.0, 1.0]), [0.5, 0.4, 0.1])


def _vertex_max(lo, up, q):
    m = len(q)
    best = -np.inf
    for free in range(m):
        others = [i for i in range(m) if i != free]
        for pattern in itertools.product([0, 1], repeat=m - 1):
            pi = np.empty(m)
            for i, b in zip(others, pattern):
                pi[i] = up[i] if b else lo[i]
            pi[free] = 1 - pi[others].sum()
            if lo[free] - 1e-12 <= pi[free] <= up[free] + 1e-12:
                best = max(best, pi @ q)
    return best


def test_sort_weights_vs_vertex_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = rng.dirichlet(np.ones(4))
        lo = np.clip(c - rng.uniform(0, 0.3, 4), 0, 1)
        up = np.clip(c + rng.uniform(0, 0.3, 4), 0, 1)
        q = rng.normal(size=4)
        pi = sort_weights(WeightRegion(lo, up), q)
        assert abs(pi.sum() - 1) <= 1e-12 and np.all(pi >= lo - 1e-15) and np.all(pi <= up + 1e-15)
        assert pi @ q == pytest.approx(_vertex_max(lo, up, q), abs=1e-12)


# ---------------------------------------------------------------- bisection

def test_bisect_single_gaussian():
    pi, t, width = bisect_var([ComponentStats(0.0, 1.0)], WeightRegion([1.0], [1.0]), 0.05)
    assert t == pytest.approx(stats.norm.ppf(0.95), abs=1e-4)
    assert width <= BISECT_TOL and pi[0] == 1.0
    pi2, t2, _ = bisect_var([ComponentStats(0.0, 1.0)] * 2, WeightRegion([0.3, 0.3], [0.7, 0.7]), 0.05)
    assert t2 == pytest.approx(t, abs=1e-9)


def _grid_min(stats_, region, beta):
    lo = min(s.mu_bar - 12 * s.sigma_bar for s in stats_)
    hi = max(s.mu_bar + 12 * s.sigma_bar for s in stats_)
    grid = np.linspace(lo, hi, 200001)
    vals = t_objective(grid, stats_, region, beta)
    k = int(np.argmin(vals))
    res = optimize.minimize_scalar(lambda t: t_objective(t, stats_, region, beta)[0],
                                   bounds=(grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]),
                                   method="bounded", options={"xatol": 1e-10})
    return res.x, res.fun


def test_bisect_matches_grid_search():
    free = WeightRegion([0.0, 0.0], [1.0, 1.0])
    st = [ComponentStats(0.0, 1.0), ComponentStats(4.0, 1.0)]
    _, t, width = bisect_var(st, free, 0.1)
    tg, vg = _grid_min(st, free, 0.1)
    assert width <= BISECT_TOL
    assert t == pytest.approx(tg, abs=1e-4)
    assert t_objective(t, st, free, 0.1)[0] == pytest.approx(vg, abs=1e-8)
    rng = np.random.default_rng(2)
    for _ in range(9):
        m = 3
        c = rng.dirichlet(np.ones(m))
        region = WeightRegion(np.clip(c - 0.1, 0, 1), np.clip(c + 0.1, 0, 1))
        st = [ComponentStats(rng.normal(scale=3), rng.uniform(0.3, 3)) for _ in range(m)]
        beta = rng.uniform(0.01, 0.3)
        _, t, width = bisect_var(st, region, beta)
        tg, vg = _grid_min(st, region, beta)
        assert width <= BISECT_TOL
        assert t == pytest.approx(tg, abs=1e-4)
        assert t_objective(t, st, region, beta)[0] == pytest.approx(vg, abs=1e-8)


def test_bisect_rejects_bad_beta():
    with pytest.raises(ValueError):
        bisect_var([ComponentStats(0.0, 1.0)], WeightRegion([1.0], [1.0]), 1.0)


# ---------------------------------------------------------------- wc_cvar

def test_gaussian_closed_form():
    p = GmmParams([1.0], [[0.0]], [[[1.0]]])
    res = cvar_fixed([1.0], p, 0.05)
    assert res.cvar == pytest.approx(PHI95, abs=1e-4)
    assert res.cvar == pytest.approx(2.062713, abs=1e-4)
    half = cvar_fixed([1.0], p, 0.5)
    assert half.cvar == pytest.approx(2 / math.sqrt(2 * math.pi), abs=1e-6)
    tiny = cvar_fixed([1.0], GmmParams([1.0], [[1.5]], [[[1e-30]]]), 0.05)
    assert tiny.cvar == pytest.approx(1.5, abs=1e-9)


def test_cvar_fixed_equals_singleton_bitwise():
    rng = np.random.default_rng(3)
    p = _random_gmm(rng, 3, 2)
    y = rng.normal(size=2)
    a = cvar_fixed(y, p, 0.07)
    b = wc_cvar(y, AmbiguitySet.singleton(p), 0.07)
    assert a.cvar == b.cvar and np.array_equal(a.gradient, b.gradient)


def test_matches_monte_carlo():
    rng = np.random.default_rng(4)
    p = _random_gmm(rng, 3, 3)
    y = rng.normal(size=3)
    xi = gmm_sample(p, 10**6, seed=5)
    est, se = mc_cvar(y, xi, 0.05)
    assert abs(cvar_fixed(y, p, 0.05).cvar - est) <= 3 * se


def test_larger_regions_never_decrease():
    rng = np.random.default_rng(6)
    amb, p = _random_amb(rng, 2, 3)
    y = rng.normal(size=3)
    base = wc_cvar(y, amb, 0.05).cvar
    for k in range(2):
        bigger = AmbiguitySet.from_dict(amb.to_dict())
        bigger.mean_regions[k].radius += 1.0
        assert wc_cvar(y, bigger, 0.05).cvar >= base - 1e-9
        bigger = AmbiguitySet.from_dict(amb.to_dict())
        bigger.cov_regions[k].radius += 1.0
        assert wc_cvar(y, bigger, 0.05).cvar >= base - 1e-9
    wide = AmbiguitySet.from_dict(amb.to_dict())
    wide.weight_region = WeightRegion(np.zeros(2), np.ones(2))
    assert wc_cvar(y, wide, 0.05).cvar >= base - 1e-9


def test_internal_consistency_and_monotone_beta():
    rng = np.random.default_rng(7)
    for _ in range(10):
        amb, _ = _random_amb(rng, 3, 2)
        y = rng.normal(size=2)
        prev = np.inf
        for beta in (0.01, 0.02, 0.05, 0.1, 0.3, 0.6):
            r = wc_cvar(y, amb, beta)
            qs = np.array([q_m(r.var, s) for s in r.component_stats])
            assert r.cvar == pytest.approx(r.var + (r.worst_weights @ qs) / beta, abs=1e-8)
            assert r.cvar <= prev + 1e-9
            prev = r.cvar


def test_dominance_over_member():
    rng = np.random.default_rng(8)
    for _ in range(10):
        amb, p = _random_amb(rng, 2, 3)
        assert amb.contains(p)
        y = rng.normal(size=3)
        assert wc_cvar(y, amb, 0.04).cvar >= cvar_fixed(y, p, 0.04).cvar - 1e-9


def _fd_grad(f, y, hrel=1e-5):
    g = np.zeros_like(y)
    for i in range(y.size):
        h = hrel * (1 + abs(y[i]))
        e = np.zeros_like(y)
        e[i] = h
        g[i] = (f(y + e) - f(y - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    for k in range(10):
        amb, p = _random_amb(rng, 3, 3)
        src = amb if k % 2 else AmbiguitySet.singleton(p)
        y = rng.normal(size=3)
        beta = rng.uniform(0.02, 0.2)
        g = wc_cvar(y, src, beta).gradient
        fd = _fd_grad(lambda v: wc_cvar(v, src, beta).cvar, y)
        assert np.all(np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1.0))


def test_cut_tangent_and_under_estimates():
    rng = np.random.default_rng(10)
    amb, _ = _random_amb(rng, 3, 3)
    f = risk_evaluator(amb)
    queries = rng.normal(scale=2, size=(100, 3))
    exact = f(queries, 0.05)[0]
    for _ in range(10):
        y0 = rng.normal(size=3)
        res = wc_cvar(y0, amb, 0.05)
        cut = cutting_plane(res, y0)
        assert cut(y0) == pytest.approx(res.cvar, abs=1e-12)
        assert np.all(cut.constant + queries @ cut.coef <= exact + 1e-7)


def test_zero_mean_homogeneity():
    rng = np.random.default_rng(11)
    p = GmmParams([0.5, 0.5], np.zeros((2, 2)), [_spd(rng, 2), _spd(rng, 2)])
    y = rng.normal(size=2)
    r = cvar_fixed(y, p, 0.05)
    cut = cutting_plane(r, y)
    for c in (0.3, 2.0, 7.5):
        assert cvar_fixed(c * y, p, 0.05).cvar == pytest.approx(c * r.cvar, rel=1e-8)
        assert cut(c * y) == pytest.approx(c * r.cvar, rel=1e-8)


def test_zero_exposure():
    rng = np.random.default_rng(12)
    amb, _ = _random_amb(rng, 2, 3)
    r = wc_cvar(np.zeros(3), amb, 0.05)
    assert r.cvar == 0 and r.var == 0 and np.array_equal(r.gradient, np.zeros(3))
    with pytest.raises(ValueError):
        wc_cvar(np.zeros(2), amb, 0.05)


def test_batch_matches_single():
    rng = np.random.default_rng(13)
    amb, _ = _random_amb(rng, 3, 3)
    Y = rng.normal(size=(20, 3))
    Y[4] = 0
    b = wc_cvar_batch(Y, amb, 0.05)
    for k, y in enumerate(Y):
        r = wc_cvar(y, amb, 0.05)
        assert b["cvar"][k] == pytest.approx(r.cvar, abs=1e-12)
        assert np.allclose(b["gradient"][k], r.gradient, atol=1e-12)


def test_single_call_is_fast():
    amb = AmbiguitySet.singleton(GmmParams([1.0], [[0.0]], [[[1.0]]]))
    wc_cvar([1.0], amb, 0.05)
    n = 200
    t = time.perf_counter()
    for _ in range(n):
        wc_cvar([1.0], amb, 0.05)
    assert (time.perf_counter() - t) / n < 1e-3


# ---------------------------------------------------------------- moment bound

def test_moment_bound():
    v, g = moment_wc_cvar([1.0, 0.0], np.zeros(2), np.eye(2), 0.25)
    assert v == pytest.approx(math.sqrt(3), abs=1e-12)
    v, _ = moment_wc_cvar([1.0, 2.0], np.array([0.5, 1.0]), np.eye(2), 1 - 1e-12)
    assert v == pytest.approx(2.5, abs=1e-5)
    rng = np.random.default_rng(14)
    mean, cov = rng.normal(size=3), _spd(rng, 3)
    for _ in range(5):
        y = rng.normal(size=3)
        _, g = moment_wc_cvar(y, mean, cov, 0.05)
        fd = _fd_grad(lambda v: moment_wc_cvar(v, mean, cov, 0.05)[0], y, 1e-6)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_moment_bound_dominates_gaussian():
    rng = np.random.default_rng(15)
    mean, cov = rng.normal(size=2), _spd(rng, 2)
    p = GmmParams([1.0], [mean], [cov])
    ms = MomentSet(mean, cov)
    f = risk_evaluator(ms)
    Y = rng.normal(size=(10, 2))
    mom = f(Y, 0.05)[0]
    gmm = risk_evaluator(p)(Y, 0.05)[0]
    assert np.all(mom >= gmm - 1e-9)
    with pytest.raises(TypeError):
        risk_evaluator("nope")
