import math

import numpy as np
import pytest
from scipy import integrate, stats

from gmm_drcvar.gmm import (GmmParams, SampleSet, em_fit, fit_best_of, gmm_pdf, gmm_sample, n_free_parameters,
                            psd_floor, read_samples_csv, select_m_bic, write_samples_csv)


def _planted(means, n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    means = np.asarray(means, float)
    lab = rng.integers(len(means), size=n)
    return means[lab] + scale * rng.standard_normal((n, means.shape[1]))


def test_single_component_is_sample_moments():
    rng = np.random.default_rng(0)
    x = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]], size=3000)
    fit = em_fit(x, 1)
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    assert np.all(np.abs(fit.params.means[0] - mean) <= 3 * se)
    assert np.allclose(fit.params.covariances[0], np.cov(x, rowvar=False, bias=True), atol=1e-8, rtol=0)


def test_planted_two_components_recovered():
    x = _planted([[5, 5], [-5, -5]], 5000, 1)
    fit = fit_best_of(x, 2, seed=2)
    got = fit.params.means
    truth = np.array([[5, 5], [-5, -5]])
    err = min(np.abs(got - truth).max(), np.abs(got[::-1] - truth).max())
    assert err <= 0.15


def test_two_points_collapse_to_floor():
    x = np.array([[0.0, 0.0]] * 50 + [[3.0, 1.0]] * 50)
    fit = em_fit(x, 2, seed=3)
    eps = psd_floor(x)
    got = sorted(map(tuple, np.round(fit.params.means, 9)))
    assert got == [(0.0, 0.0), (3.0, 1.0)]
    for c in fit.params.covariances:
        assert np.allclose(np.linalg.eigvalsh(c), eps, rtol=1e-9)


def test_em_monotone_and_bookkeeping():
    x = _planted([[0, 0, 0], [2, 1, 0], [-1, 3, 1]], 1500, 4, scale=0.8)
    fit = em_fit(x, 3, seed=5)
    hist = np.array(fit.history)
    assert np.all(np.diff(hist) >= -1e-9)
    assert np.allclose(fit.memberships.sum(axis=1), 1.0, atol=1e-10)
    p = n_free_parameters(3, 3)
    assert p == 2 + 9 + 18
    assert fit.bic == pytest.approx(-2 * fit.log_likelihood + p * math.log(len(x)), rel=0, abs=1e-9)
    assert abs(fit.params.weights.sum() - 1) <= 1e-12
    for c in fit.params.covariances:
        assert np.allclose(c, c.T)
        assert np.linalg.eigvalsh(c).min() >= psd_floor(x) * (1 - 1e-9)


def test_membership_init_and_dimension_errors():
    x = _planted([[0, 0], [6, 6]], 400, 6)
    z = np.zeros((400, 2))
    z[:, 0] = x[:, 0] < 3
    z[:, 1] = 1 - z[:, 0]
    assert em_fit(x, 2, z).converged
    with pytest.raises(ValueError):
        em_fit(x, 2, np.ones((10, 2)))
    with pytest.raises(ValueError):
        em_fit(x, 2, GmmParams([1.0], [[0.0, 0.0]], [np.eye(2)]))


def test_empty_component_is_reseeded():
    x = _planted([[0.0]], 300, 7)
    # second component starts far away with a tiny weight, so it empties immediately
    init = GmmParams([1 - 1e-12, 1e-12], [[0.0], [1e4]], [[[1.0]], [[1e-6]]])
    fit = em_fit(x, 2, init)
    assert fit.params.n_components == 2
    assert np.all(fit.params.weights > 0)
    assert np.all(np.isfinite(fit.params.means))


def test_bic_selects_one_for_gaussian():
    x = np.random.default_rng(8).normal(size=(2000, 2))
    assert select_m_bic(x, (1, 4), seed=9).params.n_components == 1


def test_bic_selects_three_for_planted():
    x = _planted([[0, 0], [8, 0], [0, 8]], 3000, 10)
    assert select_m_bic(x, (1, 6), seed=11).params.n_components == 3


def test_bic_fixed_range():
    x = _planted([[0, 0], [8, 0], [0, 8]], 600, 12)
    assert select_m_bic(x, (2, 2), seed=1).params.n_components == 2
    with pytest.raises(ValueError):
        select_m_bic(x, (3, 2))


def test_pdf_values():
    p = GmmParams([1.0], [[0.0]], [[[1.0]]])
    assert gmm_pdf(p, [0.0]) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    sym = GmmParams([0.5, 0.5], [[-1.3], [1.3]], [[[0.4]], [[0.4]]])
    for t in np.linspace(-4, 4, 17):
        assert gmm_pdf(sym, [t]) == pytest.approx(gmm_pdf(sym, [-t]), rel=1e-14)
    two_d = GmmParams([1.0], [[0.0, 0.0]], [np.eye(2)])
    with pytest.raises(ValueError):
        gmm_pdf(two_d, [1.0, 2.0, 3.0])


def test_pdf_normalizes_1d():
    p = GmmParams([0.3, 0.7], [[-2.0], [1.0]], [[[0.25]], [[2.0]]])
    lo, hi = -2 - 10 * 0.5, 1 + 10 * math.sqrt(2)
    t = np.linspace(lo, hi, 200001)
    assert abs(np.trapezoid(gmm_pdf(p, t[:, None]), t) - 1) <= 1e-6


def test_pdf_box_mass_2d():
    p = GmmParams([0.4, 0.6], [[0, 0], [2, 1]], [[[1, 0.3], [0.3, 0.5]], [[0.5, 0], [0, 0.8]]])
    mass, _ = integrate.dblquad(lambda y, x: gmm_pdf(p, [x, y]), -7, 9, -6, 8, epsabs=1e-9)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_sample_moments_and_determinism():
    p = GmmParams([1.0], [[0.0]], [[[1.0]]])
    s = gmm_sample(p, 10**6, seed=13)
    assert abs(s.mean()) <= 0.005 and abs(s.var() - 1) <= 0.01
    assert np.array_equal(gmm_sample(p, 100, seed=14), gmm_sample(p, 100, seed=14))
    two = GmmParams([1.0, 0.0], [[-50.0], [50.0]], [[[1.0]], [[1.0]]])
    assert np.all(gmm_sample(two, 1000, seed=15) < 0)


def test_sample_histogram_matches_pdf():
    p = GmmParams([0.3, 0.7], [[-2.0], [1.0]], [[[0.25]], [[2.0]]])
    n = 10**6
    s = gmm_sample(p, n, seed=16)[:, 0]
    edges = np.linspace(-4, 5, 37)
    counts, _ = np.histogram(s, edges)
    cdf = lambda t: (p.weights * stats.norm.cdf(t, p.means[:, 0], np.sqrt(p.covariances[:, 0, 0]))).sum()
    probs = np.array([cdf(b) - cdf(a) for a, b in zip(edges[:-1], edges[1:])])
    se = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3.5 * se + 1)


def test_csv_round_trip_and_errors(tmp_path):
    x = np.random.default_rng(17).normal(size=(5, 2))
    path = tmp_path / "s.csv"
    write_samples_csv(path, x, ["a", "b"])
    back = read_samples_csv(path)
    assert back.ids == ["a", "b"] and np.array_equal(back.values, x)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match="bad.csv:3"):
        read_samples_csv(bad)
    with pytest.raises(ValueError):
        SampleSet([[1.0, 2.0]])
