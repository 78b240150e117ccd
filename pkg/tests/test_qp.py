import numpy as np
import pytest

from gmm_drcvar.qp import QpNumericalError, QuadraticProgram, _factor, kkt_ok, linearize_cost, solve_qp


def _dual_oracle(q, c, G, h, iters=200000, tol=1e-12):
    """Accelerated projected gradient on the dual of min 1/2 x'diag(q)x + c'x, Gx <= h."""
    qi = 1.0 / q
    L = np.linalg.eigvalsh((G * qi) @ G.T).max()
    z = np.zeros(G.shape[0])
    v, t = z.copy(), 1.0
    for _ in range(iters):
        x = -qi * (c + G.T @ v)
        z_new = np.maximum(v + (G @ x - h) / L, 0.0)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        v = z_new + (t - 1) / t_new * (z_new - z)
        if np.abs(z_new - z).max() < tol:
            z = z_new
            break
        z, t = z_new, t_new
    x = -qi * (c + G.T @ z)
    return x, 0.5 * x @ (q * x) + c @ x


def test_scalar_bound():
    sol = solve_qp(QuadraticProgram([2.0], [0.0], lo=[1.0]))
    assert sol.ok and sol.x[0] == pytest.approx(1.0, abs=1e-9) and sol.objective == pytest.approx(1.0, abs=1e-8)
    sol = solve_qp(QuadraticProgram([2.0], [0.0], A_in=[[-1.0]], b_in=[-1.0]))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.z_in[0] == pytest.approx(2.0, abs=1e-7)


def test_degenerate_lp_tie_rule():
    p = QuadraticProgram([0.0, 0.0], [1.0, 1.0], A_eq=[[1.0, 1.0]], b_eq=[1.0], lo=[0, 0], up=[1, 1])
    sol = solve_qp(p)
    assert sol.ok and sol.objective == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(sol.x, [1.0, 0.0], atol=1e-9)
    assert np.array_equal(solve_qp(p).x, sol.x)


def test_random_qp_matches_dual_oracle():
    rng = np.random.default_rng(0)
    for _ in range(3):
        n, m = 20, 10
        q = rng.uniform(0.5, 3.0, n)
        c = rng.normal(size=n)
        G = rng.normal(size=(m, n))
        h = rng.uniform(0.1, 1.0, m) - 0.5 * G @ np.ones(n)
        sol = solve_qp(QuadraticProgram(q, c, A_in=G, b_in=h))
        x_ref, f_ref = _dual_oracle(q, c, G, h)
        assert sol.ok
        assert sol.objective == pytest.approx(f_ref, abs=1e-6)
        assert np.allclose(sol.x, x_ref, atol=1e-5)


def test_kkt_residuals_on_mixed_problem():
    rng = np.random.default_rng(1)
    n = 12
    q = np.where(rng.uniform(size=n) < 0.5, 0.0, rng.uniform(0.1, 2, n))
    c = rng.normal(size=n)
    A = rng.normal(size=(2, n))
    x0 = rng.uniform(-0.5, 0.5, n)
    G = rng.normal(size=(6, n))
    p = QuadraticProgram(q, c, A, A @ x0, G, G @ x0 + 0.3, lo=-np.ones(n), up=np.ones(n))
    sol = solve_qp(p)
    assert sol.ok
    r = sol.residuals
    assert max(r["primal_eq"], r["primal_in"]) <= 1e-8 * (1 + 1)
    assert r["dual"] <= 1e-8 * (1 + np.abs(c).max())
    assert r["complementarity"] <= 1e-8 and r["dual_sign"] <= 1e-8
    assert np.all(sol.x >= -1) and np.all(sol.x <= 1)
    assert np.all(sol.z_in >= -1e-12) and np.all(sol.z_lo >= 0) and np.all(sol.z_up >= 0)


def test_fixed_variable():
    p = QuadraticProgram([1.0, 1.0], [0.0, -4.0], A_in=[[1.0, 1.0]], b_in=[3.0], lo=[0.5, 0], up=[0.5, 10])
    sol = solve_qp(p)
    assert sol.x[0] == 0.5 and sol.x[1] == pytest.approx(2.5, abs=1e-9)


def test_infeasible_and_unbounded_statuses():
    inf = QuadraticProgram([1.0], [0.0], A_in=[[1.0]], b_in=[-1.0], lo=[0.0])
    assert solve_qp(inf).status == "infeasible"
    inf_eq = QuadraticProgram([0.0, 0.0], [1.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[5.0], up=[1.0, 1.0])
    assert solve_qp(inf_eq).status == "infeasible"
    unb = QuadraticProgram([0.0, 1.0], [-1.0, 0.0], A_in=[[0.0, 1.0]], b_in=[2.0], lo=[0.0, -5.0])
    assert solve_qp(unb).status == "unbounded"


def test_cuts_never_decrease_objective():
    rng = np.random.default_rng(2)
    n = 8
    p = QuadraticProgram(rng.uniform(0.5, 2, n), rng.normal(size=n), lo=-5 * np.ones(n), up=5 * np.ones(n))
    prev = solve_qp(p).objective
    for _ in range(15):
        p.add_inequality(rng.normal(size=n), rng.uniform(-0.5, 1.0))
        sol = solve_qp(p)
        if not sol.ok:
            assert sol.status == "infeasible"
            break
        assert sol.objective >= prev - 1e-9
        prev = sol.objective


def test_linearized_cost_brackets_qp():
    rng = np.random.default_rng(3)
    n = 4
    p = QuadraticProgram(rng.uniform(0.5, 2, n), rng.normal(size=n), A_eq=[np.ones(n)], b_eq=[1.0],
                         lo=-2 * np.ones(n), up=3 * np.ones(n))
    exact = solve_qp(p).objective
    gaps = []
    for k in (2, 8, 64):
        lin = solve_qp(p, linearize=k)
        assert lin.ok and lin.x.size == n
        # the secant interpolant over-estimates a convex cost
        assert lin.objective >= exact - 1e-8
        gaps.append(lin.objective - exact)
    assert gaps[0] >= gaps[1] >= gaps[2] and gaps[2] < 1e-2
    lp, curved = linearize_cost(p, 3)
    assert np.array_equal(curved, np.arange(n)) and lp.n == 2 * n
    with pytest.raises(ValueError):
        linearize_cost(QuadraticProgram([1.0], [0.0]), 3)


def test_validation_and_numerical_error():
    with pytest.raises(ValueError):
        QuadraticProgram([-1.0], [0.0])
    with pytest.raises(ValueError):
        QuadraticProgram([1.0], [0.0], lo=[1.0], up=[0.0])
    with pytest.raises(QpNumericalError, match="pivot"):
        _factor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(QpNumericalError, match="pivot"):
        _factor(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_kkt_ok_helper():
    good = {"primal_eq": 0.0, "primal_in": 0.0, "dual": 0.0, "dual_sign": 0.0, "complementarity": 0.0}
    assert kkt_ok(good, np.ones(2), np.ones(1), np.ones(1))
    assert not kkt_ok({**good, "complementarity": 1e-6}, np.ones(2), np.ones(1), np.ones(1))


def test_deterministic():
    rng = np.random.default_rng(4)
    p = QuadraticProgram(rng.uniform(0, 2, 10), rng.normal(size=10), A_in=rng.normal(size=(5, 10)),
                         b_in=np.ones(5), lo=-np.ones(10), up=np.ones(10))
    assert np.array_equal(solve_qp(p).x, solve_qp(p).x)


def test_dependent_active_rows_keep_dual_signs():
    # sum = 1 together with a1 >= 0 and a2 <= 1 makes the active rows linearly dependent
    p = QuadraticProgram([0.0, 0.0, 2.0], [5.0, 0.0, -3.0], A_eq=[[1.0, 1.0, 0.0]], b_eq=[1.0],
                         A_in=[[-1.0, 0.0, 1.0]], b_in=[0.0], lo=[0, 0, 0], up=[1, 1, 10])
    sol = solve_qp(p)
    assert np.array_equal(sol.x[:2], [0.0, 1.0])
    r = sol.residuals
    assert r["dual_sign"] == 0.0 and r["complementarity"] <= 1e-8 and r["dual"] <= 1e-8 * 6
