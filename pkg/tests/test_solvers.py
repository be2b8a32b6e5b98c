import itertools

import numpy as np
import pytest

from loopkit import solvers as S
from loopkit.rng import make_rng


# ------------------------------------------------------------ test oracles


def ridge_gradient_descent(phi, y, lam, tol=1e-12, max_iters=200_000):
    """Iterative oracle: plain gradient descent run to stationarity."""
    u = np.zeros(phi.shape[1])
    lip = np.linalg.eigvalsh(phi.T @ phi).max() + lam
    step = 1.0 / lip
    for _ in range(max_iters):
        grad = phi.T @ (phi @ u - y) + lam * u
        if np.abs(grad).max() < tol:
            break
        u -= step * grad
    return u


def brute_force_transport(p, q):
    """Enumerate transportation-polytope vertices (spanning-tree supports)."""
    n, m = p.shape[0], q.shape[0]
    cost = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    cells = list(itertools.product(range(n), range(m)))
    k = n + m - 1
    marg = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    best = np.inf
    for support in itertools.combinations(cells, k):
        a = np.zeros((n + m, k))
        for col, (i, j) in enumerate(support):
            a[i, col] = 1.0
            a[n + j, col] = 1.0
        sol, residual, rank, _ = np.linalg.lstsq(a, marg, rcond=None)
        if rank < k:
            continue
        if np.abs(a @ sol - marg).max() > 1e-9 or sol.min() < -1e-12:
            continue
        value = sum(cost[i, j] * f for (i, j), f in zip(support, sol))
        best = min(best, value)
    return best


def projected_gradient_dispatch(inst, tol=1e-10, max_iters=400_000):
    """Independent oracle: projected gradient descent on the dispatch cost."""
    u = S.project_feasible((inst.lower + inst.upper) / 2.0, inst)
    step = 1.0 / (2.0 * inst.cost_a.max())
    for _ in range(max_iters):
        grad = 2.0 * inst.cost_a * u + inst.cost_b
        nxt = S.project_feasible(u - step * grad, inst)
        if np.abs(nxt - u).max() < tol:
            return nxt
        u = nxt
    return u


def random_instance(rng, n=20, load=0.6):
    a = rng.uniform(0.002, 0.01, size=n)
    b = rng.uniform(0.5, 2.0, size=n)
    lower = np.zeros(n)
    upper = rng.uniform(20.0, 200.0, size=n)
    total = load * upper.sum()
    m = 30
    demands = rng.uniform(0.5, 1.5, size=m)
    demands *= total / demands.sum()
    return S.DispatchInstance(demands=demands, cost_a=a, cost_b=b,
                              cost_c=np.zeros(n), lower=lower, upper=upper)


# ------------------------------------------------------------------ ridge


def test_ridge_two_point_interpolation():
    spec = S.RidgeSpec(features="linear", ridge=0.0)
    u = S.solve_ridge(np.array([0.0, 1.0]), np.array([1.0, 3.0]), spec)
    assert np.allclose(u, [1.0, 2.0], atol=1e-10)


def test_ridge_zero_targets():
    spec = S.RidgeSpec(features="rbf-grid", ridge=0.5)
    x = make_rng(1).uniform(-10, 10, size=40)
    u = S.solve_ridge(x, np.zeros(40), spec)
    assert np.allclose(u, 0.0, atol=1e-12)


def test_ridge_matches_gradient_descent_oracle():
    rng = make_rng(2)
    spec = S.RidgeSpec(features="rbf-grid", ridge=0.1)
    x = rng.uniform(-10, 10, size=50)
    y = rng.normal(size=50)
    u = S.solve_ridge(x, y, spec)
    phi = S.feature_matrix(x, spec)
    u_oracle = ridge_gradient_descent(phi, y, 0.1)
    assert np.abs(u - u_oracle).max() < 1e-6


def test_ridge_residual_small_across_instances():
    rng = make_rng(3)
    for _ in range(50):
        spec = S.RidgeSpec(features="rbf-grid", ridge=float(rng.uniform(0.01, 1.0)))
        n = int(rng.integers(5, 80))
        x = rng.uniform(-10, 10, size=n)
        y = rng.normal(size=n)
        u = S.solve_ridge(x, y, spec)
        phi = S.feature_matrix(x, spec)
        resid = phi.T @ (phi @ u - y) + spec.ridge * u
        assert np.abs(resid).max() < 1e-8


def test_ridge_singular_design_advises_regularizer():
    spec = S.RidgeSpec(features="rbf-grid", rbf_centers=10, ridge=0.0)
    x = np.full(3, 0.5)  # duplicated point, rank-1 design
    with pytest.raises(S.SingularDesignError, match="ridge"):
        S.solve_ridge(x, np.ones(3), spec)


def test_ridge_shrinks_norm_on_rank_deficient_design():
    spec0 = S.RidgeSpec(features="rbf-grid", rbf_centers=6, ridge=1e-9)
    spec1 = S.RidgeSpec(features="rbf-grid", rbf_centers=6, ridge=0.5)
    x = np.array([0.1, 0.1, 2.0])
    y = np.array([1.0, 1.0, -1.0])
    try:
        u0 = S.solve_ridge(x, y, spec0)
    except S.SingularDesignError:
        u0 = None
    u1 = S.solve_ridge(x, y, spec1)
    if u0 is not None:
        assert np.linalg.norm(u1) < np.linalg.norm(u0)
    else:
        assert np.isfinite(u1).all()


# -------------------------------------------------------------------- pca


def test_pca_axis_aligned():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.1], [0.0, -0.1]])
    comps, vals = S.solve_pca(pts, 2)
    assert np.allclose(comps[0], [1.0, 0.0], atol=1e-10)
    assert vals[0] == pytest.approx(0.5)
    assert vals[1] == pytest.approx(0.005)


def test_pca_degenerate_spectrum_eigenvalues_only():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] * 2)
    _, vals = S.solve_pca(pts, 2)
    assert vals[0] == pytest.approx(vals[1])


def test_pca_eigen_residuals_random_cloud():
    rng = make_rng(4)
    pts = rng.normal(size=(60, 10)) @ rng.normal(size=(10, 10))
    comps, vals = S.solve_pca(pts, 10)
    cov = S.covariance(pts)
    for w, lam in zip(comps, vals):
        assert np.linalg.norm(cov @ w - lam * w) < 1e-8
    assert np.abs(comps @ comps.T - np.eye(10)).max() < 1e-8
    assert np.all(np.diff(vals) <= 1e-12)


def test_pca_sign_convention_and_rayleigh_dominance():
    rng = make_rng(5)
    pts = rng.normal(size=(40, 6)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2, 0.1])
    comps, vals = S.solve_pca(pts, 3)
    for row in comps:
        assert row[np.argmax(np.abs(row))] > 0
    cov = S.covariance(pts)
    top = comps[0] @ cov @ comps[0]
    probes = rng.normal(size=(1000, 6))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    assert np.all(top + 1e-12 >= np.einsum("ij,jk,ik->i", probes, cov, probes))


def test_pca_k_exceeding_dim_errors():
    with pytest.raises(ValueError):
        S.solve_pca(np.zeros((5, 3)), 4)


def test_pca_jacobi_matches_lapack():
    rng = make_rng(6)
    pts = rng.normal(size=(30, 8))
    comps, vals = S.solve_pca(pts, 8)  # d=8 -> Jacobi path
    lap_vals = np.linalg.eigvalsh(S.covariance(pts))[::-1]
    assert np.abs(vals - lap_vals).max() < 1e-10


def test_pca_large_dim_uses_same_contract():
    rng = make_rng(7)
    pts = rng.normal(size=(50, S.JACOBI_MAX_DIM + 10))
    comps, vals = S.solve_pca(pts, 4)
    cov = S.covariance(pts)
    for w, lam in zip(comps, vals):
        assert np.linalg.norm(cov @ w - lam * w) < 1e-8


# -------------------------------------------------------------- transport


def test_transport_single_atom_target():
    rng = make_rng(8)
    p = rng.normal(size=(7, 3))
    q = p.mean(axis=0, keepdims=True) + 0.3
    plan = S.solve_transportation(p, q)
    assert np.allclose(plan.coupling, 1.0 / 7.0)
    expect = ((p - q) ** 2).sum(axis=1).mean()
    assert plan.cost == pytest.approx(expect, rel=1e-12)


def test_transport_permutation_gives_zero():
    rng = make_rng(9)
    p = rng.normal(size=(6, 2))
    q = p[rng.permutation(6)]
    plan = S.solve_transportation(p, q)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n,m", [(2, 2), (3, 2), (2, 3), (3, 3), (4, 3), (4, 4)])
def test_transport_matches_vertex_enumeration(n, m):
    for trial in range(4):
        rng = make_rng(100 + 10 * n + m, stream=trial)
        p = rng.normal(size=(n, 2))
        q = rng.normal(size=(m, 2))
        plan = S.solve_transportation(p, q, method="simplex")
        expect = brute_force_transport(p, q)
        assert plan.cost == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_transport_simplex_agrees_with_lp_backend():
    rng = make_rng(10)
    p = rng.normal(size=(25, 3))
    q = rng.normal(size=(9, 3))
    a = S.solve_transportation(p, q, method="simplex")
    b = S.solve_transportation(p, q, method="highs")
    assert a.cost == pytest.approx(b.cost, rel=1e-9)


def test_transport_marginals_exact():
    rng = make_rng(11)
    p = rng.normal(size=(40, 2))
    q = rng.normal(size=(7, 2))
    plan = S.solve_transportation(p, q)
    assert np.abs(plan.coupling.sum(axis=1) - 1.0 / 40).max() < 1e-9
    assert np.abs(plan.coupling.sum(axis=0) - 1.0 / 7).max() < 1e-9
    assert plan.coupling.min() >= 0


def test_transport_triangle_inequality_spot_checks():
    rng = make_rng(12)
    for trial in range(5):
        r = make_rng(12, stream=trial)
        a = r.normal(size=(8, 2))
        b = r.normal(size=(8, 2))
        c = r.normal(size=(8, 2))
        dab = S.wasserstein2(a, b)
        dbc = S.wasserstein2(b, c)
        dac = S.wasserstein2(a, c)
        assert dac <= dab + dbc + 1e-9


def test_transport_size_cap_mentions_proxy():
    with pytest.raises(S.TransportSizeError, match="swd"):
        S.solve_transportation(np.zeros((2000, 1)), np.zeros((1500, 1)))


# ---------------------------------------------------------------- coreset


def test_coreset_single_atom_is_mean():
    rng = make_rng(13)
    pts = rng.normal(size=(30, 2))
    atoms, _, _ = S.solve_coreset(pts, 1, iters=3, seed=0)
    assert np.allclose(atoms[0], pts.mean(axis=0), atol=1e-9)


def test_coreset_full_size_objective_not_worse_than_start():
    rng = make_rng(14)
    pts = rng.normal(size=(12, 2))
    atoms, obj, _ = S.solve_coreset(pts, 12, iters=20, seed=1)
    assert obj <= 1e-9 or obj <= S.solve_transportation(
        pts, S.kmeanspp_init(pts, 12, make_rng(1, stream=3))).cost + 1e-12


def test_coreset_two_cluster_gmm_recovers_means():
    rng = make_rng(15)
    mean_a, mean_b = np.array([-2.0, 0.0]), np.array([2.0, 0.5])
    pts = np.concatenate([
        rng.normal(size=(120, 2)) * 0.05 + mean_a,
        rng.normal(size=(120, 2)) * 0.05 + mean_b,
    ])
    atoms, _, _ = S.solve_coreset(pts, 2, iters=40, tol=1e-10, seed=2)
    # direct 2-means oracle on the same task
    order = np.argsort(atoms[:, 0])
    assert np.abs(atoms[order[0]] - mean_a).max() < 0.1
    assert np.abs(atoms[order[1]] - mean_b).max() < 0.1


def test_coreset_objective_non_increasing():
    rng = make_rng(16)
    pts = rng.normal(size=(50, 2))
    objectives = []
    atoms = S.kmeanspp_init(pts, 4, make_rng(3, stream=3))
    for _ in range(12):
        plan = S.solve_transportation(pts, atoms)
        objectives.append(plan.cost)
        atoms = 4 * (plan.coupling.T @ pts)
    assert all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))


def test_coreset_beats_uniform_rand_baseline():
    for trial in range(5):
        rng = make_rng(17, stream=trial)
        pts = rng.normal(size=(60, 2))
        _, obj, _ = S.solve_coreset(pts, 4, iters=30, seed=trial)
        rand = S.rand_atoms(pts, 4, make_rng(18, stream=trial))
        assert obj <= S.solve_transportation(pts, rand).cost + 1e-12


def test_coreset_rejects_more_atoms_than_points():
    with pytest.raises(ValueError):
        S.solve_coreset(np.zeros((3, 2)), 4)


# -------------------------------------------------------------------- swd


def test_swd_identical_sets_zero():
    rng = make_rng(19)
    a = rng.normal(size=(20, 3))
    assert S.swd(a, a.copy(), slices=16, seed=0) == 0.0


def test_swd_unit_displacement_1d():
    a = np.zeros((1, 1))
    b = np.ones((1, 1))
    for slices in (1, 7, 32):
        assert S.swd(a, b, slices=slices, seed=3) == pytest.approx(1.0)


def test_swd_matches_exact_1d_transport():
    rng = make_rng(20)
    a = rng.normal(size=(15, 1))
    b = rng.normal(size=(15, 1))
    expect = float(((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2).mean())
    assert S.swd(a, b, slices=8, seed=4) == pytest.approx(expect, rel=1e-12)


def test_swd_symmetry():
    rng = make_rng(21)
    a = rng.normal(size=(9, 2))
    b = rng.normal(size=(14, 2))
    assert S.swd(a, b, slices=12, seed=5) == pytest.approx(
        S.swd(b, a, slices=12, seed=5), rel=1e-12)


# ---------------------------------------------------------------- dispatch


def test_dispatch_single_unit_forced():
    inst = S.DispatchInstance(demands=np.array([1.5, 2.5]),
                              cost_a=np.array([0.5]), cost_b=np.array([0.0]),
                              cost_c=np.array([0.0]), lower=np.array([0.0]),
                              upper=np.array([10.0]))
    u = S.solve_dispatch(inst)
    # balance contract is 1e-9 relative to total demand
    assert u[0] == pytest.approx(4.0, abs=1e-8)


def test_dispatch_symmetric_pair():
    inst = S.DispatchInstance(demands=np.array([4.0]),
                              cost_a=np.array([0.5, 0.5]),
                              cost_b=np.zeros(2), cost_c=np.zeros(2),
                              lower=np.zeros(2), upper=np.full(2, 10.0))
    u = S.solve_dispatch(inst)
    assert np.allclose(u, [2.0, 2.0], atol=1e-9)
    marginal = 2 * inst.cost_a * u + inst.cost_b
    assert np.allclose(marginal, 2.0, atol=1e-8)


def test_dispatch_matches_projected_gradient_oracle():
    for trial in range(8):
        rng = make_rng(22, stream=trial)
        inst = random_instance(rng, n=20, load=float(rng.uniform(0.3, 0.9)))
        u = S.solve_dispatch(inst)
        u_pg = projected_gradient_dispatch(inst)
        assert np.abs(u - u_pg).max() < 1e-6
        report = S.dispatch_kkt_report(inst, u)
        assert report["balance_rel"] < 1e-9
        assert report["bound_violation"] == 0.0
        assert report["marginal_spread"] < 1e-6


def test_dispatch_binding_bounds_case():
    rng = make_rng(23)
    inst = random_instance(rng, n=12, load=0.97)  # most units pinned high
    u = S.solve_dispatch(inst)
    assert (u == inst.upper).sum() > 0
    assert S.dispatch_kkt_report(inst, u)["balance_rel"] < 1e-9


def test_dispatch_matches_cvxpy():
    cvxpy = pytest.importorskip("cvxpy")
    rng = make_rng(24)
    inst = random_instance(rng, n=15, load=0.7)
    u = S.solve_dispatch(inst)
    x = cvxpy.Variable(inst.n_units)
    objective = cvxpy.Minimize(
        cvxpy.sum(cvxpy.multiply(inst.cost_a, cvxpy.square(x))
                  + cvxpy.multiply(inst.cost_b, x)))
    constraints = [cvxpy.sum(x) == inst.total_demand,
                   x >= inst.lower, x <= inst.upper]
    cvxpy.Problem(objective, constraints).solve(solver="CLARABEL")
    assert np.abs(u - x.value).max() < 1e-5


def test_dispatch_infeasible_demand():
    with pytest.raises(S.InfeasibleError):
        S.solve_dispatch(S.DispatchInstance(
            demands=np.array([100.0]), cost_a=np.array([0.01]),
            cost_b=np.array([1.0]), cost_c=np.array([0.0]),
            lower=np.array([0.0]), upper=np.array([50.0])))


# -------------------------------------------------------------- projection


def test_projection_of_member_is_identity():
    rng = make_rng(25)
    inst = random_instance(rng, n=10)
    # exactly balanced interior point of the feasible set
    span = inst.upper - inst.lower
    u = inst.lower + span * ((inst.total_demand - inst.lower.sum()) / span.sum())
    assert abs(u.sum() - inst.total_demand) < 1e-10
    assert np.abs(S.project_feasible(u, inst) - u).max() < 1e-10


def test_projection_symmetric_shift():
    inst = S.DispatchInstance(demands=np.array([4.0]),
                              cost_a=np.full(2, 0.5), cost_b=np.zeros(2),
                              cost_c=np.zeros(2), lower=np.zeros(2),
                              upper=np.full(2, 10.0))
    proj = S.project_feasible(np.zeros(2), inst)
    assert np.allclose(proj, [2.0, 2.0], atol=1e-10)


def test_projection_matches_qp_oracle():
    cvxpy = pytest.importorskip("cvxpy")
    for trial in range(5):
        rng = make_rng(26, stream=trial)
        inst = random_instance(rng, n=12)
        raw = rng.uniform(-50, 250, size=12)
        proj = S.project_feasible(raw, inst)
        x = cvxpy.Variable(12)
        prob = cvxpy.Problem(
            cvxpy.Minimize(cvxpy.sum_squares(x - raw)),
            [cvxpy.sum(x) == inst.total_demand, x >= inst.lower, x <= inst.upper])
        # polishing recovers the exact active-set solution
        prob.solve(solver="OSQP", eps_abs=1e-10, eps_rel=1e-10, polish=True)
        assert np.abs(proj - x.value).max() < 1e-6


def test_projection_idempotent_and_nonexpansive():
    rng = make_rng(27)
    inst = random_instance(rng, n=15)
    for trial in range(10):
        r = make_rng(28, stream=trial)
        raw = r.uniform(-100, 300, size=15)
        proj = S.project_feasible(raw, inst)
        again = S.project_feasible(proj, inst)
        assert np.abs(again - proj).max() < 1e-12
        feasible = S.solve_dispatch(inst)
        assert np.linalg.norm(proj - feasible) <= np.linalg.norm(raw - feasible) + 1e-9
    assert np.abs(proj.sum() - inst.total_demand) < 1e-9 * max(1, inst.total_demand)
