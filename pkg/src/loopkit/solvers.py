"""Classical reference solvers for the four problem families.

Every solver is an exact or convergent method with a checkable optimality
certificate:

- ridge regression through Cholesky on the normal equations,
- PCA through a cyclic Jacobi eigensolver (LAPACK above a size threshold,
  behind the same contract),
- exact optimal transport between uniform empirical measures through the
  transportation simplex (an LP backend takes over on large instances),
- free-support quantization by alternating transport / barycentric updates,
- quadratic-cost dispatch through bisection on the balance multiplier,
- Euclidean projection onto the dispatch feasible set through bisection on a
  common shift.

All functions are pure; shared state is never mutated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.optimize import linprog

from .rng import make_rng

log = logging.getLogger(__name__)

MARGINAL_TOL = 1e-9
DUAL_TOL = 1e-9
BALANCE_TOL = 1e-9
PROJECTION_TOL = 1e-13
JACOBI_OFFDIAG_TOL = 1e-10
JACOBI_MAX_DIM = 96
TRANSPORT_CELL_CAP = 2_000_000
SIMPLEX_CELL_LIMIT = 2_048
RIDGE_RESIDUAL_TOL = 1e-8


class SingularDesignError(np.linalg.LinAlgError):
    """Normal matrix is singular; a positive regularizer would fix it."""


class InfeasibleError(ValueError):
    """Constraint set is empty for the given instance."""


class ConvergenceError(RuntimeError):
    """Iterative solver failed to reach its tolerance."""


class TransportSizeError(ValueError):
    """Instance exceeds the exact-transport size cap."""


# ------------------------------------------------------------------ ridge


@dataclass(frozen=True)
class RidgeSpec:
    """Feature map and regularizer for the regression family."""

    features: str = "linear"          # "linear" | "rbf-grid"
    interval: tuple[float, float] = (-10.0, 10.0)
    rbf_centers: int = 10
    bandwidth: float = 2.0
    ridge: float = 0.01

    def __post_init__(self):
        if self.features not in ("linear", "rbf-grid"):
            raise ValueError(f"unknown feature map {self.features!r}")
        if self.rbf_centers < 1 or self.bandwidth <= 0:
            raise ValueError("rbf grid needs centers >= 1 and bandwidth > 0")
        if self.interval[1] <= self.interval[0]:
            raise ValueError("interval must have positive length")
        if self.ridge < 0:
            raise ValueError("regularizer must be non-negative")

    @property
    def dim(self) -> int:
        return 2 if self.features == "linear" else self.rbf_centers

    def centers(self) -> np.ndarray:
        a, b = self.interval
        return np.linspace(a, b, self.rbf_centers)


def feature_matrix(x: np.ndarray, spec: RidgeSpec) -> np.ndarray:
    """Row-per-point design matrix for scalar inputs."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if spec.features == "linear":
        return np.column_stack([np.ones_like(x), x])
    diff = x[:, None] - spec.centers()[None, :]
    return np.exp(-(diff * diff) / (2.0 * spec.bandwidth ** 2))


def solve_ridge(x: np.ndarray, y: np.ndarray, spec: RidgeSpec) -> np.ndarray:
    """Minimizer of 0.5*||Phi u - y||^2 + 0.5*ridge*||u||^2 via Cholesky."""
    phi = feature_matrix(x, spec)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if phi.shape[0] != y.shape[0]:
        raise ValueError(f"{phi.shape[0]} points but {y.shape[0]} targets")
    gram = phi.T @ phi + spec.ridge * np.eye(spec.dim)
    rhs = phi.T @ y
    try:
        factor = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(
            "normal matrix is singular; set ridge > 0 for rank-deficient designs"
        ) from exc
    u = scipy.linalg.cho_solve(factor, rhs)
    # one refinement step keeps the stationarity residual at solver precision
    residual = phi.T @ (phi @ u - y) + spec.ridge * u
    u = u - scipy.linalg.cho_solve(factor, residual)
    residual = phi.T @ (phi @ u - y) + spec.ridge * u
    scale = max(1.0, float(np.abs(rhs).max()))
    if np.abs(residual).max() > RIDGE_RESIDUAL_TOL * scale:
        raise SingularDesignError(
            "normal equations too ill-conditioned; increase ridge")
    return u


# -------------------------------------------------------------------- pca


def _jacobi_eigh(sym: np.ndarray, tol: float, max_sweeps: int = 64):
    """Cyclic Jacobi rotations until the off-diagonal Frobenius norm is < tol."""
    a = sym.copy()
    d = a.shape[0]
    vecs = np.eye(d)
    for _ in range(max_sweeps):
        # norm of the off-diagonal part, computed directly: subtracting
        # sums of squares cancels catastrophically near convergence
        stripped = a.copy()
        np.fill_diagonal(stripped, 0.0)
        if np.linalg.norm(stripped) < tol:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) if tau != 0 else 1.0
                t = t / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p, vec_q = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p] = c * vec_p - s * vec_q
                vecs[:, q] = s * vec_p + c * vec_q
    else:
        raise ConvergenceError("Jacobi sweeps did not reach the off-diagonal tolerance")
    return np.diag(a).copy(), vecs


def covariance(points: np.ndarray) -> np.ndarray:
    """Mean-removed second moment, normalized by the sample count."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    return centered.T @ centered / points.shape[0]


def solve_pca(points: np.ndarray, k: int):
    """Top-k eigenpairs of the set covariance, eigenvalues descending.

    Signs are fixed so each eigenvector's largest-magnitude entry is positive.
    Returns (components (k, d), eigenvalues (k,)).
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < 2:
        raise ValueError("PCA needs at least two points")
    if k > d:
        raise ValueError(f"k={k} exceeds dimension {d}")
    cov = covariance(points)
    if d <= JACOBI_MAX_DIM:
        vals, vecs = _jacobi_eigh(cov, JACOBI_OFFDIAG_TOL)
    else:
        vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    comps = vecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return comps, vals[order].copy()


# -------------------------------------------------------------- transport


@dataclass
class TransportPlan:
    """Optimal coupling between uniform empirical measures."""

    coupling: np.ndarray          # (N, M), rows sum to 1/N, columns to 1/M
    cost: float                   # squared 2-Wasserstein distance
    row_dual: np.ndarray = field(repr=False, default=None)
    col_dual: np.ndarray = field(repr=False, default=None)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _northwest_corner(n: int, m: int):
    """Integer initial basis: supplies of m per row, demands of n per column."""
    rs = np.full(n, m, dtype=np.int64)
    rd = np.full(m, n, dtype=np.int64)
    flows: dict[tuple[int, int], int] = {}
    i = j = 0
    while True:
        f = int(min(rs[i], rd[j]))
        flows[(i, j)] = f
        rs[i] -= f
        rd[j] -= f
        if i == n - 1 and j == m - 1:
            break
        if rs[i] == 0 and rd[j] == 0:
            if i < n - 1:
                i += 1
            else:
                j += 1
        elif rs[i] == 0:
            i += 1
        else:
            j += 1
    return flows


def _tree_duals(basis, cost, n, m):
    """Potentials satisfying u_i + v_j = c_ij on every basic arc."""
    adj: list[list[int]] = [[] for _ in range(n + m)]
    for (i, j) in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    pot = np.full(n + m, np.nan)
    pot[0] = 0.0
    stack = [0]
    parent = np.full(n + m, -1, dtype=np.int64)
    while stack:
        node = stack.pop()
        for nb in adj[node]:
            if np.isnan(pot[nb]):
                if node < n:
                    pot[nb] = cost[node, nb - n] - pot[node]
                else:
                    pot[nb] = cost[nb, node - n] - pot[node]
                parent[nb] = node
                stack.append(nb)
    if np.isnan(pot).any():
        raise ConvergenceError("transport basis is not a spanning tree")
    return pot[:n], pot[n:], parent


def _transport_simplex(cost: np.ndarray, max_iters: int | None = None):
    """Exact transportation simplex on integerized uniform marginals.

    Masses are scaled to integers (m per supply, n per demand) so every basic
    flow stays an exact integer and no epsilon perturbation is needed.
    """
    n, m = cost.shape
    flows = _northwest_corner(n, m)
    basis = set(flows)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-12 * scale
    if max_iters is None:
        max_iters = 50 * (n + m) * max(n, m) + 1000
    bland_after = max_iters // 2  # anti-cycling fallback for degenerate ties

    for it in range(max_iters):
        u, v, parent = _tree_duals(basis, cost, n, m)
        reduced = cost - u[:, None] - v[None, :]
        if it < bland_after:
            flat = int(np.argmin(reduced))
        else:
            negative = np.flatnonzero(reduced.ravel() < -tol)
            flat = int(negative[0]) if negative.size else int(np.argmin(reduced))
        ep, eq = divmod(flat, m)
        if reduced[ep, eq] >= -tol:
            plan = np.zeros((n, m))
            for (i, j), f in flows.items():
                plan[i, j] = f
            plan /= float(n * m)
            total = float((plan * cost).sum())
            return plan, total, u, v
        # cycle: entering arc plus the tree path between its endpoints
        ancestors = set()
        node = n + eq
        while node != -1:
            ancestors.add(node)
            node = int(parent[node])
        path_up = [ep]
        node = ep
        while node not in ancestors:
            node = int(parent[node])
            path_up.append(node)
        meet = node
        path_down = []
        node = n + eq
        while node != meet:
            path_down.append(node)
            node = int(parent[node])
        seq = path_up + list(reversed(path_down))  # ep .. meet .. n+eq
        arcs = [(a, b - n) if a < n else (b, a - n)
                for a, b in zip(seq, seq[1:])]
        # the path has odd length; arcs adjacent to both entering endpoints
        # sit at even positions and give up theta, odd positions gain it
        minus_arcs = arcs[0::2]
        theta = min(flows[a] for a in minus_arcs)
        leaving = min(a for a in minus_arcs if flows[a] == theta)
        for a in arcs[0::2]:
            flows[a] -= theta
        for a in arcs[1::2]:
            flows[a] += theta
        flows[(ep, eq)] = theta
        basis.add((ep, eq))
        del flows[leaving]
        basis.remove(leaving)
    raise ConvergenceError("transportation simplex exceeded its pivot budget")


def _transport_linprog(cost: np.ndarray):
    """Exact LP route for large instances (HiGHS with tightened tolerances)."""
    n, m = cost.shape
    rows, cols, vals = [], [], []
    idx = np.arange(n * m)
    rows.extend(np.repeat(np.arange(n), m))
    cols.extend(idx)
    vals.extend(np.ones(n * m))
    rows.extend(n + np.tile(np.arange(m), n))
    cols.extend(idx)
    vals.extend(np.ones(n * m))
    a_eq = scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n + m, n * m))
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(
        cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10})
    if not res.success:
        raise ConvergenceError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    duals = res.eqlin.marginals
    return plan, float((plan * cost).sum()), duals[:n], duals[n:]


def _certify_plan(plan, cost, u, v, n, m):
    scale = max(1.0, float(np.abs(cost).max()))
    row_err = float(np.abs(plan.sum(axis=1) - 1.0 / n).max())
    col_err = float(np.abs(plan.sum(axis=0) - 1.0 / m).max())
    if max(row_err, col_err) > MARGINAL_TOL:
        raise ConvergenceError(
            f"transport marginals off by {max(row_err, col_err):.2e}")
    reduced = cost - u[:, None] - v[None, :]
    if float(reduced.min()) < -DUAL_TOL * scale:
        raise ConvergenceError("transport duals violate feasibility")
    support = plan > 1e-15
    if support.any() and float(np.abs(reduced[support]).max()) > DUAL_TOL * scale:
        raise ConvergenceError("complementary slackness violated")


def solve_transportation(p_atoms: np.ndarray, q_atoms: np.ndarray,
                         method: str = "auto") -> TransportPlan:
    """Exact optimal coupling for squared-Euclidean cost, uniform weights.

    ``method`` is "simplex", "highs", or "auto" (simplex up to
    SIMPLEX_CELL_LIMIT cells, LP beyond).  Optimality is certified through
    complementary slackness with the dual potentials before returning.
    """
    p = np.atleast_2d(np.asarray(p_atoms, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_atoms, dtype=np.float64))
    n, m = p.shape[0], q.shape[0]
    if n < 1 or m < 1:
        raise ValueError("transport needs non-empty support on both sides")
    if n * m > TRANSPORT_CELL_CAP:
        raise TransportSizeError(
            f"{n}x{m} exceeds the exact-transport cap ({TRANSPORT_CELL_CAP} "
            "cells); use swd() as a proxy distance")
    cost = _pairwise_sq_dists(p, q)
    if method == "auto":
        method = "simplex" if n * m <= SIMPLEX_CELL_LIMIT else "highs"
    if method == "simplex":
        plan, total, u, v = _transport_simplex(cost)
    elif method == "highs":
        plan, total, u, v = _transport_linprog(cost)
    else:
        raise ValueError(f"unknown transport method {method!r}")
    _certify_plan(plan, cost, u, v, n, m)
    return TransportPlan(coupling=plan, cost=total, row_dual=u, col_dual=v)


def wasserstein2(p_atoms: np.ndarray, q_atoms: np.ndarray,
                 method: str = "auto") -> float:
    """2-Wasserstein distance (not squared) between uniform empiricals."""
    return float(np.sqrt(max(solve_transportation(p_atoms, q_atoms, method).cost, 0.0)))


# ---------------------------------------------------------------- coreset


def kmeanspp_init(points: np.ndarray, m: int, rng) -> np.ndarray:
    """Distance-weighted seeding of m atoms from the point set."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, m):
        total = float(d2.sum())
        if total <= 0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def solve_coreset(points: np.ndarray, m: int, iters: int = 50,
                  tol: float = 1e-7, seed: int = 0, method: str = "auto"):
    """Fixed-point search for m atoms minimizing W2 to the input empirical.

    Alternates an exact transport solve with barycentric atom updates; the
    transport objective is non-increasing across iterations.  Returns
    (atoms (m, d), squared-W2 objective, iterations used).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m > n:
        raise ValueError(f"cannot place {m} atoms from {n} points")
    atoms = kmeanspp_init(points, m, make_rng(seed, stream=3))
    prev = np.inf
    objective = np.inf
    used = 0
    for it in range(1, iters + 1):
        plan = solve_transportation(points, atoms, method=method)
        objective = plan.cost
        used = it
        # column masses are exactly 1/m, so the barycentric update is m * Gamma^T X
        atoms = m * (plan.coupling.T @ points)
        if prev - objective < tol:
            break
        prev = objective
    return atoms, float(objective), used


def rand_atoms(points: np.ndarray, m: int, rng) -> np.ndarray:
    """Chance baseline: m uniform atoms over the input's bounding box."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    return rng.uniform(lo, hi, size=(m, points.shape[1]))


# -------------------------------------------------------------------- swd


def _quantile_interp(sorted_vals: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Empirical quantile function at given levels, columns independent.

    ``sorted_vals`` is (n, L); values sit at probability levels (i+0.5)/n and
    queries interpolate linearly, clamped flat beyond the extremes.
    """
    n = sorted_vals.shape[0]
    pos = levels * n - 0.5
    base = np.floor(pos)
    frac = np.clip(pos - base, 0.0, 1.0)
    i0 = np.clip(base, 0, n - 1).astype(np.int64)
    i1 = np.clip(base + 1, 0, n - 1).astype(np.int64)
    frac = np.where((base < 0) | (base + 1 > n - 1), 0.0, frac)
    return sorted_vals[i0] * (1.0 - frac[:, None]) + sorted_vals[i1] * frac[:, None]


def sliced_directions(dim: int, slices: int, seed: int) -> np.ndarray:
    """Seeded Gaussian directions, unit-normalized, as a (dim, slices) matrix."""
    rng = make_rng(seed, stream=5)
    dirs = rng.normal(size=(dim, slices))
    return dirs / np.linalg.norm(dirs, axis=0, keepdims=True)


def swd(set_a: np.ndarray, set_b: np.ndarray, slices: int = 64,
        seed: int = 0) -> float:
    """Sliced squared-W2: average 1-D quantile-matching cost over random
    unit directions (seeded Gaussian).  Symmetric; equals exact 1-D
    squared-W2 when cardinalities agree."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("swd needs non-empty sets")
    dirs = sliced_directions(a.shape[1], slices, seed)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    k = max(a.shape[0], b.shape[0])
    levels = (np.arange(k) + 0.5) / k
    qa = pa if a.shape[0] == k else _quantile_interp(pa, levels)
    qb = pb if b.shape[0] == k else _quantile_interp(pb, levels)
    diff = qa - qb
    return float((diff * diff).mean())


# ---------------------------------------------------------------- dispatch


@dataclass(frozen=True)
class DispatchInstance:
    """Quadratic-cost supply allocation: per-unit costs a u^2 + b u + c,
    box bounds per unit, and a demand vector whose sum must be met exactly."""

    demands: np.ndarray
    cost_a: np.ndarray
    cost_b: np.ndarray
    cost_c: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("demands", "cost_a", "cost_b", "cost_c", "lower", "upper"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.cost_a.shape == self.cost_b.shape == self.cost_c.shape
                == self.lower.shape == self.upper.shape):
            raise ValueError("generator parameter arrays must share a shape")
        if np.any(self.cost_a <= 0):
            raise ValueError("quadratic coefficients must be positive")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if np.any(self.demands <= 0):
            raise ValueError("demands must be positive")

    @property
    def n_units(self) -> int:
        return self.cost_a.shape[0]

    @property
    def total_demand(self) -> float:
        return float(self.demands.sum())

    def check_feasible(self):
        total = self.total_demand
        if not (self.lower.sum() <= total <= self.upper.sum()):
            raise InfeasibleError(
                f"total demand {total:.6g} outside aggregate bounds "
                f"[{self.lower.sum():.6g}, {self.upper.sum():.6g}]")

    def cost(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=np.float64)
        return float((self.cost_a * u * u + self.cost_b * u + self.cost_c).sum())


def _dispatch_at(lam: float, inst: DispatchInstance) -> np.ndarray:
    return np.clip((lam - inst.cost_b) / (2.0 * inst.cost_a),
                   inst.lower, inst.upper)


def solve_dispatch(inst: DispatchInstance) -> np.ndarray:
    """KKT point by bisection on the balance multiplier.

    Aggregate output is monotone non-decreasing in the multiplier, and the
    bracket endpoints pin the all-lower / all-upper extremes.
    """
    inst.check_feasible()
    total = inst.total_demand
    tol = BALANCE_TOL * max(1.0, total)
    lo = float(np.min(inst.cost_b + 2.0 * inst.cost_a * inst.lower))
    hi = float(np.max(inst.cost_b + 2.0 * inst.cost_a * inst.upper))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gap = float(_dispatch_at(mid, inst).sum()) - total
        if abs(gap) <= tol:
            return _dispatch_at(mid, inst)
        if gap < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-18 * max(1.0, abs(hi)):
            break
    u = _dispatch_at(0.5 * (lo + hi), inst)
    if abs(float(u.sum()) - total) > tol:
        raise ConvergenceError("dispatch bisection stalled before balance")
    return u


def dispatch_kkt_report(inst: DispatchInstance, u: np.ndarray) -> dict:
    """Balance, bound, and stationarity diagnostics for a candidate output."""
    u = np.asarray(u, dtype=np.float64)
    total = inst.total_demand
    marginal = 2.0 * inst.cost_a * u + inst.cost_b
    span = inst.upper - inst.lower
    interior = ((u - inst.lower) > 1e-7 * span) & ((inst.upper - u) > 1e-7 * span)
    spread = float(marginal[interior].max() - marginal[interior].min()) \
        if interior.any() else 0.0
    return {
        "balance_rel": abs(float(u.sum()) - total) / max(1.0, total),
        "bound_violation": float(np.maximum(
            np.maximum(inst.lower - u, u - inst.upper), 0.0).max()),
        "marginal_spread": spread,
    }


def project_feasible(u: np.ndarray, inst: DispatchInstance) -> np.ndarray:
    """Euclidean projection onto {sum u = sum demand, lower <= u <= upper}.

    The projection is clamp(u + t, lower, upper) for the shift t that restores
    balance; t is found by bisection (the clamped sum is monotone in t).
    """
    inst.check_feasible()
    u = np.asarray(u, dtype=np.float64)
    if u.shape != inst.lower.shape:
        raise ValueError(f"output size {u.shape} != unit count {inst.lower.shape}")
    total = inst.total_demand
    lo = float((inst.lower - u).min())
    hi = float((inst.upper - u).max())
    # narrow the bracket all the way down: stopping at the first mid-point
    # inside a balance tolerance would leave an O(tol) shift and break
    # idempotence
    span = max(abs(lo), abs(hi), 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gap = float(np.clip(u + mid, inst.lower, inst.upper).sum()) - total
        if gap < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17 * span:
            break
    return np.clip(u + 0.5 * (lo + hi), inst.lower, inst.upper)
