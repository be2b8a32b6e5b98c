"""Problem bindings: network shapes, losses, and evaluation metrics.

Each family maps to

- an input element dimension and an output stack shape for the set network,
- a supervised loss against cached solver targets,
- a self-supervised loss that evaluates the family's own objective at the
  network output,
- evaluation metrics mirroring how each family is scored: held-out MSE for
  regression, per-component cosine fidelity for PCA, transport distance
  against solver and chance baselines for core-sets, and normalized
  optimality / feasibility gaps for dispatch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import networks as N
from . import solvers as S
from . import tensor as T
from .datagen import Dataset, dispatch_template
from .rng import make_rng

log = logging.getLogger(__name__)

DISPATCH_BALANCE_WEIGHT = 0.001
DISPATCH_BOUND_WEIGHT = 10.0

_RAND_BASELINE_STREAM = 1 << 22
_GS_PIVOT_TOL = 1e-8


@dataclass(frozen=True)
class ProblemKind:
    """Static description tying a dataset family to network shapes.

    ``input_scale`` is a fixed constant multiplying raw set elements before
    they enter the network; targets and losses stay in original units.
    """

    tag: str
    input_dim: int
    output_seeds: int
    output_dim: int
    ridge_spec: S.RidgeSpec | None = None
    components: int = 5
    atoms: int = 8
    dispatch: dict | None = dc_field(default=None, repr=False)
    balance_weight: float = DISPATCH_BALANCE_WEIGHT
    bound_weight: float = DISPATCH_BOUND_WEIGHT
    input_scale: float = 1.0


def kind_for_dataset(dataset: Dataset) -> ProblemKind:
    tag = dataset.problem
    if tag in ("regression-linear", "regression-rbf"):
        spec = dataset.ridge_spec()
        scale = 1.0 / max(abs(spec.interval[0]), abs(spec.interval[1]), 1.0)
        return ProblemKind(tag=tag, input_dim=2, output_seeds=1,
                           output_dim=spec.dim, ridge_spec=spec,
                           input_scale=scale)
    if tag == "pca":
        d = dataset.images.shape[1]
        k = dataset.manifest["pca"]["components"]
        return ProblemKind(tag=tag, input_dim=d, output_seeds=k, output_dim=d,
                           components=k)
    if tag == "coreset":
        m = dataset.manifest["coreset"]["atoms"]
        return ProblemKind(tag=tag, input_dim=2, output_seeds=m, output_dim=2,
                           atoms=m)
    if tag == "dispatch":
        n = dataset.manifest["dispatch"]["supply"]
        template = dispatch_template(dataset.seed, n)
        return ProblemKind(tag=tag, input_dim=1, output_seeds=1, output_dim=n,
                           dispatch=template, input_scale=1.0 / 32.0)
    raise ValueError(f"unknown problem {tag!r}")


def model_config(kind: ProblemKind, arch: str, seed: int = 0,
                 **overrides) -> N.ModelConfig:
    return N.ModelConfig(arch=arch, input_dim=kind.input_dim,
                         output_dim=kind.output_dim,
                         output_seeds=kind.output_seeds, seed=seed,
                         **overrides)


def dispatch_instance(kind: ProblemKind, demands: np.ndarray) -> S.DispatchInstance:
    return S.DispatchInstance(demands=np.asarray(demands).ravel(),
                              **kind.dispatch)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Padded network input plus the constants each loss needs."""

    set_batch: N.SetBatch
    indices: list[int]
    targets: np.ndarray | None = None       # (B, seeds, out)
    aux: dict = dc_field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.indices)


def assemble_batch(kind: ProblemKind, dataset: Dataset,
                   indices) -> Batch:
    indices = list(indices)
    sets = [dataset.set_elements(i) for i in indices]
    if kind.input_scale != 1.0:
        net_sets = [s * kind.input_scale for s in sets]
    else:
        net_sets = sets
    set_batch = N.SetBatch.from_sets(net_sets)
    records = [dataset.records[i] for i in indices]

    targets = None
    if all(r.target is not None for r in records):
        stack = [r.target.reshape(kind.output_seeds, kind.output_dim)
                 for r in records]
        targets = np.stack(stack)

    aux: dict = {}
    if kind.tag.startswith("regression"):
        spec = kind.ridge_spec
        nmax = set_batch.elements.shape[1]
        b = len(indices)
        phi = np.zeros((b, nmax, spec.dim))
        y = np.zeros((b, nmax))
        for row, s in enumerate(sets):
            phi[row, : s.shape[0]] = S.feature_matrix(s[:, 0], spec)
            y[row, : s.shape[0]] = s[:, 1]
        aux["phi"] = phi
        aux["y"] = y
    elif kind.tag == "pca":
        centered = np.zeros_like(set_batch.elements)
        counts = set_batch.cardinalities.astype(np.float64)
        for row, s in enumerate(sets):
            centered[row, : s.shape[0]] = s - s.mean(axis=0)
        aux["centered"] = centered
        aux["counts"] = counts
    elif kind.tag == "coreset":
        aux["sets"] = sets
    elif kind.tag == "dispatch":
        aux["demand_totals"] = np.array([s.sum() for s in sets])
    return Batch(set_batch=set_batch, indices=indices, targets=targets, aux=aux)


# ------------------------------------------------------------------ losses


def _abs(t: T.Tensor) -> T.Tensor:
    return T.relu(t) + T.relu(-t)


def supervised_loss(kind: ProblemKind, pred: T.Tensor, batch: Batch) -> T.Tensor:
    """Discrepancy to the cached solver target.

    Mean squared error for regression, core-sets (after optimal assignment of
    the order-free atoms), and dispatch; one minus mean absolute cosine for
    PCA, which is invariant to the sign ambiguity of eigenvectors.
    """
    if batch.targets is None:
        raise ValueError("batch carries no solver targets")
    if pred.shape != batch.targets.shape:
        raise T.ShapeError(
            f"prediction {pred.shape} vs target {batch.targets.shape}")
    if kind.tag == "pca":
        target = batch.targets
        dots = T.reduce_sum(pred * T.Tensor(target), axis=-1)
        norms = T.sqrt(T.reduce_sum(T.square(pred), axis=-1) + 1e-24)
        tnorms = np.linalg.norm(target, axis=-1)
        cos = dots / (norms * T.Tensor(tnorms))
        return 1.0 - _abs(cos).mean()
    if kind.tag == "coreset":
        matched = np.empty_like(batch.targets)
        for b in range(batch.size):
            cost = ((pred.data[b][:, None, :]
                     - batch.targets[b][None, :, :]) ** 2).sum(axis=2)
            rows, cols = linear_sum_assignment(cost)
            matched[b][rows] = batch.targets[b][cols]
        return T.square(pred - T.Tensor(matched)).mean()
    return T.square(pred - T.Tensor(batch.targets)).mean()


def selfsup_loss(kind: ProblemKind, pred: T.Tensor, batch: Batch,
                 slice_count: int = 32, slice_seed: int = 0) -> T.Tensor:
    """The family objective evaluated at the prediction (no solver needed)."""
    if kind.tag.startswith("regression"):
        return _regression_objective(kind, pred, batch)
    if kind.tag == "pca":
        return _pca_variance_objective(kind, pred, batch)
    if kind.tag == "coreset":
        dirs = S.sliced_directions(2, slice_count, slice_seed)
        return swd_loss(pred, batch.aux["sets"], dirs)
    if kind.tag == "dispatch":
        return _dispatch_penalty_objective(kind, pred, batch)
    raise ValueError(f"unknown problem {kind.tag!r}")


def _regression_objective(kind, pred, batch):
    """0.5 * sum of squared residuals + 0.5 * ridge * ||u||^2, batch mean."""
    phi = batch.aux["phi"]
    y = batch.aux["y"]
    mask = batch.set_batch.mask.astype(np.float64)
    fitted = T.matmul(T.Tensor(phi), T.transpose(pred, (0, 2, 1)))
    residual = (T.reshape(fitted, y.shape) - T.Tensor(y)) * T.Tensor(mask)
    data_term = T.reduce_sum(T.square(residual), axis=1)
    reg_term = T.reduce_sum(T.square(pred), axis=-1)
    per_set = 0.5 * data_term + (0.5 * kind.ridge_spec.ridge) * T.reshape(
        reg_term, (batch.size,))
    return per_set.mean()


def orthonormalize_rows(pred: T.Tensor, pivot_tol: float = _GS_PIVOT_TOL):
    """In-graph Gram-Schmidt over the seed axis of a (B, k, d) stack.

    Near-dependent rows (pivot norm below tolerance) are replaced by a
    constant seeded completion, orthogonalized numerically; the event is
    logged.  Those rows carry no gradient.
    """
    b, k, d = pred.shape
    rows = []
    for l in range(k):
        sel = np.full((b, 1, 1), l, dtype=np.int64)
        row = T.transpose(T.gather_lastaxis(T.transpose(pred, (0, 2, 1)), sel),
                          (0, 2, 1))
        rows.append(row)                       # (B, 1, d)
    basis: list[T.Tensor] = []
    for l in range(k):
        v = rows[l]
        for e in basis:
            coeff = T.reduce_sum(v * e, axis=-1, keepdims=True)
            v = v - coeff * e
        norm2 = T.reduce_sum(T.square(v), axis=-1, keepdims=True)
        bad = norm2.data.ravel() < pivot_tol ** 2
        if bad.any():
            log.warning("gram-schmidt pivot below %g for %d row(s); using a "
                        "random completion", pivot_tol, int(bad.sum()))
            fallback = _random_completion(
                [e.data[:, 0, :] for e in basis], bad, d, l)
            keep = (~bad).astype(np.float64)[:, None, None]
            v = v * keep + T.Tensor(fallback[:, None, :])
            norm2 = T.reduce_sum(T.square(v), axis=-1, keepdims=True)
        basis.append(v / T.sqrt(norm2))
    return T.concat(basis, axis=1)             # (B, k, d)


def _random_completion(prev_rows, bad, d, level):
    rng = make_rng(level + 1, stream=13)
    out = np.zeros((bad.shape[0], d))
    for b in np.flatnonzero(bad):
        v = rng.standard_normal(d)
        for e in prev_rows:
            v -= (v @ e[b]) * e[b]
        out[b] = v / np.linalg.norm(v)
    return out


def _pca_variance_objective(kind, pred, batch):
    """Negative triangular-weighted captured variance after orthonormalization.

    Weights (k, k-1, ..., 1) integrate the cumulative captured-variance curve,
    so earlier components are pushed toward larger-variance directions.
    """
    basis = orthonormalize_rows(pred)
    centered = batch.aux["centered"]            # masked rows are zero
    counts = batch.aux["counts"]
    prods = T.matmul(T.Tensor(centered), T.transpose(basis, (0, 2, 1)))
    quad = T.reduce_sum(T.square(prods), axis=1) * T.Tensor(1.0 / counts[:, None])
    weights = np.arange(kind.components, 0, -1, dtype=np.float64)
    return -T.reduce_sum(quad * T.Tensor(weights[None, :]), axis=-1).mean()


def swd_loss(pred_atoms: T.Tensor, input_sets: list[np.ndarray],
             dirs: np.ndarray) -> T.Tensor:
    """Sliced squared-W2 between each input set and its predicted atoms.

    The input side is constant; gradients flow to the atoms through sorting
    and the quantile interpolation.  Matches ``solvers.swd`` evaluated with
    the same directions.
    """
    b, m, d = pred_atoms.shape
    n_slices = dirs.shape[1]
    k_each = np.array([max(s.shape[0], m) for s in input_sets])
    kmax = int(k_each.max())

    qa = np.zeros((b, n_slices, kmax))
    weight = np.zeros((b, 1, kmax))
    i0 = np.zeros((b, 1, kmax), dtype=np.int64)
    i1 = np.zeros((b, 1, kmax), dtype=np.int64)
    frac = np.zeros((b, 1, kmax))
    for row, s in enumerate(input_sets):
        k = int(k_each[row])
        levels = (np.arange(k) + 0.5) / k
        proj = np.sort(s @ dirs, axis=0)        # (N, L)
        qa[row, :, :k] = S._quantile_interp(proj, levels).T
        weight[row, 0, :k] = 1.0 / k
        pos = levels * m - 0.5
        base = np.floor(pos)
        fr = np.clip(pos - base, 0.0, 1.0)
        fr = np.where((base < 0) | (base + 1 > m - 1), 0.0, fr)
        i0[row, 0, :k] = np.clip(base, 0, m - 1)
        i1[row, 0, :k] = np.clip(base + 1, 0, m - 1)
        frac[row, 0, :k] = fr

    proj_atoms = T.transpose(T.matmul(pred_atoms, T.Tensor(dirs)), (0, 2, 1))
    sorted_atoms, _ = T.sort_lastaxis(proj_atoms)        # (B, L, M)
    lo = T.gather_lastaxis(sorted_atoms, i0)
    hi = T.gather_lastaxis(sorted_atoms, i1)
    qb = lo * (1.0 - T.Tensor(frac)) + hi * T.Tensor(frac)
    sq = T.square(qb - T.Tensor(qa)) * T.Tensor(weight)
    return T.reduce_sum(sq, axis=-1).mean()


def _dispatch_penalty_objective(kind, pred, batch):
    """Production cost plus quadratic balance and bound penalties."""
    template = kind.dispatch
    u = T.reshape(pred, (batch.size, kind.output_dim))
    a = T.Tensor(template["cost_a"][None, :])
    b_lin = T.Tensor(template["cost_b"][None, :])
    c = template["cost_c"][None, :]
    cost = T.reduce_sum(T.square(u) * a + u * b_lin + T.Tensor(c), axis=-1)
    gap = T.reduce_sum(u, axis=-1) - T.Tensor(batch.aux["demand_totals"])
    balance = kind.balance_weight * T.square(gap)
    low = T.reduce_sum(T.square(T.relu(T.Tensor(template["lower"][None, :]) - u)),
                       axis=-1)
    high = T.reduce_sum(T.square(T.relu(u - T.Tensor(template["upper"][None, :]))),
                        axis=-1)
    bounds = kind.bound_weight * (low + high)
    return (cost + balance + bounds).mean()


def bound_outputs(kind: ProblemKind, raw: np.ndarray) -> np.ndarray:
    """Coordinate-wise clamp of dispatch outputs to the box bounds.

    Balance is deliberately not repaired; the feasibility metric measures
    what remains.
    """
    if kind.tag != "dispatch":
        return raw
    return np.clip(raw, kind.dispatch["lower"], kind.dispatch["upper"])


# ------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class MetricStat:
    mean: float
    std: float
    count: int


@dataclass
class MetricsRecord:
    problem: str
    arch: str
    mode: str
    metrics: dict[str, MetricStat]
    extra: dict = dc_field(default_factory=dict)

    def as_rows(self):
        for name in sorted(self.metrics):
            stat = self.metrics[name]
            yield (self.problem, self.arch, self.mode, name,
                   stat.mean, stat.std, stat.count)


def _stat(values) -> MetricStat:
    arr = np.asarray(values, dtype=np.float64)
    return MetricStat(mean=float(arr.mean()), std=float(arr.std()),
                      count=int(arr.size))


def evaluate(kind: ProblemKind, dataset: Dataset, set_indices,
             outputs_per_model: list[list[np.ndarray]], arch: str,
             mode: str, extra: dict | None = None) -> MetricsRecord:
    """Score model outputs against oracle targets over models x test sets.

    ``outputs_per_model[m][j]`` is the raw network output stack for model m on
    the j-th listed set.  Statistics pool all (model, set) values.
    """
    set_indices = list(set_indices)
    records = [dataset.records[i] for i in set_indices]
    if any(r.target is None for r in records):
        raise ValueError("evaluation needs solver targets on every test set")
    for outputs in outputs_per_model:
        if len(outputs) != len(set_indices):
            raise ValueError("each model needs one output per test set")

    metrics: dict[str, list[float]] = {}

    def push(name, value):
        metrics.setdefault(name, []).append(float(value))

    if kind.tag.startswith("regression"):
        spec = kind.ridge_spec
        for j, (i, rec) in enumerate(zip(set_indices, records)):
            phi_h = S.feature_matrix(rec.heldout[:, 0], spec)
            y_h = rec.heldout[:, 1]
            push("mse_solver", ((phi_h @ rec.target.ravel() - y_h) ** 2).mean())
            push("mse_gt", ((phi_h @ rec.gen_w - y_h) ** 2).mean())
            for outputs in outputs_per_model:
                u = outputs[j].ravel()
                push("mse_model", ((phi_h @ u - y_h) ** 2).mean())
    elif kind.tag == "pca":
        for j, rec in enumerate(records):
            target = rec.target.reshape(kind.components, -1)
            for outputs in outputs_per_model:
                pred = outputs[j].reshape(kind.components, -1)
                for l in range(kind.components):
                    denom = np.linalg.norm(pred[l]) * np.linalg.norm(target[l])
                    cos = abs(pred[l] @ target[l]) / max(denom, 1e-24)
                    push(f"cos_{l + 1}", cos)
    elif kind.tag == "coreset":
        for j, (i, rec) in enumerate(zip(set_indices, records)):
            points = dataset.set_elements(i)
            solver_cost = rec.objective if rec.objective is not None else \
                S.solve_transportation(points, rec.target).cost
            push("w2_solver", np.sqrt(max(solver_cost, 0.0)))
            rand = S.rand_atoms(points, kind.atoms,
                                make_rng(dataset.seed,
                                         stream=_RAND_BASELINE_STREAM + i))
            push("w2_rand", S.wasserstein2(points, rand))
            for outputs in outputs_per_model:
                atoms = outputs[j].reshape(kind.atoms, -1)
                push("w2_model", S.wasserstein2(points, atoms))
    elif kind.tag == "dispatch":
        for j, (i, rec) in enumerate(zip(set_indices, records)):
            inst = dispatch_instance(kind, dataset.set_elements(i))
            u_star = rec.target.ravel()
            star_sum = u_star.sum()
            assert star_sum > 0, "positive demand implies positive output"
            for outputs in outputs_per_model:
                u = bound_outputs(kind, outputs[j].ravel())
                push("optimality_distance", np.abs(u - u_star).sum() / star_sum)
                proj = S.project_feasible(u, inst)
                push("feasibility_distance",
                     np.abs(u - proj).sum() / proj.sum())
    else:
        raise ValueError(f"unknown problem {kind.tag!r}")

    return MetricsRecord(problem=kind.tag, arch=arch, mode=mode,
                         metrics={k: _stat(v) for k, v in metrics.items()},
                         extra=dict(extra or {}))
