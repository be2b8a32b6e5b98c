"""Training loops: solver-in-loop (supervised) and no-solver (self-supervised).

A run is deterministic given (seed, config, dataset): batch order comes from
a seeded shuffle of cardinality-sorted buckets, the optimizer walks parameters
in sorted name order, and the self-supervised slice directions are drawn from
a per-step substream.  Checkpoints carry parameters, optimizer moments, and a
structured-text sidecar, so a resumed run reproduces the original step for
step.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import networks as N
from . import problems as P
from . import solvers as S
from . import tensor as T
from .config import Field, Schema, parse_config, render_config
from .datagen import Dataset
from .rng import make_rng

log = logging.getLogger(__name__)

MODES = ("solver-in-loop", "no-solver")

_STREAM_SHUFFLE = 1 << 16
_STREAM_SLICES = 1 << 17
_STREAM_SPLIT = 3


class NonFiniteLossError(ArithmeticError):
    """Training produced NaN or infinity."""


class OracleFailure(RuntimeError):
    """A reference solver failed on one or more sets."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    swd_slices: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TrainState:
    params: dict[str, T.Tensor]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_params: dict[str, np.ndarray] | None = None
    best_step: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def init_state(model_cfg: N.ModelConfig, seed: int | None = None) -> TrainState:
    params = N.init_params(model_cfg, seed)
    zeros = {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(params=params,
                      moments_m={k: z.copy() for k, z in zeros.items()},
                      moments_v=zeros)


# ---------------------------------------------------------------- targets


def precompute_targets(dataset: Dataset, kind: P.ProblemKind,
                       coreset_iters: int = 50, coreset_tol: float = 1e-7,
                       max_failures: int = 0) -> int:
    """Attach the matching oracle's solution to every set lacking one.

    Idempotent: records that already carry a target are skipped.  Failed sets
    are flagged by a warning and counted; more than ``max_failures`` of them
    raises OracleFailure.
    """
    solved = 0
    failures = []
    for i, rec in enumerate(dataset.records):
        if rec.target is not None:
            continue
        try:
            if kind.tag.startswith("regression"):
                rec.target = S.solve_ridge(rec.elements[:, 0],
                                           rec.elements[:, 1], kind.ridge_spec)
                phi = S.feature_matrix(rec.elements[:, 0], kind.ridge_spec)
                resid = phi @ rec.target - rec.elements[:, 1]
                rec.objective = float(
                    0.5 * (resid ** 2).sum()
                    + 0.5 * kind.ridge_spec.ridge * (rec.target ** 2).sum())
            elif kind.tag == "pca":
                comps, vals = S.solve_pca(dataset.set_elements(i),
                                          kind.components)
                rec.target = comps
                weights = np.arange(kind.components, 0, -1)
                rec.objective = float((weights * vals).sum())
            elif kind.tag == "coreset":
                atoms, objective, _ = S.solve_coreset(
                    rec.elements, kind.atoms, iters=coreset_iters,
                    tol=coreset_tol, seed=dataset.seed + i)
                rec.target = atoms
                rec.objective = objective
            elif kind.tag == "dispatch":
                inst = P.dispatch_instance(kind, rec.elements)
                rec.target = S.solve_dispatch(inst)
                rec.objective = inst.cost(rec.target)
            else:
                raise ValueError(f"unknown problem {kind.tag!r}")
            solved += 1
        except (S.InfeasibleError, S.ConvergenceError,
                S.SingularDesignError) as exc:
            failures.append((i, str(exc)))
            log.warning("oracle failed on set %d: %s", i, exc)
    if len(failures) > max_failures:
        raise OracleFailure(
            f"oracle failed on {len(failures)} set(s): "
            + "; ".join(f"#{i}: {msg}" for i, msg in failures[:5]))
    return solved


# ---------------------------------------------------------------- batching


def bucketed_batches(dataset: Dataset, indices, batch_size: int):
    """Cardinality-sorted buckets, so each batch pads to its own maximum."""
    ordered = sorted(indices, key=lambda i: (dataset.records[i].cardinality, i))
    return [ordered[i: i + batch_size]
            for i in range(0, len(ordered), batch_size)]


def split_validation(indices, val_fraction: float, seed: int):
    indices = list(indices)
    if val_fraction <= 0 or len(indices) < 2:
        return indices, []
    rng = make_rng(seed, stream=_STREAM_SPLIT)
    perm = rng.permutation(len(indices))
    n_val = max(1, int(round(val_fraction * len(indices))))
    val = [indices[j] for j in sorted(perm[:n_val])]
    train = [indices[j] for j in sorted(perm[n_val:])]
    return train, val


# ------------------------------------------------------------------ adam


def adam_step(state: TrainState, cfg: TrainConfig):
    """Bias-corrected first-order moment update over sorted parameter names."""
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(state.params):
        p = state.params[name]
        g = p.grad
        if g is None:
            continue
        m = state.moments_m[name]
        v = state.moments_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.zero_grad()


# ------------------------------------------------------------------ train


def _batch_loss(kind, model_cfg, state_params, batch, cfg, slice_seed):
    out = N.forward(state_params, model_cfg, batch.set_batch)
    if cfg.mode == "solver-in-loop":
        return P.supervised_loss(kind, out, batch)
    return P.selfsup_loss(kind, out, batch, slice_count=cfg.swd_slices,
                          slice_seed=slice_seed)


def validation_loss(kind, model_cfg, params, dataset, val_indices, cfg) -> float:
    total = 0.0
    batches = bucketed_batches(dataset, val_indices, cfg.batch_size)
    for b_id, idxs in enumerate(batches):
        batch = P.assemble_batch(kind, dataset, idxs)
        loss = _batch_loss(kind, model_cfg, params, batch, cfg,
                           slice_seed=cfg.seed)
        total += loss.item() * len(idxs)
    return total / max(1, len(val_indices))


def train(dataset: Dataset, kind: P.ProblemKind, model_cfg: N.ModelConfig,
          cfg: TrainConfig, state: TrainState | None = None,
          train_indices=None) -> TrainState:
    """Mini-batch optimization of the selected mode's loss.

    Keeps the best parameter snapshot by validation loss; ``state`` may come
    from a checkpoint, in which case training continues after its epoch.
    """
    if state is None:
        state = init_state(model_cfg, cfg.seed)
    indices = list(train_indices if train_indices is not None
                   else dataset.train_indices)
    if cfg.mode == "solver-in-loop":
        missing = [i for i in indices
                   if dataset.records[i].target is None]
        if missing:
            raise ValueError(f"{len(missing)} training sets lack solver "
                             "targets; run precompute_targets first")
    train_idx, val_idx = split_validation(indices, cfg.val_fraction, cfg.seed)
    buckets = bucketed_batches(dataset, train_idx, cfg.batch_size)

    for epoch in range(state.epoch, cfg.epochs):
        order = make_rng(cfg.seed, stream=_STREAM_SHUFFLE + epoch).permutation(
            len(buckets))
        for pos in order:
            idxs = buckets[int(pos)]
            batch = P.assemble_batch(kind, dataset, idxs)
            state.step += 1
            slice_seed = int(make_rng(cfg.seed,
                                      stream=_STREAM_SLICES + state.step)
                             .integers(0, 2 ** 31))
            with T.Tape() as tape:
                loss = _batch_loss(kind, model_cfg, state.params, batch, cfg,
                                   slice_seed)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss at step {state.step} on batch "
                        f"{idxs}; lower the learning rate "
                        f"(currently {cfg.learning_rate:g}) or check data "
                        "scaling")
                tape.backward(loss)
            adam_step(state, cfg)
            state.history.append((state.step, value))
        state.epoch = epoch + 1
        if val_idx:
            val = validation_loss(kind, model_cfg, state.params, dataset,
                                  val_idx, cfg)
            state.val_history.append((state.step, val))
            if val < state.best_val:
                state.best_val = val
                state.best_step = state.step
                state.best_params = {k: v.data.copy()
                                     for k, v in state.params.items()}
            log.info("epoch %d/%d step %d val %.6g", epoch + 1, cfg.epochs,
                     state.step, val)
    if state.best_params is None:
        state.best_params = {k: v.data.copy() for k, v in state.params.items()}
        state.best_step = state.step
    return state


def best_params_tensors(state: TrainState) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=True)
            for k, v in state.best_params.items()}


# ------------------------------------------------------------- checkpoints


_SIDECAR_SCHEMA = Schema({"checkpoint": [
    Field("step", "int"), Field("epoch", "int"), Field("best_val", "float"),
    Field("best_step", "int"), Field("mode", "str"), Field("seed", "int"),
    Field("moments_digest", "str"), Field("config_digest", "str"),
]})


def save_checkpoint(path, state: TrainState, model_cfg: N.ModelConfig,
                    cfg: TrainConfig) -> None:
    """Write best params, live params+moments, and the sidecar."""
    N.save_params(path, best_params_tensors(state), model_cfg)
    live = {f"param.{k}": v for k, v in state.params.items()}
    live.update({f"m.{k}": T.Tensor(v) for k, v in state.moments_m.items()})
    live.update({f"v.{k}": T.Tensor(v) for k, v in state.moments_v.items()})
    moments_path = str(path) + ".state"
    N.save_params(moments_path, live, model_cfg)
    with open(moments_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    sidecar = {"checkpoint": {
        "step": state.step, "epoch": state.epoch,
        "best_val": state.best_val if math.isfinite(state.best_val) else -1.0,
        "best_step": state.best_step, "mode": cfg.mode, "seed": cfg.seed,
        "moments_digest": digest,
        "config_digest": model_cfg.digest().hex(),
    }}
    with open(str(path) + ".meta", "w") as fh:
        fh.write(render_config(sidecar, _SIDECAR_SCHEMA))


def load_checkpoint(path, model_cfg: N.ModelConfig) -> TrainState:
    """Rebuild a TrainState able to resume bit-identically."""
    best = N.load_params(path, model_cfg)
    moments_path = str(path) + ".state"
    with open(str(path) + ".meta") as fh:
        meta = parse_config(fh.read(), _SIDECAR_SCHEMA)["checkpoint"]
    with open(moments_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if digest != meta["moments_digest"]:
        raise N.ChecksumError(f"{moments_path}: moments digest mismatch")
    live = N.load_params(moments_path, model_cfg)
    params = {}
    m = {}
    v = {}
    for name, tensor in live.items():
        group, key = name.split(".", 1)
        if group == "param":
            tensor.requires_grad = True
            params[key] = tensor
        elif group == "m":
            m[key] = tensor.data
        elif group == "v":
            v[key] = tensor.data
    best_val = meta["best_val"]
    return TrainState(
        params=params, moments_m=m, moments_v=v, step=meta["step"],
        epoch=meta["epoch"],
        best_val=math.inf if best_val < 0 else best_val,
        best_params={k: t.data.copy() for k, t in best.items()},
        best_step=meta["best_step"])


# ------------------------------------------------------------------- eval


def model_outputs(params, model_cfg: N.ModelConfig, kind: P.ProblemKind,
                  dataset: Dataset, indices, batch_size: int = 16):
    """Forward the network over sets (no tape); returns one array per set."""
    outputs = {}
    for idxs in bucketed_batches(dataset, indices, batch_size):
        batch = P.assemble_batch(kind, dataset, idxs)
        out = N.forward(params, model_cfg, batch.set_batch).data
        for row, i in enumerate(idxs):
            outputs[i] = out[row].copy()
    return [outputs[i] for i in indices]


def evaluate_suite(checkpoint_paths, dataset: Dataset, kind: P.ProblemKind,
                   model_cfg: N.ModelConfig, arch: str, mode: str,
                   test_indices=None, batch_size: int = 16,
                   extra: dict | None = None) -> P.MetricsRecord:
    """Score a family of trained models (typically 5 seeds) on the test split."""
    missing = [str(p) for p in checkpoint_paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError("missing checkpoints: " + ", ".join(missing))
    indices = list(test_indices if test_indices is not None
                   else dataset.test_indices)
    per_model = []
    for path in checkpoint_paths:
        params = N.load_params(path, model_cfg)
        per_model.append(model_outputs(params, model_cfg, kind, dataset,
                                       indices, batch_size))
    return P.evaluate(kind, dataset, indices, per_model, arch, mode,
                      extra=extra)
