"""Command-line pipelines: gen-data, solve, train, eval, report.

Every output file records the exact command line and the configuration digest
in its header, so any artifact can be regenerated by replaying the command.
Commands never mutate their inputs; ``solve`` writes an augmented copy.

Exit codes: 0 success, 2 usage errors, 3 I/O or corruption, 4 infeasible
instances or oracle failures, 5 numeric aborts during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import datagen as D
from . import networks as N
from . import problems as P
from . import solvers as S
from . import training as TR
from .config import ConfigError, Field, Schema, parse_config, render_config

log = logging.getLogger("loopkit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_NUMERIC = 5

RUN_SCHEMA = Schema({
    "dataset": [
        Field("path", "str"),
        Field("problem", "str", ""),
    ],
    "model": [
        Field("arch", "str", "set-transformer"),
        Field("hidden", "int", 128),
        Field("encoder_layers", "int", 2),
        Field("decoder_layers", "int", 2),
        Field("heads", "int", 4),
        Field("inducing", "int", 32),
        Field("swe_slices", "int", 16),
        Field("swe_quantiles", "int", 8),
        Field("seed", "int", 0),
    ],
    "train": [
        Field("mode", "str", "solver-in-loop"),
        Field("epochs", "int", 20),
        Field("batch_size", "int", 32),
        Field("learning_rate", "float", 1e-3),
        Field("beta1", "float", 0.9),
        Field("beta2", "float", 0.999),
        Field("eps", "float", 1e-8),
        Field("seed", "int", 0),
        Field("val_fraction", "float", 0.1),
        Field("swd_slices", "int", 32),
        Field("train_limit", "int", 0),
        Field("checkpoint", "str", "model-{seed}.params"),
    ],
    "eval": [
        Field("batch_size", "int", 16),
    ],
})


def _read_run_config(path):
    with open(path) as fh:
        text = fh.read()
    values = parse_config(text, RUN_SCHEMA)
    digest = hashlib.sha256(render_config(values, RUN_SCHEMA).encode()).hexdigest()
    return values, digest


def _command_string(argv) -> str:
    return "loopkit " + " ".join(argv)


def _model_config(values, kind: P.ProblemKind, seed: int | None) -> N.ModelConfig:
    section = values["model"]
    return P.model_config(
        kind, section["arch"],
        seed=section["seed"] if seed is None else seed,
        hidden=section["hidden"], encoder_layers=section["encoder_layers"],
        decoder_layers=section["decoder_layers"], heads=section["heads"],
        inducing=section["inducing"], swe_slices=section["swe_slices"],
        swe_quantiles=section["swe_quantiles"])


def _write_csv(path, header_lines, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv):
    kwargs = {}
    problem = args.problem
    if problem in ("regression-linear", "regression-rbf"):
        kwargs = dict(noise=args.noise, nmin=args.nmin, nmax=args.nmax,
                      heldout=args.heldout)
        data = D.generate(problem, args.seed, args.train_count,
                          args.test_count, **kwargs)
    elif problem == "pca":
        if not args.images or not args.labels:
            raise ConfigError("pca generation needs --images and --labels")
        data = D.gen_pca(args.seed, args.train_count, args.test_count,
                         images_path=args.images, labels_path=args.labels,
                         components=args.components, nmin=args.nmin_pca,
                         nmax=args.nmax_pca)
    elif problem == "coreset":
        data = D.gen_gmm(args.seed, args.train_count, args.test_count,
                         atoms=args.atoms,
                         comp_range=(args.comp_min, args.comp_max),
                         sigma=args.sigma,
                         samples_range=(args.samples_min, args.samples_max))
    elif problem == "dispatch":
        data = D.gen_dispatch(args.seed, hours=args.hours,
                              n_supply=args.supply, m_demand=args.demand)
    else:
        raise ConfigError(f"unknown problem {problem!r}")
    digest = D.write_dataset(data, args.out)
    train_n = data.manifest["dataset"]["train_count"]
    test_n = data.manifest["dataset"]["test_count"]
    print(f"wrote {args.out}: {train_n} train / {test_n} test sets, "
          f"digest {digest}")
    return EXIT_OK


def cmd_solve(args, argv):
    dataset = D.read_dataset(args.data, images_root=args.images_root)
    kind = P.kind_for_dataset(dataset)
    if os.path.exists(args.out):
        try:
            existing = D.read_dataset(args.out, images_root=args.images_root)
            same_source = (existing.manifest["dataset"]["problem"]
                           == dataset.problem
                           and existing.seed == dataset.seed
                           and len(existing.records) == len(dataset.records))
            if same_source and all(r.target is not None
                                   for r in existing.records):
                digest = existing.manifest["dataset"]["content_digest"]
                print(f"cache hit: {args.out} already solved, digest {digest}")
                return EXIT_OK
        except D.CorruptDataError:
            log.warning("existing %s is corrupt; re-solving", args.out)
    solved = TR.precompute_targets(dataset, kind,
                                   coreset_iters=args.coreset_iters,
                                   coreset_tol=args.coreset_tol)
    objectives = [r.objective for r in dataset.records
                  if r.objective is not None]
    digest = D.write_dataset(dataset, args.out)
    print(f"solved {solved} sets; mean objective "
          f"{float(np.mean(objectives)):.6g}; digest {digest}")
    return EXIT_OK


def cmd_train(args, argv):
    values, digest = _read_run_config(args.config)
    dataset = D.read_dataset(values["dataset"]["path"],
                             images_root=args.images_root)
    kind = P.kind_for_dataset(dataset)
    seed = values["train"]["seed"] if args.seed is None else args.seed
    model_cfg = _model_config(values, kind, seed)
    section = values["train"]
    train_cfg = TR.TrainConfig(
        mode=section["mode"], epochs=section["epochs"],
        batch_size=section["batch_size"],
        learning_rate=section["learning_rate"], beta1=section["beta1"],
        beta2=section["beta2"], eps=section["eps"], seed=seed,
        val_fraction=section["val_fraction"],
        swd_slices=section["swd_slices"])
    train_indices = list(dataset.train_indices)
    if section["train_limit"] > 0:
        train_indices = train_indices[: section["train_limit"]]

    state = TR.train(dataset, kind, model_cfg, train_cfg,
                     train_indices=train_indices)

    checkpoint = section["checkpoint"].replace("{seed}", str(seed))
    os.makedirs(os.path.dirname(os.path.abspath(checkpoint)), exist_ok=True)
    TR.save_checkpoint(checkpoint, state, model_cfg, train_cfg)
    loss_csv = checkpoint + ".loss.csv"
    _write_csv(loss_csv,
               [f"command: {_command_string(argv)}", f"config_digest: {digest}"],
               ("step", "loss"),
               state.history)
    print(f"trained {state.step} steps; best val {state.best_val:.6g} at "
          f"step {state.best_step}; checkpoint {checkpoint}")
    return EXIT_OK


def cmd_eval(args, argv):
    values, digest = _read_run_config(args.config)
    dataset = D.read_dataset(args.data, images_root=args.images_root)
    kind = P.kind_for_dataset(dataset)
    model_cfg = _model_config(values, kind, None)
    extra = {}
    for item in args.extra or []:
        key, _, value = item.partition("=")
        extra[key] = value
    record = TR.evaluate_suite(
        args.checkpoints, dataset, kind, model_cfg,
        arch=model_cfg.arch, mode=values["train"]["mode"],
        batch_size=values["eval"]["batch_size"], extra=extra)

    payload = {
        "command": _command_string(argv),
        "config_digest": digest,
        "problem": record.problem,
        "arch": record.arch,
        "mode": record.mode,
        "extra": record.extra,
        "checkpoints": [str(p) for p in args.checkpoints],
        "metrics": {name: {"mean": stat.mean, "std": stat.std,
                           "count": stat.count}
                    for name, stat in record.metrics.items()},
    }
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

    csv_path = os.path.splitext(args.report)[0] + ".csv"
    extra_keys = sorted(record.extra)
    columns = ["problem", "arch", "mode", *extra_keys,
               "metric", "mean", "std", "count"]
    rows = [(record.problem, record.arch, record.mode,
             *[record.extra[k] for k in extra_keys],
             name, stat.mean, stat.std, stat.count)
            for name, stat in sorted(record.metrics.items())]
    _write_csv(csv_path,
               [f"command: {_command_string(argv)}", f"config_digest: {digest}"],
               columns, rows)
    print(f"evaluated {len(args.checkpoints)} checkpoints on "
          f"{len(list(dataset.test_indices))} test sets; report {args.report}")
    return EXIT_OK


def cmd_report(args, argv):
    payloads = []
    for path in args.inputs:
        with open(path, encoding="utf-8") as fh:
            payloads.append(json.load(fh))
    problems = {p["problem"] for p in payloads}
    if len(problems) > 1:
        raise ConfigError(f"conflicting problem tags: {sorted(problems)}")

    extra_keys = sorted({k for p in payloads for k in p.get("extra", {})})
    columns = ["problem", "arch", "mode", *extra_keys,
               "metric", "mean", "std", "count"]
    rows = []
    for p in payloads:
        for name in sorted(p["metrics"]):
            stat = p["metrics"][name]
            rows.append((p["problem"], p["arch"], p["mode"],
                         *[p.get("extra", {}).get(k) for k in extra_keys],
                         name, stat["mean"], stat["std"], stat["count"]))
    rows.sort(key=lambda r: tuple(str(x) for x in r))
    digest = hashlib.sha256(
        "".join(sorted(json.dumps(p, sort_keys=True)
                       for p in payloads)).encode()).hexdigest()
    _write_csv(args.out,
               [f"command: {_command_string(argv)}",
                f"config_digest: {digest}"],
               columns, rows)
    print(f"merged {len(payloads)} reports into {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopkit",
        description="train set networks to map optimization inputs to "
                    "optimal parameters, with classical reference solvers")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded dataset container")
    g.add_argument("--problem", required=True, choices=D.PROBLEMS)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train-count", type=int, default=2048)
    g.add_argument("--test-count", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--nmin", type=int, default=20)
    g.add_argument("--nmax", type=int, default=100)
    g.add_argument("--heldout", type=int, default=64)
    g.add_argument("--images")
    g.add_argument("--labels")
    g.add_argument("--components", type=int, default=5)
    g.add_argument("--nmin-pca", type=int, default=500)
    g.add_argument("--nmax-pca", type=int, default=1000)
    g.add_argument("--atoms", type=int, default=8)
    g.add_argument("--comp-min", type=int, default=2)
    g.add_argument("--comp-max", type=int, default=6)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--samples-min", type=int, default=50)
    g.add_argument("--samples-max", type=int, default=200)
    g.add_argument("--hours", type=int, default=168)
    g.add_argument("--supply", type=int, default=D.DISPATCH_SUPPLY)
    g.add_argument("--demand", type=int, default=D.DISPATCH_DEMAND)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="attach oracle targets to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--images-root")
    s.add_argument("--coreset-iters", type=int, default=50)
    s.add_argument("--coreset-tol", type=float, default=1e-7)
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train one model per the run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--images-root")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score trained checkpoints on a test split")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--images-root")
    e.add_argument("--extra", action="append",
                   help="extra key=value recorded with the metrics")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge evaluation JSONs into one CSV")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("LOOPKIT_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args, argv)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (S.InfeasibleError, S.TransportSizeError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (S.InfeasibleError, S.ConvergenceError, S.SingularDesignError,
            TR.OracleFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TR.NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, D.CorruptDataError, D.IngestError,
            N.ChecksumError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
