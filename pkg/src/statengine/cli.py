"""Command-line harness.

Subcommands: ``train``, ``sweep-crossover``, ``calibrate``, ``gibbs``,
``bench-sum`` and ``gen``. Exit status is 0 on success, 2 for usage or data
errors and 3 for numerical failures. Output files are only written once a
command has fully succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shlex
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config, datagen, gibbs
from .engine import Session, SumStrategy, parallel_sum, plan, train
from .errors import CalibrationError, MemoryCapError, NumericalError, PlanError, StatEngineError
from .models import Access, Kind, graph_anchors, make_spec
from .optimizer import calibrate_alpha, cost_ratio
from .reference import THRESHOLDS, epochs_to_within, optimal_loss, time_to_within
from .storage import incidence_matrix, load_binary, load_edge_list, load_svmlight, save_binary, save_svmlight, stats, subsample_rows
from .topology import MachineTopology

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
DEFAULT_GRID = (100.0, 10.0, 1.0, 0.1, 0.01, 0.001, 0.0001)
DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


class UsageError(StatEngineError):
    pass


# -- output ---------------------------------------------------------------------------


def atomic_write(path, content):
    """Write text or bytes via a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_all(files):
    """Write ``{path: content}`` only after every content has been produced."""
    for path, content in files.items():
        atomic_write(path, content)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- shared resolution --------------------------------------------------------------------


def _settings(args):
    """Merge config-file values under explicit command-line flags."""
    values = config.read_config(args.config) if args.config else config.read_config()

    def pick(name, cast, default):
        v = getattr(args, name, None)
        if v is not None:
            return v
        if name in values:
            try:
                return cast(values[name])
            except ValueError:
                raise UsageError(f"config value {name} = {values[name]!r} is not valid") from None
        return default

    return {
        "nodes": pick("nodes", int, 1),
        "cores_per_node": pick("cores_per_node", int, 1),
        "pin": pick("pin", str, "os"),
        "seed": pick("seed", int, 0),
        "alpha": pick("alpha", float, config.DEFAULT_ALPHA),
        "memory_cap": int(float(values.get("memory_cap_bytes", config.DEFAULT_MEMORY_CAP))),
    }


def _topology(s):
    return MachineTopology(s["nodes"], s["cores_per_node"], s["pin"])


def _load_data(args, seed):
    """Return ``(DataMatrix, source echo)`` from ``--data`` or ``--recipe``."""
    if bool(args.data) == bool(args.recipe):
        raise UsageError("give exactly one of --data or --recipe")
    if args.recipe:
        parts = shlex.split(args.recipe)
        if not parts:
            raise UsageError("empty recipe")
        if parts[0] == "ising-chain":
            raise UsageError("ising-chain makes a factor graph; use it with the gibbs command")
        return datagen.generate(parts[0], parts[1:], seed), {"recipe": args.recipe, "recipe_seed": seed}
    path = Path(args.data)
    if not path.is_file():
        raise UsageError(f"no such dataset: {path}")
    if path.suffix in (".dwmx", ".bin"):
        m = load_binary(path)
    elif path.suffix in (".tsv", ".edges"):
        m = incidence_matrix(load_edge_list(path))
    else:
        m = load_svmlight(path)
    return m, {"data": str(path)}


def _grid(text):
    try:
        grid = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad step-size grid {text!r}") from None
    if not grid or any(not g > 0 for g in grid):
        raise UsageError("the step-size grid must be a non-empty list of positive numbers")
    return grid


def _anchors(kind, m, fraction, seed):
    if Kind(kind) in (Kind.QP, Kind.LP):
        return graph_anchors(m.n_cols, fraction, seed)
    return None


# -- train --------------------------------------------------------------------------------


def _train_inputs(args, settings):
    """Resolve the task description, either from flags or from a replayed trace."""
    if args.replay:
        try:
            echo = json.loads(Path(args.replay).read_text())["plan"]
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot replay {args.replay}: {exc}") from None
        src = echo.get("source", {})
        args.data, args.recipe = src.get("data"), src.get("recipe")
        m, source = _load_data(args, src.get("recipe_seed", echo["seed"]))
        sp_ = echo["spec"]
        task = {
            "kind": sp_["kind"],
            "grid": (sp_["step_size"],),
            "regularization": sp_["regularization"],
            "decay": sp_["decay"],
            "anchor_fraction": src.get("anchor_fraction", 0.1),
            "overrides": {
                "access": echo["access"],
                "model_replication": echo["model_replication"],
                "data_replication": echo["data_replication"],
                "epsilon": echo.get("epsilon"),
                "sync": echo.get("sync"),
            },
            "stop": src.get("stop", {}),
        }
        topo = echo["topology"]
        settings.update(nodes=topo["n_nodes"], cores_per_node=topo["cores_per_node"], pin=topo["pinning"])
        settings["seed"] = echo["seed"]
        if echo.get("alpha") is not None:
            settings["alpha"] = echo["alpha"]
        return m, source, task
    if not args.task:
        raise UsageError("train needs --task (or --replay)")
    m, source = _load_data(args, settings["seed"])
    sync = None
    if args.sync_interval_ms is not None:
        if args.sync_interval_ms < 0:
            raise UsageError("--sync-interval-ms must be non-negative")
        sync = repr(float(args.sync_interval_ms))
    task = {
        "kind": args.task,
        "grid": _grid(args.steps) if args.steps else DEFAULT_GRID,
        "regularization": args.reg,
        "decay": args.decay,
        "anchor_fraction": args.anchor_fraction,
        "overrides": {
            "access": args.force_access,
            "model_replication": args.force_model_rep,
            "data_replication": args.force_data_rep,
            "epsilon": args.epsilon,
            "sync": sync,
        },
        "stop": {"max_epochs": args.epochs, "loss_target": args.loss_target, "timeout": args.timeout},
    }
    return m, source, task


def cmd_train(args):
    settings = _settings(args)
    m, source, task = _train_inputs(args, settings)
    topology = _topology(settings)
    seed = settings["seed"]
    stop = {"max_epochs": 100, "loss_target": None, "timeout": None, **{k: v for k, v in task["stop"].items() if v is not None}}
    anchors = _anchors(task["kind"], m, task["anchor_fraction"], seed)
    if m.labels is None or Kind(task["kind"]) in (Kind.QP, Kind.LP):
        m = m.with_labels(m.labels if m.labels is not None else np.zeros(m.n_rows))
    source = {**source, "anchor_fraction": task["anchor_fraction"], "stop": stop}
    overrides = {**task["overrides"], "source": source}

    def spec_for(eta):
        try:
            return make_spec(task["kind"], m.n_cols, eta, task["regularization"], task["decay"], anchors)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    probe = plan(spec_for(task["grid"][0]), m, topology, overrides, seed, settings["alpha"], settings["memory_cap"])
    optimum = args.optimum if getattr(args, "optimum", None) is not None else optimal_loss(probe.spec, m)

    runs, failures = [], []
    for eta in task["grid"]:
        p = plan(spec_for(eta), m, topology, overrides, seed, settings["alpha"], settings["memory_cap"])
        try:
            train(p, max_epochs=1)  # warm-up, excluded from reported times
            result = train(p, **stop)
        except NumericalError as exc:
            failures.append((eta, str(exc)))
            continue
        runs.append((eta, result))
    if not runs:
        raise NumericalError("every step size diverged: " + "; ".join(f"{e:g}: {msg}" for e, msg in failures))

    fmt = args.format or "json"
    out = Path(args.out or "train-out")
    files, summary = {}, []
    for eta, result in runs:
        stem = f"run-eta{eta:g}"
        if fmt == "json":
            body = json.loads(result.to_json())
            body["optimum"] = optimum
            files[out / f"{stem}.json"] = json.dumps(body, indent=2) + "\n"
        else:
            files[out / f"{stem}.csv"] = "# plan: " + json.dumps(result.plan) + "\n" + result.to_csv()
        row = {"step_size": eta, "final_loss": result.final_loss, "epochs": result.epochs, "stop_reason": result.stop_reason}
        for x in THRESHOLDS:
            row[f"ms_to_{int(x * 100)}pct"] = time_to_within(result.trace, optimum, x)
            row[f"epochs_to_{int(x * 100)}pct"] = epochs_to_within(result.trace, optimum, x)
        summary.append(row)
    for eta, msg in failures:
        summary.append({"step_size": eta, "final_loss": None, "epochs": None, "stop_reason": "diverged"})

    def rank(r):
        t = r.get("ms_to_1pct")
        return (t is None, t if t is not None else 0.0, r["final_loss"] if r["final_loss"] is not None else np.inf)

    best = min(summary, key=rank)
    report = {"optimum": optimum, "best": best, "plan": probe.echo(), "grid": summary}
    if fmt == "json":
        files[out / "summary.json"] = json.dumps(report, indent=2) + "\n"
    else:
        keys = list(max(summary, key=len).keys())
        files[out / "summary.csv"] = _csv(keys, [[_num(r.get(k)) for k in keys] for r in summary])
    write_all(files)

    echo = probe.echo()
    print(
        f"plan: access={echo['access']} model_replication={echo['model_replication']} "
        f"data_replication={echo['data_replication']} replicas={echo['n_replicas']} "
        f"workers={topology.n_workers} sync={echo['sync']}"
    )
    print(f"optimum loss: {optimum:.6g}")
    head = ["step", "final_loss", "epochs"] + [f"t{int(x * 100)}%_ms" for x in THRESHOLDS]
    print("  ".join(f"{h:>12}" for h in head))
    for r in summary:
        cells = [r["step_size"], r["final_loss"], r["epochs"]] + [r.get(f"ms_to_{int(x * 100)}pct") for x in THRESHOLDS]
        print("  ".join(f"{'-' if c is None else format(c, '.4g'):>12}" for c in cells))
    print(f"best step size: {best['step_size']:g}")
    return EXIT_OK


# -- sweep-crossover ---------------------------------------------------------------------------


def sweep_crossover(m, spec, fractions=DEFAULT_FRACTIONS, seed=0, alpha=config.DEFAULT_ALPHA, topology=None, repeats=1):
    """Per keep fraction: cost ratio and one timed epoch per access method.

    Each measurement follows one untimed warm-up epoch; with ``repeats > 1``
    the fastest of that many timed epochs is kept.
    """
    column = spec.column_access
    if column is None or Access.ROW not in spec.kernels:
        raise UsageError("the sweep needs a task with both row and column kernels")
    rows = []
    for f in fractions:
        mm = subsample_rows(m, f, seed)
        s = stats(mm)
        times = {}
        for access in (Access.ROW, column):
            p = plan(spec, mm, topology, {"access": access, "model_replication": "permachine"}, seed, alpha)
            with Session(p) as session:
                session.run_epoch()
                times[access] = min(session.run_epoch().wall_ms for _ in range(repeats))
        rows.append(
            {
                "keep_fraction": f,
                "cost_ratio": cost_ratio(s, spec.update_sparsity, alpha),
                "row_epoch_ms": times[Access.ROW],
                "col_epoch_ms": times[column],
                "N": s.N,
                "d": s.d,
                "sum_ni": s.sum_ni,
                "sum_ni_sq": s.sum_ni_sq,
                "alpha": alpha,
                "update_sparsity": spec.update_sparsity.value,
            }
        )
    return rows


def _fractions(text):
    try:
        out = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad fraction list {text!r}") from None
    if not out or any(not 0 < f <= 1 for f in out):
        raise UsageError("keep fractions must lie in (0, 1]")
    return out


def cmd_sweep_crossover(args):
    settings = _settings(args)
    m, _ = _load_data(args, settings["seed"])
    if m.format.value != "sparse":
        raise UsageError("sweep-crossover needs a sparse dataset")
    try:
        spec = make_spec(args.task, m.n_cols, args.step, args.reg, anchors=_anchors(args.task, m, 0.1, settings["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if m.labels is None:
        m = m.with_labels(np.zeros(m.n_rows))
    fractions = _fractions(args.fractions) if args.fractions else DEFAULT_FRACTIONS
    rows = sweep_crossover(m, spec, fractions, settings["seed"], settings["alpha"], _topology(settings), args.repeats)
    keys = list(rows[0])
    if (args.format or "csv") == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = _csv(keys, [[_num(r[k]) for k in keys] for r in rows])
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- calibrate -------------------------------------------------------------------------------


def cmd_calibrate(args):
    settings = _settings(args)
    if args.trial_size < 1:
        raise UsageError("--trial-size must be positive")
    alpha = calibrate_alpha(
        _topology(settings), args.trial_size, settings["seed"], config_path=args.config, persist=not args.dry_run
    )
    where = "not stored" if args.dry_run else f"stored in {args.config or config.default_config_path()}"
    print(f"alpha = {alpha:.4g} ({where})")
    return EXIT_OK


# -- gibbs --------------------------------------------------------------------------------------


def _load_graph(args, seed):
    if bool(args.graph) == bool(args.recipe):
        raise UsageError("give exactly one of --graph or --recipe")
    if args.recipe:
        parts = shlex.split(args.recipe)
        if not parts or parts[0] != "ising-chain":
            raise UsageError("gibbs recipes: 'ising-chain V coupling'")
        return datagen.generate(parts[0], parts[1:], seed)
    path = Path(args.graph)
    if not path.is_file():
        raise UsageError(f"no such factor graph: {path}")
    return gibbs.load_factor_graph(path)


def cmd_gibbs(args):
    settings = _settings(args)
    g = _load_graph(args, settings["seed"])
    topology = _topology(settings)
    strategies = ["pernode", "permachine"] if args.compare else [args.strategy]
    report = {"n_vars": g.n_vars, "n_factors": g.n_factors, "topology": topology.echo(), "runs": []}
    samples_csv = None
    for s in strategies:
        r = gibbs.run_chains(
            g, s, topology, args.sweeps, args.burn_in, settings["seed"],
            store_samples=bool(args.samples), memory_cap=settings["memory_cap"],
        )
        report["runs"].append(
            {
                "strategy": s,
                "chains": r.n_chains,
                "draws": r.draws,
                "seconds": r.seconds,
                "samples_per_sec": r.throughput,
                "marginals": r.marginals().tolist(),
            }
        )
        if args.samples and samples_csv is None:
            rows = []
            for chain, smp in enumerate(r.samples):
                for sweep, values in enumerate(smp):
                    rows.extend((chain, sweep + args.burn_in, v, int(val)) for v, val in enumerate(values))
            samples_csv = _csv(["chain", "sweep", "var", "value"], rows)
    if args.exact:
        report["exact_marginals"] = gibbs.exact_marginals(g).tolist()
    files = {}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        files[Path(args.out)] = text
    if samples_csv is not None:
        files[Path(args.samples)] = samples_csv
    write_all(files)
    for run in report["runs"]:
        print(f"{run['strategy']:>10}: {run['samples_per_sec']:.4g} samples/sec over {run['chains']} chain(s)")
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


# -- bench-sum ----------------------------------------------------------------------------------


def cmd_bench_sum(args):
    settings = _settings(args)
    if args.size < 0:
        raise UsageError("--size must be non-negative")
    topology = _topology(settings)
    values = np.random.default_rng([settings["seed"], 0x5E7]).random(args.size)
    rows = []
    for strategy in (SumStrategy.SHARED_SINGLE, SumStrategy.PER_NODE):
        best = None
        for _ in range(args.repeats):
            r = parallel_sum(values, topology, strategy)
            if best is None or r.seconds < best.seconds:
                best = r
        rows.append({"strategy": strategy.value, "sum": best.total, "seconds": best.seconds, "gb_per_s": best.gb_per_s(args.size)})
    if (args.format or "csv") == "json":
        text = json.dumps({"size": args.size, "topology": topology.echo(), "rows": rows}, indent=2) + "\n"
    else:
        text = _csv(list(rows[0]), [[_num(v) for v in r.values()] for r in rows])
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# -- gen --------------------------------------------------------------------------------------------


def cmd_gen(args):
    settings = _settings(args)
    if args.recipe not in datagen.RECIPES:
        raise UsageError(f"unknown recipe {args.recipe!r}; choose from {', '.join(datagen.RECIPES)}")
    try:
        obj = datagen.generate(args.recipe, args.params, settings["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out or f"{args.recipe}.{'fg' if args.recipe == 'ising-chain' else 'svm'}")
    with tempfile.TemporaryDirectory() as tmp:
        staged = Path(tmp) / out.name
        if args.recipe == "ising-chain":
            gibbs.save_factor_graph(obj, staged)
        elif args.binary:
            save_binary(obj, staged)
        else:
            save_svmlight(obj, staged)
        atomic_write(out, staged.read_bytes())
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------------


def _add_common(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--nodes", type=int, default=d, help="locality groups")
    p.add_argument("--cores-per-node", type=int, default=d, help="workers per group")
    p.add_argument("--pin", choices=["os", "numa"], default=d, help="worker placement")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--alpha", type=float, default=d, help="write/read cost factor")
    p.add_argument("--out", default=d, help="output file or directory")
    p.add_argument("--format", choices=["csv", "json"], default=d)
    p.add_argument("--config", default=d, help="key = value config file")


def build_parser():
    parser = argparse.ArgumentParser(prog="statengine", description="Parallel first-order solvers and Gibbs sampling.")
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--data", help="svmlight, binary cache (.dwmx) or edge list (.tsv)")
        p.add_argument("--recipe", help="synthetic recipe, e.g. 'gaussian 1000 50 0.1'")

    p = sub.add_parser("train", help="train over a step-size grid")
    _add_common(p, suppress=True)
    data_args(p)
    p.add_argument("--task", choices=[k.value for k in Kind])
    p.add_argument("--steps", help="comma-separated step sizes (default 100,10,...,0.0001)")
    p.add_argument("--reg", type=float, default=0.0, help="L2 regularization")
    p.add_argument("--decay", type=float, default=0.95, help="per-epoch step decay")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default 100)")
    p.add_argument("--loss-target", type=float)
    p.add_argument("--timeout", type=float, help="seconds of epoch time")
    p.add_argument("--force-access", choices=[a.value for a in Access])
    p.add_argument("--force-model-rep", choices=["percore", "pernode", "permachine"])
    p.add_argument("--force-data-rep", choices=["sharding", "full", "importance"])
    p.add_argument("--epsilon", type=float, help="importance sampling accuracy")
    p.add_argument("--sync-interval-ms", type=float, help="pause between averaging passes")
    p.add_argument("--anchor-fraction", type=float, default=0.1, help="anchored vertices for qp/lp")
    p.add_argument("--optimum", type=float, help="known optimal loss (skips the reference solve)")
    p.add_argument("--replay", help="re-run the plan echoed in a JSON trace")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-crossover", help="row vs column epoch time over row subsampling")
    _add_common(p, suppress=True)
    data_args(p)
    p.add_argument("--task", choices=[k.value for k in Kind], default="svm")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--reg", type=float, default=0.01, help="L2 regularization (non-zero makes row updates dense)")
    p.add_argument("--fractions", help="comma-separated keep fractions")
    p.add_argument("--repeats", type=int, default=1, help="timed epochs per point (fastest kept)")
    p.set_defaults(func=cmd_sweep_crossover)

    p = sub.add_parser("calibrate", help="measure and store alpha")
    _add_common(p, suppress=True)
    p.add_argument("--trial-size", type=int, default=1 << 23)
    p.add_argument("--dry-run", action="store_true", help="print without storing")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gibbs", help="Gibbs sampling with per-node or shared chains")
    _add_common(p, suppress=True)
    p.add_argument("--graph", help="factor graph text file")
    p.add_argument("--recipe", help="'ising-chain V coupling'")
    p.add_argument("--strategy", choices=["pernode", "permachine"], default="pernode")
    p.add_argument("--compare", action="store_true", help="run both strategies")
    p.add_argument("--sweeps", type=int, default=10000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--exact", action="store_true", help="add brute-force marginals")
    p.add_argument("--samples", help="also write samples as CSV (chain,sweep,var,value)")
    p.set_defaults(func=cmd_gibbs)

    p = sub.add_parser("bench-sum", help="parallel sum throughput")
    _add_common(p, suppress=True)
    p.add_argument("--size", type=int, default=1 << 24)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench_sum)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    _add_common(p, suppress=True)
    p.add_argument("recipe", help=", ".join(datagen.RECIPES))
    p.add_argument("params", nargs="*")
    p.add_argument("--binary", action="store_true", help="binary cache instead of svmlight")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"statengine: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StatEngineError, ValueError, OSError, MemoryCapError, PlanError, CalibrationError) as exc:
        print(f"statengine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
