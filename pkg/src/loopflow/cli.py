"""Command-line entry point.

Exit status: 0 success, 1 domain or input error, 2 non-convergence (partial
outputs are still written).  Every output file starts with a header line
``# loopflow <version> seed=<seed> config=<hash>``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .benchmarks import LPS, load_bundled
from .estimator import (
    EstimatorOptions,
    FlowMeasurement,
    HeadMeasurement,
    MeasurementSet,
    RegionMask,
    constrain_region,
    estimate,
    region_nodes,
    state_names,
)
from .gfmm import GFMMModel, Pattern, train
from .network import Network, load_network, network_to_dict
from .scenarios import (
    DD_MODE,
    STATE_MODE,
    LeakScenario,
    MeasurementConfig,
    demand_profile,
    events_from_dicts,
    evaluate_misclassification,
    extended_time_simulation,
    fault_pattern,
    generate_training_set,
    hourly_demands,
    household_events,
    inject_leak,
    read_dataset_csv,
    write_dataset_csv,
)
from .simulator import SimulationOptions, solve_cotree
from .topology import build_spanning_tree, trace_loops
from .uncertainty import CLASystem, UncertaintySpec, em_limits, esm_build, esm_limits, loop_sensitivity_limits

CONFIG_ENV = "LOOPFLOW_CONFIG_DIR"
DEFAULT_SEED = 20240101

EXIT_OK, EXIT_DOMAIN, EXIT_NONCONVERGED = 0, 1, 2


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# inputs


def resolve_path(name: str) -> Path:
    """A path as given, else relative to $LOOPFLOW_CONFIG_DIR."""
    p = Path(name)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_ENV)
    if base and (Path(base) / name).exists():
        return Path(base) / name
    raise DomainError(f"file not found: {name}")


def read_network(name: str) -> Network:
    """Network from a JSON file, or a bundled name such as ``desk34``."""
    try:
        return load_network(resolve_path(name))
    except DomainError:
        stem = Path(name).stem
        try:
            return load_bundled(stem)
        except (FileNotFoundError, OSError):
            raise DomainError(f"network not found: {name}") from None


def read_demands(path: str, net: Network) -> np.ndarray:
    """CSV with columns ``node,demand_lps``; unlisted nodes keep their demand."""
    d = net.demands().copy()
    with open(resolve_path(path), newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            d[net.node_pos(int(row["node"]))] = float(row["demand_lps"]) * LPS
    return d


def read_measurements(path: str | None, net: Network) -> MeasurementSet:
    """Measurement JSON; flows in l/s.  Without a file: demands and boundaries only."""
    if path is None:
        return MeasurementSet.from_network(net)
    with open(resolve_path(path)) as fh:
        cfg = json.load(fh)
    if "demands_lps" in cfg:
        net = net.with_values(demands={int(k): float(v) * LPS for k, v in cfg["demands_lps"].items()})
    hm = [HeadMeasurement(int(m["node"]), float(m["value"]), float(m.get("accuracy", 0.1))) for m in cfg.get("head_meas", [])]
    fm = [
        FlowMeasurement(int(m["pipe"]), float(m["value_lps"]) * LPS, float(m.get("accuracy_lps", 1.0)) * LPS)
        for m in cfg.get("flow_meas", [])
    ]
    return MeasurementSet.from_network(
        net,
        hm,
        fm,
        float(cfg.get("variability", 0.2)),
        float(cfg.get("fixed_head_accuracy", 0.01)),
        float(cfg.get("inflow_accuracy", 0.01)),
    )


def config_hash(args: argparse.Namespace) -> str:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def header(args: argparse.Namespace) -> str:
    return f"# loopflow {__version__} seed={getattr(args, 'seed', DEFAULT_SEED)} config={config_hash(args)}"


def write_csv(path: str, head: str, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(head + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(r)


def write_json(path: str, head: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump({"header": head, **obj}, fh, indent=1)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    net = read_network(args.network)
    d = read_demands(args.demands, net) if args.demands else None
    tree = build_spanning_tree(net, args.root)
    loops = trace_loops(tree, net)
    res = solve_cotree(net, tree, loops, d, SimulationOptions(tol=args.tol, max_iter=args.max_iter, enhancement=not args.no_enhancement))
    rows = [("pipe", pp.id, res.flows[i] / LPS, "") for i, pp in enumerate(net.pipes)]
    rows += [("node", nd.id, "", res.heads[i]) for i, nd in enumerate(net.nodes)]
    rows += [("inflow", nid, q / LPS, "") for nid, q in sorted(res.inflows.items())]
    write_csv(args.out, header(args), ["kind", "id", "flow_lps", "head_m"], rows)
    print(f"{res.message}; {res.iterations} iterations")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def _estimate_setup(args):
    net = read_network(args.network)
    meas = read_measurements(args.meas, net)
    net_m = meas.apply(net)
    tree = build_spanning_tree(net_m, args.root)
    loops = trace_loops(tree, net_m)
    mask = RegionMask.full(tree)
    if args.radius is not None:
        mask = constrain_region(mask, region_nodes(tree, meas, net_m, args.radius))
    opts = EstimatorOptions(weighted=args.weighted, pure_gn=args.pure_gn)
    return net_m, tree, loops, meas, mask, opts


def cmd_estimate(args) -> int:
    net, tree, loops, meas, mask, opts = _estimate_setup(args)
    est = estimate(net, tree, loops, meas, mask, opts)
    x = est.state_vector(net)
    rows = [(name, v) for name, v in zip(state_names(net), x)]
    write_csv(args.out, header(args), ["variable", "value"], rows)
    print(f"{est.message}; {est.iterations} iterations")
    return EXIT_OK if est.converged else EXIT_NONCONVERGED


def cmd_cla(args) -> int:
    net, tree, loops, meas, mask, opts = _estimate_setup(args)
    spec_d = {}
    if args.spec:
        with open(resolve_path(args.spec)) as fh:
            spec_d = json.load(fh)
    spec = UncertaintySpec(**spec_d)
    system = CLASystem(net, tree, loops, mask, opts)
    if args.method == "esm":
        lim = esm_limits(esm_build(system, meas, spec, central=args.central))
    elif args.method == "em":
        lim = em_limits(system, meas, spec, args.direction)
    else:
        lim = loop_sensitivity_limits(net, tree, loops, spec=spec)
    rows = [(n, e, lo, up, lim.method) for n, e, lo, up in zip(lim.names, lim.estimate, lim.lower, lim.upper)]
    write_csv(args.out, header(args), ["variable", "estimate", "lower", "upper", "method"], rows)
    print(f"{lim.method}: {lim.runs} estimator runs; flagged {lim.flagged}")
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.events:
        with open(resolve_path(args.events)) as fh:
            events = events_from_dicts(json.load(fh))
    else:
        events = household_events()
    prof = demand_profile(events, args.horizon, args.step, args.seed)
    rows = [(t, v, r) for t, v, r in zip(prof.times, prof.volumes, prof.rates)]
    write_csv(args.out, header(args), ["t_s", "volume_l", "rate_lps"], rows)
    return EXIT_OK


def cmd_inject_leak(args) -> int:
    net = read_network(args.network)
    tree = build_spanning_tree(net, args.root)
    loops = trace_loops(tree, net)
    inj = inject_leak(net, tree, loops, LeakScenario(args.pipe, args.magnitude_lps * LPS))
    write_json(args.out, header(args), network_to_dict(inj.net))
    print(f"leak node {inj.node}, new pipe {inj.new_pipe}")
    return EXIT_OK


def cmd_xts(args) -> int:
    net = read_network(args.network)
    tree = build_spanning_tree(net, args.root)
    loops = trace_loops(tree, net)
    dem = hourly_demands(net)[: args.hours]
    res = extended_time_simulation(net, tree, loops, dem, opts=SimulationOptions(tol=args.tol))
    rows = []
    for hr in res:
        for i, nd in enumerate(net.nodes):
            rows.append((hr.hour, "node", nd.id, hr.result.heads[i], int(hr.result.converged)))
        for i, pp in enumerate(net.pipes):
            rows.append((hr.hour, "pipe", pp.id, hr.result.flows[i] / LPS, int(hr.result.converged)))
    write_csv(args.out, header(args), ["hour", "kind", "id", "value", "converged"], rows)
    return EXIT_OK if all(h.result.converged for h in res) else EXIT_NONCONVERGED


def _levels(args) -> list[float]:
    if args.level_values:
        return [float(v) for v in args.level_values.split(",")]
    return [round(0.002 + 0.003 * i, 3) for i in range(args.levels)]


def cmd_gen_dataset(args) -> int:
    net = read_network(args.network)
    pipes = [int(p) for p in args.pipes.split(",")] if args.pipes else None
    cfg = MeasurementConfig(variability=args.variability, radius=args.radius)
    ds = generate_training_set(
        net, _levels(args), args.hours, cfg, pipes, args.mode, args.noise_seed, args.jobs, root=args.root
    )
    write_dataset_csv(ds, args.out, header(args))
    print(f"{len(ds)} rows; {len(ds.failures)} failed cells")
    return EXIT_OK if not ds.failures else EXIT_NONCONVERGED


def _patterns(ds) -> list[Pattern]:
    return [Pattern(np.clip(r.lower, 0, 1), np.clip(r.upper, 0, 1), r.label) for r in ds.rows]


def cmd_train(args) -> int:
    ds = read_dataset_csv(resolve_path(args.dataset))
    model = GFMMModel.create(len(ds.dims), args.gamma, args.theta, args.theta_min, ds.class_names)
    train(model, _patterns(ds))
    d = model.to_dict()
    d["header"] = header(args)
    d["dims"] = ds.dims
    with open(args.out, "w") as fh:
        json.dump(d, fh)
    print(f"{model.n_boxes} hyperboxes; {model.report.message}")
    return EXIT_OK


def _load_model(path) -> GFMMModel:
    with open(resolve_path(path)) as fh:
        return GFMMModel.from_dict(json.load(fh))


def cmd_classify(args) -> int:
    model = _load_model(args.model)
    ds = read_dataset_csv(resolve_path(args.dataset))
    rows = []
    for i, r in enumerate(ds.rows):
        ranked = model.classify(r.lower, r.upper, args.top)
        rows.append([i, r.label] + [f"{c}:{m:.6f}" for c, m in ranked])
    cols = ["row", "label"] + [f"rank_{k + 1}" for k in range(args.top)]
    write_csv(args.out, header(args), cols, rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    ds = read_dataset_csv(resolve_path(args.dataset))
    ks = [int(k) for k in args.topk.split(",")]
    rates = evaluate_misclassification(lambda lo, up: model.classify(lo, up), ds, ks)
    write_csv(args.out, header(args), ["top_k", "misclassification_rate"], sorted(rates.items()))
    for k in ks:
        print(f"top-{k}: {rates[k]:.4f}")
    return EXIT_OK


def cmd_topology_dump(args) -> int:
    net = read_network(args.network)
    tree = build_spanning_tree(net, args.root)
    loops = trace_loops(tree, net)
    obj = {
        "root": tree.root,
        "labels": {str(nid): j for nid, j in tree.label.items()},
        "tree_pipes": list(tree.tree_pipes),
        "chord_pipes": list(tree.chord_pipes),
        "pseudo_nodes": list(loops.pseudo_nodes),
        "M_lp": loops.M_lp.astype(int).tolist(),
        "A": loops.A.astype(int).tolist(),
    }
    write_json(args.out, header(args), obj)
    return EXIT_OK


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class FaultDetectionConfig:
    network: Network
    model: GFMMModel
    leak: LeakScenario | None = None
    hour: int = 9
    meas: MeasurementConfig = field(default_factory=MeasurementConfig)
    mode: str = DD_MODE
    noise_seed: int | None = None


@dataclass
class FaultReport:
    predicted: int
    predicted_name: str
    truth: int | None
    truth_name: str
    ranking: list
    correct: bool | None


def pipeline_fault_detection(cfg: FaultDetectionConfig) -> FaultReport:
    """Simulate the faulted network, estimate, bound, classify and compare."""
    names = cfg.model.class_names
    try:
        _dims, lo, up = fault_pattern(cfg.network, cfg.leak, cfg.hour, cfg.meas, cfg.mode, noise_seed=cfg.noise_seed)
    except Exception as exc:
        raise RuntimeError(f"pattern stage failed: {exc}") from exc
    try:
        ranking = cfg.model.classify(lo, up)
    except Exception as exc:
        raise RuntimeError(f"classification stage failed: {exc}") from exc
    pred = ranking[0][0]
    truth_name = "normal" if cfg.leak is None else f"pipe_{cfg.leak.pipe}"
    inv = {v: k for k, v in names.items()}
    truth = inv.get(truth_name)
    return FaultReport(pred, names.get(pred, str(pred)), truth, truth_name, ranking[:5], None if truth is None else pred == truth)


def cmd_detect(args) -> int:
    net = read_network(args.network)
    model = _load_model(args.model)
    leak = LeakScenario(args.pipe, args.magnitude_lps * LPS) if args.pipe else None
    rep = pipeline_fault_detection(FaultDetectionConfig(net, model, leak, args.hour, noise_seed=args.noise_seed))
    write_json(
        args.out,
        header(args),
        {
            "predicted": rep.predicted,
            "predicted_name": rep.predicted_name,
            "truth": rep.truth,
            "truth_name": rep.truth_name,
            "correct": rep.correct,
            "ranking": [[c, m] for c, m in rep.ranking],
        },
    )
    print(f"predicted {rep.predicted_name}; truth {rep.truth_name}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopflow", description="Loop-flow hydraulics, state estimation and leak classification.")
    ap.add_argument("--version", action="version", version=f"loopflow {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        return p

    def net_args(p, out=True):
        p.add_argument("--network", required=True, help="network JSON file or bundled name")
        p.add_argument("--root", type=int, default=None)
        if out:
            p.add_argument("--out", required=True)

    p = add("simulate", cmd_simulate, "steady-state hydraulics")
    net_args(p)
    p.add_argument("--demands", help="CSV node,demand_lps")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--no-enhancement", action="store_true")

    for name, func, help_ in (("estimate", cmd_estimate, "state estimation"), ("cla", cmd_cla, "confidence limits")):
        p = add(name, func, help_)
        net_args(p)
        p.add_argument("--measurements", "--meas", dest="meas", help="measurement JSON")
        p.add_argument("--region-radius", "--radius", dest="radius", type=int, default=None)
        p.add_argument("--weighted", action="store_true")
        p.add_argument("--pure-gn", action="store_true")
        if name == "cla":
            p.add_argument("--method", choices=("esm", "em", "loopsens"), default="em")
            p.add_argument("--spec", help="uncertainty JSON")
            p.add_argument("--direction", choices=("lower", "upper", "both"), default="both")
            p.add_argument("--central", action="store_true")

    p = add("profile", cmd_profile, "stochastic demand profile")
    p.add_argument("--events", help="event list JSON (default: household table)")
    p.add_argument("--horizon", type=float, default=86400.0)
    p.add_argument("--step", type=float, default=60.0)
    p.add_argument("--out", required=True)

    p = add("inject-leak", cmd_inject_leak, "split a pipe around a leak node")
    net_args(p)
    p.add_argument("--pipe", type=int, required=True)
    p.add_argument("--magnitude-lps", type=float, required=True)

    p = add("xts", cmd_xts, "extended-time simulation")
    net_args(p)
    p.add_argument("--hours", type=int, default=24)
    p.add_argument("--tol", type=float, default=1e-6)

    p = add("gen-dataset", cmd_gen_dataset, "labelled leak patterns")
    net_args(p)
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--level-values", help="comma-separated leak levels, m3/s")
    p.add_argument("--hours", type=int, default=24)
    p.add_argument("--pipes", help="comma-separated pipe ids (default: eligible set)")
    p.add_argument("--mode", choices=(DD_MODE, STATE_MODE), default=DD_MODE)
    p.add_argument("--variability", type=float, default=0.1)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = add("train", cmd_train, "train a GFMM model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--theta-min", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--out", required=True)

    p = add("classify", cmd_classify, "rank classes per pattern")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "top-k misclassification rates")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--topk", default="1,2,3,5")
    p.add_argument("--out", required=True)

    p = add("topology-dump", cmd_topology_dump, "labels, loops and incidence matrices")
    net_args(p)

    p = add("detect", cmd_detect, "end-to-end fault detection for one hour")
    net_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pipe", type=int, default=0, help="leak pipe (0: no leak)")
    p.add_argument("--magnitude-lps", type=float, default=0.0)
    p.add_argument("--hour", type=int, default=9)
    p.add_argument("--noise-seed", type=int, default=None)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DomainError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"loopflow-error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
