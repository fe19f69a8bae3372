"""Command-line entry point.

Exit codes: 0 success, 1 planning/validation error (a JSON report goes to
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation import HetAnnotation, SliceRegion
from .bsr import BsrPlan, Transfer, render_volume_table, volume_report
from .deduction import deduce_graph
from .errors import ShardingError
from .graph import SCHEMA_VERSION, CompGraph
from .resolve import classify
from .sim import VirtualCluster, oracle_run, run
from .specialize import assign_schedule, build_context, construct_pipelines, instantiate_all
from .switch import diff_strategies, plan_switch
from .tensorio import load_tensors, save_tensors


class CliError(ShardingError):
    module = "cli"


# ---------------------------------------------------------------------------
# helpers


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from None


def _emit(data, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _bindings(items: Sequence[str] | None) -> dict[str, int]:
    out = {}
    for item in items or []:
        for part in item.split(","):
            if not part:
                continue
            name, sep, value = part.partition("=")
            if not sep:
                raise CliError(f"binding {part!r} is not of the form SYMBOL=VALUE")
            try:
                out[name.strip()] = int(value)
            except ValueError:
                raise CliError(f"binding {part!r} needs an integer value") from None
    return out


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise CliError(f"bad shape {text!r}") from None


def _graph(path, strategy: int | None = None) -> CompGraph:
    g = CompGraph.from_json(_read_json(path))
    targets = range(g.strategy_count) if strategy is None else [strategy]
    for s in targets:
        if not 0 <= s < g.strategy_count:
            raise CliError(f"strategy {s} out of range (graph has {g.strategy_count})")
        if s not in g.deduced:
            deduce_graph(g, s)
    return g


def _cluster(path, graph: CompGraph | None = None) -> VirtualCluster:
    if path:
        return VirtualCluster.from_json(_read_json(path))
    devices = set()
    if graph is not None:
        for t in graph.tensors.values():
            for a in t.annotations:
                if a is not None:
                    devices.update(a.devices)
    return VirtualCluster.uniform(max(devices, default=0) + 1)


def _annotation(path) -> HetAnnotation:
    data = _read_json(path)
    return HetAnnotation.from_json(data.get("annotation", data))


# ---------------------------------------------------------------------------
# subcommands


def cmd_deduce(args) -> int:
    g = _graph(args.graph, args.strategy)
    _emit(g.to_json(annotated=True), args.out)
    return 0


def cmd_plan_comm(args) -> int:
    src, dst = _annotation(args.src), _annotation(args.dst)
    cluster = VirtualCluster.from_json(_read_json(args.cluster)) if args.cluster else None
    plan = classify(src, dst, _shape(args.shape), bandwidth=None if cluster is None else cluster.bandwidth,
                    itemsize=args.itemsize)
    data = plan.to_json()
    data["traffic"] = [{"sender": s, "receiver": r, "bytes": n} for (s, r), n in sorted(plan.predicted_traffic().items())]
    _emit(data, args.out)
    return 0


def cmd_specialize(args) -> int:
    g = _graph(args.graph, args.strategy)
    ctx = build_context(g, args.strategy, _bindings(args.bindings))
    execs = instantiate_all(g, ctx)
    docs = {d: e.to_json(g) for d, e in execs.items()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for d, doc in docs.items():
            (out / f"device_{d}.json").write_text(json.dumps(doc, indent=2) + "\n")
        print(f"wrote {len(docs)} executable graphs to {out}")
    else:
        _emit({"version": SCHEMA_VERSION, "exec_graphs": list(docs.values())}, None)
    return 0


def cmd_pipelines(args) -> int:
    g = _graph(args.graph, args.strategy)
    pipes = construct_pipelines(g, args.strategy, _bindings(args.bindings))
    _emit({"version": SCHEMA_VERSION, "kind": "pipelines", "strategy": args.strategy,
           "pipelines": [p.to_json() for p in pipes]}, args.out)
    return 0


def _schedule(args, g, pipes, bindings):
    if args.schedule:
        spec = _read_json(args.schedule)
        counts, sizes = spec["counts"], spec["sizes"]
    else:
        total = bindings.get(args.batch_symbol)
        if total is None:
            raise CliError(f"--bindings must bind {args.batch_symbol} when no --schedule is given")
        n = len(pipes)
        counts = [1] * n
        sizes = [total // n + (1 if p < total % n else 0) for p in range(n)]
        bindings = {k: v for k, v in bindings.items() if k != args.batch_symbol}
    return assign_schedule(g, pipes, counts, sizes, batch_symbol=args.batch_symbol, bindings=bindings)


def _schedule_total(spec) -> int:
    counts, sizes = spec["counts"], spec["sizes"]
    if isinstance(sizes, int):
        return sizes * sum(counts)
    return sum(s * c if isinstance(s, int) else sum(s) for s, c in zip(sizes, counts))


def cmd_simulate(args) -> int:
    g = _graph(args.graph, args.strategy)
    bindings = _bindings(args.bindings)
    if args.schedule and args.batch_symbol not in bindings:
        bindings[args.batch_symbol] = _schedule_total(_read_json(args.schedule))
    cluster = _cluster(args.cluster, g)
    pipes = construct_pipelines(g, args.strategy, bindings, bandwidth=cluster.bandwidth)
    schedule = _schedule(args, g, pipes, bindings)
    shapes = g.bind_symbols(schedule.bindings)
    leaves = [n.output for n in g.topo_order() if n.is_leaf]
    if args.inputs:
        inputs = load_tensors(args.inputs)
        missing = [t for t in leaves if t not in inputs]
        if missing:
            raise CliError(f"input file lacks leaves {missing}")
    else:
        rng = np.random.default_rng(args.seed)
        inputs = {t: rng.standard_normal(shapes[t]) for t in leaves}
    result = run(cluster, g, args.strategy, schedule, inputs)
    oracle = oracle_run(g, inputs, schedule.bindings)
    errors = {}
    for t, v in result.outputs.items():
        ref = oracle[t]
        scale = max(float(np.max(np.abs(ref))), 1e-30)
        errors[t] = float(np.max(np.abs(v - ref))) / scale if v.size else 0.0
    report = {
        "version": SCHEMA_VERSION,
        "kind": "simulation",
        "strategy": args.strategy,
        "schedule": schedule.to_json(),
        "max_relative_error": errors,
        "traffic": [{"sender": s, "receiver": r, "bytes": n} for (s, r), n in sorted(result.traffic.items())],
        "total_bytes": sum(result.traffic.values()),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_tensors(out / "outputs.safetensors", result.outputs)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"outputs and report written to {out}")
    else:
        _emit(report, None)
    return 0


def cmd_switch_plan(args) -> int:
    a, b = int(args.src), int(args.dst)
    g = _graph(args.graph)
    cluster = _cluster(args.cluster, g)
    shapes = g.bind_symbols(_bindings(args.bindings))
    diff = diff_strategies(g, a, b)
    plan = plan_switch(diff, shapes, cluster.bandwidth, itemsize=cluster.itemsize)
    report = volume_report(plan, cluster)
    data = {
        "version": SCHEMA_VERSION,
        "kind": "switch_plan",
        "src_strategy": a,
        "dst_strategy": b,
        "tensors": [e.tensor for e in diff],
        "plan": plan.to_json(),
        "volume": [{"device": d, "intra_node_bytes": x, "inter_node_bytes": y} for d, (x, y) in report.items()],
    }
    _emit(data, args.out)
    if args.out:
        print(render_volume_table(report))
    return 0


def cmd_report(args) -> int:
    data = _read_json(args.plan)
    plan_data = data.get("plan", data)
    if "transfers" not in plan_data:
        raise CliError("report expects a plan with a 'transfers' list")
    plan = BsrPlan(transfers=[
        Transfer(t["tensor"], SliceRegion.from_json(t["region"]), t["sender"], t["receiver"], t["bytes"])
        for t in plan_data["transfers"]
    ])
    if args.cluster:
        cluster = VirtualCluster.from_json(_read_json(args.cluster))
    else:
        devices = {t.sender for t in plan.transfers} | {t.receiver for t in plan.transfers}
        cluster = VirtualCluster.uniform(max(devices, default=0) + 1)
    report = volume_report(plan, cluster)
    print(render_volume_table(report))
    if args.out:
        _emit({"version": SCHEMA_VERSION, "kind": "volume_report",
               "volume": [{"device": d, "intra_node_bytes": x, "inter_node_bytes": y} for d, (x, y) in report.items()],
               "total_bytes": plan.total_bytes}, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetshard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True, strategy=True):
        if graph:
            sp.add_argument("--graph", required=True, help="graph JSON (annotated or not)")
        if strategy:
            sp.add_argument("--strategy", type=int, default=0, help="strategy index")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("deduce", help="fill every tensor's annotation")
    common(sp)
    sp.set_defaults(fn=cmd_deduce)

    sp = sub.add_parser("plan-comm", help="resolve one src -> dst annotation pair")
    common(sp, graph=False, strategy=False)
    sp.add_argument("--src", required=True, help="source annotation JSON")
    sp.add_argument("--dst", required=True, help="destination annotation JSON")
    sp.add_argument("--shape", required=True, help="concrete shape, e.g. 8,4")
    sp.add_argument("--cluster")
    sp.add_argument("--itemsize", type=int, default=8)
    sp.set_defaults(fn=cmd_plan_comm)

    sp = sub.add_parser("specialize", help="per-device executable graphs")
    common(sp)
    sp.add_argument("--bindings", action="append", help="SYMBOL=VALUE[,SYMBOL=VALUE]")
    sp.set_defaults(fn=cmd_specialize)

    sp = sub.add_parser("pipelines", help="infer pipeline and stage structure")
    common(sp)
    sp.add_argument("--bindings", action="append")
    sp.set_defaults(fn=cmd_pipelines)

    sp = sub.add_parser("simulate", help="run on the virtual cluster and compare with the oracle")
    common(sp)
    sp.add_argument("--bindings", action="append")
    sp.add_argument("--cluster")
    sp.add_argument("--inputs", help="safetensors file with a value for every leaf")
    sp.add_argument("--schedule", help='JSON {"counts": [...], "sizes": [...]}')
    sp.add_argument("--batch-symbol", default="B")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("switch-plan", help="fused BSR plan between two strategies")
    common(sp, strategy=False)
    sp.add_argument("--src", required=True, help="source strategy index")
    sp.add_argument("--dst", required=True, help="destination strategy index")
    sp.add_argument("--bindings", action="append")
    sp.add_argument("--cluster")
    sp.set_defaults(fn=cmd_switch_plan)

    sp = sub.add_parser("report", help="per-device intra/inter-node volume of a plan")
    common(sp, graph=False, strategy=False)
    sp.add_argument("--plan", required=True, help="plan JSON from switch-plan")
    sp.add_argument("--cluster")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ShardingError as e:
        report = {"version": SCHEMA_VERSION, "error": e.report()}
        report["error"]["op"] = report["error"]["op"] or args.command
        print(json.dumps(report, indent=2), file=sys.stderr)
        return 1
    except (KeyError, ValueError, TypeError) as e:
        report = {"version": SCHEMA_VERSION, "error": {"module": "cli", "op": args.command, "code": type(e).__name__,
                                                       "message": str(e), "node": None, "tensor": None}}
        print(json.dumps(report, indent=2), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
