"""Command-line front end: check, describe, train, eval, infer.

Exit codes: 0 clean, 1 type/validation findings or runtime errors, 2 usage
or schema errors. Diagnostics are stable strings; types render in the same
grammar the parser accepts, so messages can be tested as golden text.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (
    ConnectionTypeError,
    ConstraintViolationError,
    MissingParamError,
    SchemaError,
    SemaflowError,
    TypeExprError,
    UnknownDescriptorError,
    UnknownParamError,
    UnknownTagError,
)
from .graph import Graph, load_graph
from .modulesys import DataLayerImpl
from .runtime import (
    ActionConfig,
    Callback,
    action_config_from_doc,
    callbacks_from_docs,
    evaluate,
    infer,
    train,
)
from .stdcollection import standard_hierarchy, std_registry
from .typesys import TagHierarchy, hierarchy_from_doc, render_type_expr

#: Errors in the graph/tag documents themselves; mapped to exit code 2.
_SCHEMA_ERRORS = (SchemaError, MissingParamError, UnknownParamError,
                  ConstraintViolationError, UnknownDescriptorError,
                  UnknownTagError, TypeExprError)


def _hierarchy_with_file(path: str | None) -> TagHierarchy:
    """Standard tags plus the user's tag file, when given."""
    if path is None:
        return standard_hierarchy()
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError("$", f"cannot read tag file {path}: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) - {"tags"}:
        raise SchemaError("$", "tag document must be an object with a 'tags' list")
    h = TagHierarchy()
    for name, parent in (("Spectrogram", "Channel"), ("Encoded", "Channel"),
                         ("WordEmbedding", "Embedding"), ("Loss", "Channel")):
        h.define(name, parent)
    for i, entry in enumerate(doc.get("tags", [])):
        if not isinstance(entry, dict) or set(entry) != {"name", "parent"}:
            raise SchemaError(f"$.tags[{i}]", "entry must have exactly 'name' and 'parent'")
        h.define(entry["name"], entry["parent"])
    return h.freeze()


def _load(args, findings: list | None = None) -> tuple[Graph, dict]:
    try:
        with open(args.graph, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise SchemaError("$", f"cannot read graph file {args.graph}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"{args.graph} is not valid JSON: {exc}") from exc

    if args.seed is not None:
        doc = dict(doc)
        doc["seed"] = args.seed

    graph_dir = os.path.dirname(os.path.abspath(args.graph))
    tags_path = args.tags
    if tags_path is None and doc.get("tags_file"):
        tags_path = doc["tags_file"]
        if not os.path.isabs(tags_path):
            tags_path = os.path.join(graph_dir, tags_path)
    reg = std_registry(_hierarchy_with_file(tags_path))

    g = load_graph(doc, reg, auto_cast=args.auto_cast, findings=findings)
    for inst in g.instances.values():
        if isinstance(inst.descriptor.impl, DataLayerImpl):
            inst.base_dir = graph_dir
    return g, doc


def _finding_dicts(type_errors: list, report) -> list[dict]:
    out = []
    for exc in type_errors:
        out.append({"kind": "type", "result": exc.result.name,
                    "from": exc.from_ref, "to": exc.to_ref,
                    "producer_type": exc.producer_type,
                    "consumer_type": exc.consumer_type})
    for i, p in report.unbound_ports:
        out.append({"kind": "unbound", "at": f"{i}.{p}"})
    for cycle in report.cycles:
        out.append({"kind": "cycle", "instances": cycle})
    for i, p in report.unreachable_sinks:
        out.append({"kind": "unreachable_sink", "at": f"{i}.{p}"})
    return out


def cmd_check(args) -> int:
    type_errors: list[ConnectionTypeError] = []
    g, _doc = _load(args, findings=type_errors)
    # Ports left unbound by a failed edge are already reported as type errors.
    failed_ports = {(e.to_ref.split(".")[0], e.to_ref.split(".")[1]) for e in type_errors}
    report = g.validate()
    report.unbound_ports = [p for p in report.unbound_ports if p not in failed_ports]

    findings = _finding_dicts(type_errors, report)
    if args.json:
        print(json.dumps({"ok": not findings, "inserted_casts": g.inserted_casts,
                          "findings": findings}))
    else:
        for exc in type_errors:
            print(f"ERROR {exc.result.name} at {exc.from_ref} -> {exc.to_ref}: "
                  f"{exc.producer_type} vs {exc.consumer_type}")
        for line in report.lines():
            print(line)
        if g.inserted_casts:
            print(f"note: inserted {g.inserted_casts} implicit transpose cast(s)")
    return 1 if findings else 0


def cmd_describe(args) -> int:
    g, _doc = _load(args)
    report = g.validate()
    print(f"graph {args.graph}: {len(g.instances)} instances, seed {g.seed}")
    if report.ok:
        print("topo: " + " -> ".join(g.topo_order()))
    for inst in g.instances.values():
        n_params = sum(p.value.size for p in inst.parameters())
        print(f"instance {inst.id} ({inst.descriptor.name}) parameters={n_params}")
        for port, t in inst.input_types.items():
            print(f"  in  {port}: {render_type_expr(t)}")
        for port, t in inst.output_types.items():
            print(f"  out {port}: {render_type_expr(t)}")
    print("bindings:")
    for b in g.bindings:
        print(f"  {b.src.ref} -> {b.dst_ref} [{b.comparison.name}]")
    if g.sinks:
        print("sinks: " + " ".join(f"{i}.{p}" for i, p in g.sinks))
    for line in report.lines():
        print(line)
    return 0 if report.ok else 1


def _action_config(args, doc, expected: str) -> ActionConfig:
    action_doc = doc.get("action")
    if action_doc is None:
        action_doc = {"action": expected}
    cfg = action_config_from_doc(action_doc)
    if cfg.action != expected:
        cfg = ActionConfig(expected, cfg.max_steps, cfg.batch_size, cfg.optimizer,
                           cfg.accumulation_steps, cfg.seed)
    if args.max_steps is not None:
        cfg = ActionConfig(cfg.action, args.max_steps, cfg.batch_size, cfg.optimizer,
                           cfg.accumulation_steps, cfg.seed)
    if args.seed is not None:
        cfg = ActionConfig(cfg.action, cfg.max_steps, cfg.batch_size, cfg.optimizer,
                           cfg.accumulation_steps, args.seed)
    return cfg


def _validated(g: Graph) -> None:
    report = g.validate()
    if not report.ok:
        raise SemaflowError("graph failed validation: " + "; ".join(report.lines()))


def cmd_train(args) -> int:
    g, doc = _load(args)
    _validated(g)
    cfg = _action_config(args, doc, "train")
    callbacks = callbacks_from_docs(g.callbacks)
    if not any(cb.kind == "loss_log" for cb in callbacks):
        callbacks.append(Callback("loss_log", interval_steps=1))

    def sink(event):
        if event.kind == "loss_log":
            print(event.payload)
            sys.stdout.flush()
        elif event.kind == "error":
            print(f"callback error: {event.payload}", file=sys.stderr)

    train(g, cfg, callbacks, event_sink=sink)
    return 0


def cmd_eval(args) -> int:
    g, doc = _load(args)
    _validated(g)
    cfg = _action_config(args, doc, "eval")
    metrics = evaluate(g, cfg)
    for name in sorted(metrics):
        print(f"{name}={metrics[name]:.6f}")
    return 0


def cmd_infer(args) -> int:
    g, doc = _load(args)
    _validated(g)
    cfg = _action_config(args, doc, "infer")
    infer(g, cfg, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semaflow",
        description="Check, describe, and run typed dataflow graph files.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=False):
        p.add_argument("graph", help="graph-description JSON file")
        p.add_argument("--auto-cast", action="store_true",
                       help="insert transpose casts for TRANSPOSE_SAME connections")
        p.add_argument("--seed", type=int, default=None,
                       help="override the graph seed and action seed")
        p.add_argument("--tags", default=None, help="extra tag hierarchy JSON file")
        p.add_argument("--max-steps", type=int, default=None,
                       help="override the action's max_steps")
        p.add_argument("--json", action="store_true",
                       help="machine-readable findings (check only)")
        if needs_out:
            p.add_argument("--out", required=True, help="output tensor dump path")
        else:
            p.add_argument("--out", default=None, help=argparse.SUPPRESS)

    common(sub.add_parser("check", help="type-check and validate a graph file"))
    common(sub.add_parser("describe", help="print instances, types, and bindings"))
    common(sub.add_parser("train", help="run the train action"))
    common(sub.add_parser("eval", help="run the eval action"))
    common(sub.add_parser("infer", help="run the infer action"), needs_out=True)
    return parser


_COMMANDS = {"check": cmd_check, "describe": cmd_describe, "train": cmd_train,
             "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _SCHEMA_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ConnectionTypeError as exc:
        print(f"ERROR {exc.result.name} at {exc.from_ref} -> {exc.to_ref}: "
              f"{exc.producer_type} vs {exc.consumer_type}", file=sys.stderr)
        return 1
    except SemaflowError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
