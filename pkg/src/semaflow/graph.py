"""Activation-flow DAG: typed bindings, validation, and the graph-file format.

Connections are checked at the moment they are made: a producer handle may
feed a consumer port only when the type comparison is SAME or LESS. A
TRANSPOSE_SAME pair can optionally be repaired by synthesising a transpose
instance in between (an implicit cast); every other result raises.

Building and validating a graph performs no kernel evaluation; execution is
deferred entirely to the actions in :mod:`semaflow.runtime`.
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field

from .errors import (
    ConnectionTypeError,
    DuplicateInstanceError,
    MissingParamError,
    NotValidatedError,
    PortAlreadyBoundError,
    SchemaError,
    SemaflowError,
    UnknownInstanceError,
    UnknownPortError,
)
from .modulesys import ModuleInstance, Registry
from .typesys import (
    ComparisonResult,
    NeuralType,
    TagHierarchy,
    compare_types,
    render_type_expr,
    transpose_permutation,
)

#: Descriptor synthesised for implicit casts; the standard collection ships it.
CAST_DESCRIPTOR = "Transpose"


@dataclass(frozen=True)
class TensorHandle:
    """A reference to one output port of one instance."""

    instance: str
    port: str
    type: NeuralType

    @property
    def ref(self) -> str:
        return f"{self.instance}.{self.port}"


@dataclass(frozen=True)
class Binding:
    src: TensorHandle
    dst_instance: str
    dst_port: str
    comparison: ComparisonResult

    @property
    def dst_ref(self) -> str:
        return f"{self.dst_instance}.{self.dst_port}"


@dataclass
class ValidationReport:
    unbound_ports: list = field(default_factory=list)      # (instance, port)
    cycles: list = field(default_factory=list)             # sorted instance-id lists
    unreachable_sinks: list = field(default_factory=list)  # (instance, port)

    @property
    def ok(self) -> bool:
        return not (self.unbound_ports or self.cycles or self.unreachable_sinks)

    def lines(self) -> list[str]:
        out = [f"ERROR UNBOUND at {i}.{p}" for i, p in self.unbound_ports]
        out += ["ERROR CYCLE at " + " -> ".join(c) for c in self.cycles]
        out += [f"ERROR UNREACHABLE_SINK at {i}.{p}" for i, p in self.unreachable_sinks]
        return out


class Graph:
    """Instances plus typed bindings; mutation clears the validated flag."""

    def __init__(self, registry: Registry, seed: int = 0):
        self.registry = registry
        self.hierarchy: TagHierarchy = registry.hierarchy
        self.seed = seed
        self.instances: dict[str, ModuleInstance] = {}
        self.bindings: list[Binding] = []
        self.sinks: list[tuple[str, str]] = []
        self.validated = False
        self.inserted_casts = 0
        self.tags_file: str | None = None
        self.action: dict | None = None     # raw action config for persistence
        self.callbacks: list = []           # raw callback configs for persistence

    # --- construction -----------------------------------------------------

    def add(self, descriptor_name: str, instance_id: str, params=None) -> ModuleInstance:
        inst = self.registry.instantiate(descriptor_name, params or {}, instance_id, self.seed)
        return self.attach(inst)

    def attach(self, inst: ModuleInstance) -> ModuleInstance:
        """Adopt an existing instance (its trainable state is shared)."""
        if inst.id in self.instances:
            raise DuplicateInstanceError(f"instance id {inst.id!r} already in graph")
        self.instances[inst.id] = inst
        self.validated = False
        return inst

    def instance(self, instance_id: str) -> ModuleInstance:
        inst = self.instances.get(instance_id)
        if inst is None:
            raise UnknownInstanceError(f"unknown instance {instance_id!r}")
        return inst

    def handle(self, instance_id: str, port: str) -> TensorHandle:
        inst = self.instance(instance_id)
        if port not in inst.output_types:
            raise UnknownPortError(f"{instance_id} has no output port {port!r}")
        return TensorHandle(instance_id, port, inst.output_types[port])

    def _resolve_src(self, src) -> TensorHandle:
        if isinstance(src, TensorHandle):
            if src.instance not in self.instances:
                raise UnknownInstanceError(f"handle references foreign instance {src.instance!r}")
            return src
        if isinstance(src, str):
            inst_id, _, port = src.partition(".")
            return self.handle(inst_id, port)
        inst_id, port = src
        return self.handle(inst_id, port)

    def _bound_ports(self) -> set[tuple[str, str]]:
        return {(b.dst_instance, b.dst_port) for b in self.bindings}

    def connect(self, src, to_instance: str, to_port: str, auto_cast: bool = False) -> Binding:
        """Type-check and record one producer-to-consumer binding.

        SAME/LESS bind directly. TRANSPOSE_SAME with ``auto_cast`` inserts a
        transpose instance whose output compares SAME to the consumer; any
        other result raises :class:`ConnectionTypeError` carrying both
        rendered types.
        """
        handle = self._resolve_src(src)
        consumer = self.instance(to_instance)
        if to_port not in consumer.input_types:
            raise UnknownPortError(f"{to_instance} has no input port {to_port!r}")
        if (to_instance, to_port) in self._bound_ports():
            raise PortAlreadyBoundError(f"input port {to_instance}.{to_port} is already bound")

        consumer_type = consumer.input_types[to_port]
        result = compare_types(self.hierarchy, handle.type, consumer_type)
        if result.accepted:
            binding = Binding(handle, to_instance, to_port, result)
            self.bindings.append(binding)
            self.validated = False
            return binding

        if result is ComparisonResult.TRANSPOSE_SAME and auto_cast:
            perm = transpose_permutation(self.hierarchy, handle.type.axes, consumer_type.axes)
            cast_id = self._fresh_cast_id()
            cast = self.add(CAST_DESCRIPTOR, cast_id, {
                "in_type": render_type_expr(handle.type),
                "perm": list(perm),
            })
            self.bindings.append(Binding(handle, cast_id, "x", ComparisonResult.SAME))
            out_handle = self.handle(cast_id, "y")
            rewritten = Binding(out_handle, to_instance, to_port,
                                compare_types(self.hierarchy, out_handle.type, consumer_type))
            self.bindings.append(rewritten)
            self.inserted_casts += 1
            self.validated = False
            return rewritten

        raise ConnectionTypeError(
            result,
            render_type_expr(handle.type),
            render_type_expr(consumer_type),
            from_ref=handle.ref,
            to_ref=f"{to_instance}.{to_port}",
        )

    def _fresh_cast_id(self) -> str:
        n = self.inserted_casts
        while f"_cast{n}" in self.instances:
            n += 1
        return f"_cast{n}"

    def add_sink(self, src) -> None:
        handle = self._resolve_src(src)
        self.sinks.append((handle.instance, handle.port))
        self.validated = False

    def sink_handles(self) -> list[TensorHandle]:
        return [self.handle(i, p) for i, p in self.sinks]

    # --- validation ---------------------------------------------------------

    def validate(self) -> ValidationReport:
        """Collect all findings; the graph is marked validated iff none."""
        report = ValidationReport()
        bound = self._bound_ports()
        for inst in self.instances.values():
            for port in inst.input_types:
                if (inst.id, port) not in bound:
                    report.unbound_ports.append((inst.id, port))

        adjacency: dict[str, set[str]] = {i: set() for i in self.instances}
        for b in self.bindings:
            adjacency[b.src.instance].add(b.dst_instance)
        report.cycles = _strongly_connected_cycles(adjacency)

        reachable = set()
        frontier = [i for i, inst in self.instances.items() if inst.is_data_layer]
        reachable.update(frontier)
        while frontier:
            nxt = []
            for node in frontier:
                for succ in adjacency[node]:
                    if succ not in reachable:
                        reachable.add(succ)
                        nxt.append(succ)
            frontier = nxt
        for (i, p) in self.sinks:
            if i not in reachable:
                report.unreachable_sinks.append((i, p))

        report.unbound_ports.sort()
        report.unreachable_sinks.sort()
        self.validated = report.ok
        return report

    def topo_order(self) -> list[str]:
        """Producers before consumers; ties broken by instance-id order."""
        if not self.validated:
            raise NotValidatedError("graph must pass validation before ordering")
        indeg = {i: 0 for i in self.instances}
        succs: dict[str, list[str]] = {i: [] for i in self.instances}
        seen_edges = set()
        for b in self.bindings:
            edge = (b.src.instance, b.dst_instance)
            if edge in seen_edges:
                continue
            seen_edges.add(edge)
            succs[edge[0]].append(edge[1])
            indeg[edge[1]] += 1
        heap = sorted(i for i, d in indeg.items() if d == 0)
        order = []
        while heap:
            node = heapq.heappop(heap)
            order.append(node)
            for succ in succs[node]:
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    heapq.heappush(heap, succ)
        return order

    def input_bindings(self, instance_id: str) -> dict[str, TensorHandle]:
        return {b.dst_port: b.src for b in self.bindings if b.dst_instance == instance_id}

    def parameters(self):
        out = []
        for inst in self.instances.values():
            out.extend(inst.parameters())
        return out


def _strongly_connected_cycles(adjacency: dict[str, set[str]]) -> list[list[str]]:
    """Tarjan SCCs; components of size > 1 (or with a self-loop) are cycles."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    out: list[list[str]] = []

    def strongconnect(v: str):
        work = [(v, iter(sorted(adjacency[v])))]
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for succ in it:
                if succ not in index:
                    index[succ] = low[succ] = counter[0]
                    counter[0] += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(sorted(adjacency[succ]))))
                    advanced = True
                    break
                if succ in on_stack:
                    low[node] = min(low[node], index[succ])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1 or node in adjacency[node]:
                    out.append(sorted(comp))

    for v in sorted(adjacency):
        if v not in index:
            strongconnect(v)
    return sorted(out)


# --- graph-description documents ---------------------------------------------

_TOP_KEYS = {"seed", "tags_file", "modules", "dag", "sinks", "action", "callbacks"}


def _split_ref(text, path: str) -> tuple[str, str]:
    if not isinstance(text, str) or "." not in text:
        raise SchemaError(path, f"expected 'instance.port', got {text!r}")
    inst, _, port = text.partition(".")
    return inst, port


def save_graph(g: Graph) -> dict:
    """Serialise a validated graph; inverse of :func:`load_graph`."""
    if not g.validated:
        raise NotValidatedError("validate the graph before saving")
    doc = {
        "seed": g.seed,
        "modules": [
            {"id": inst.id, "class": inst.descriptor.name, "params": dict(inst.params)}
            for inst in g.instances.values()
        ],
        "dag": [{"from": b.src.ref, "to": b.dst_ref} for b in g.bindings],
        "sinks": [f"{i}.{p}" for i, p in g.sinks],
    }
    if g.tags_file:
        doc["tags_file"] = g.tags_file
    if g.action:
        doc["action"] = g.action
    if g.callbacks:
        doc["callbacks"] = g.callbacks
    return doc


def write_graph_file(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(save_graph(g), f, indent=2)
        f.write("\n")


def load_graph(doc: dict, reg: Registry, auto_cast: bool = False,
               findings: list | None = None) -> Graph:
    """Rebuild a graph from its document form.

    When ``findings`` is a list, connection-time type errors are appended to
    it instead of raised, leaving the offending port unbound; schema errors
    always raise. Used by linter-style checking.
    """
    if not isinstance(doc, dict):
        raise SchemaError("$", "graph document must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"$.{sorted(unknown)[0]}", "unknown top-level key")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise SchemaError("$.seed", "must be an integer")

    g = Graph(reg, seed=seed)
    g.tags_file = doc.get("tags_file")

    modules = doc.get("modules", [])
    if not isinstance(modules, list):
        raise SchemaError("$.modules", "must be a list")
    for i, m in enumerate(modules):
        if not isinstance(m, dict) or "id" not in m or "class" not in m:
            raise SchemaError(f"$.modules[{i}]", "module needs 'id' and 'class'")
        extra = set(m) - {"id", "class", "params"}
        if extra:
            raise SchemaError(f"$.modules[{i}].{sorted(extra)[0]}", "unknown module key")
        try:
            g.add(m["class"], m["id"], m.get("params", {}))
        except MissingParamError as exc:
            raise MissingParamError(f"instance {m['id']!r}: {exc}") from exc

    dag = doc.get("dag", [])
    if not isinstance(dag, list):
        raise SchemaError("$.dag", "must be a list")
    for i, e in enumerate(dag):
        if not isinstance(e, dict) or set(e) != {"from", "to"}:
            raise SchemaError(f"$.dag[{i}]", "edge needs exactly 'from' and 'to'")
        src = _split_ref(e["from"], f"$.dag[{i}].from")
        dst = _split_ref(e["to"], f"$.dag[{i}].to")
        try:
            g.connect(src, dst[0], dst[1], auto_cast=auto_cast)
        except ConnectionTypeError as exc:
            if findings is None:
                raise
            findings.append(exc)
        except (UnknownInstanceError, UnknownPortError) as exc:
            raise SchemaError(f"$.dag[{i}]", str(exc)) from exc

    sinks = doc.get("sinks", [])
    if not isinstance(sinks, list):
        raise SchemaError("$.sinks", "must be a list")
    for i, s in enumerate(sinks):
        ref = _split_ref(s, f"$.sinks[{i}]")
        try:
            g.add_sink(ref)
        except (UnknownInstanceError, UnknownPortError) as exc:
            raise SchemaError(f"$.sinks[{i}]", str(exc)) from exc

    action = doc.get("action")
    if action is not None and not isinstance(action, dict):
        raise SchemaError("$.action", "must be an object")
    g.action = action
    callbacks = doc.get("callbacks", [])
    if not isinstance(callbacks, list):
        raise SchemaError("$.callbacks", "must be a list")
    g.callbacks = callbacks
    return g


def read_graph_file(path, reg: Registry, auto_cast: bool = False,
                    findings: list | None = None) -> Graph:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise SchemaError("$", f"cannot read graph file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"graph file {path} is not valid JSON: {exc}") from exc
    g = load_graph(doc, reg, auto_cast=auto_cast, findings=findings)
    base = os.path.dirname(os.path.abspath(path))
    for inst in g.instances.values():
        if inst.is_data_layer:
            inst.base_dir = base  # data paths resolve relative to the graph file
    return g


def isomorphic(a: Graph, b: Graph) -> bool:
    """Same ids, descriptors, params, bindings (as a set), sinks, and seed."""
    if a.seed != b.seed or set(a.instances) != set(b.instances):
        return False
    for iid, inst in a.instances.items():
        other = b.instances[iid]
        if inst.descriptor.name != other.descriptor.name or inst.params != other.params:
            return False
    edges_a = {(x.src.ref, x.dst_ref) for x in a.bindings}
    edges_b = {(x.src.ref, x.dst_ref) for x in b.bindings}
    return edges_a == edges_b and a.sinks == b.sinks
