"""Module descriptors, the registry, and instance lowering.

A descriptor declares a parametric family of modules: a parameter schema,
typed input/output ports, and an implementation that is either a primitive
kernel, a composite sub-graph, or a data layer. Port types are declared as
type-expression templates whose tag and dim slots may reference validated
parameters (``$name``), keeping module structure in data rather than code.

Instances resolve their port types from parameter values alone and hold
their trainable state as named f32 tensors initialised from a deterministic
PCG64 stream (Glorot-uniform weights, zero biases) seeded by mixing the
graph seed, a CRC of the instance id, and the instance's own ``seed`` param.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .errors import (
    ConstraintViolationError,
    DuplicateDescriptorError,
    InvalidCompositeError,
    MissingParamError,
    RecursionLimitError,
    SchemaError,
    TypeExprError,
    UnknownDescriptorError,
    UnknownParamError,
)
from .typesys import (
    AxisType,
    NeuralType,
    TagHierarchy,
    compare_types,
    parse_type_expr,
    render_type_expr,
)

PARAM_KINDS = ("int", "float", "string", "bool", "int-list", "string-list")

_CMP_RE = re.compile(r"(>=|<=|>|<)\s*(-?\d+(?:\.\d+)?)\Z")
_IN_RE = re.compile(r"in\s*\{([^}]*)\}\Z")
_COMPOSITE_DEPTH_LIMIT = 32


@dataclass(frozen=True)
class ParamSpec:
    """One schema entry. Required entries must not carry a default."""

    name: str
    kind: str
    required: bool = False
    default: Any = None
    constraint: str | None = None

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise SchemaError(f"$.params.{self.name}", f"unknown param kind {self.kind!r}")
        if self.required and self.default is not None:
            raise SchemaError(f"$.params.{self.name}", "required entries take no default")


def _kind_ok(kind: str, value) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int-list":
        return (isinstance(value, (list, tuple))
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value))
    if kind == "string-list":
        return isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value)
    return False


def _check_constraint(spec: "ParamSpec", value) -> None:
    text = spec.constraint
    if text is None:
        return
    scalars = value if isinstance(value, (list, tuple)) else [value]
    m = _CMP_RE.match(text.strip())
    if m:
        op, bound = m.group(1), float(m.group(2))
        ops = {">=": lambda v: v >= bound, ">": lambda v: v > bound,
               "<=": lambda v: v <= bound, "<": lambda v: v < bound}
        if not all(ops[op](v) for v in scalars):
            raise ConstraintViolationError(spec.name, text, value)
        return
    m = _IN_RE.match(text.strip())
    if m:
        allowed = {p.strip() for p in m.group(1).split(",")}
        if not all(str(v) in allowed for v in scalars):
            raise ConstraintViolationError(spec.name, text, value)
        return
    raise SchemaError(f"$.params.{spec.name}", f"unparseable constraint {text!r}")


class ParamSchema:
    """Ordered set of :class:`ParamSpec` entries with validation."""

    def __init__(self, entries: Iterable[ParamSpec] = ()):
        self.entries: tuple[ParamSpec, ...] = tuple(entries)
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise SchemaError("$.params", "duplicate parameter names")
        for e in self.entries:
            if e.default is not None:
                if not _kind_ok(e.kind, e.default):
                    raise SchemaError(f"$.params.{e.name}", "default has wrong kind")
                _check_constraint(e, e.default)

    def __iter__(self):
        return iter(self.entries)

    def names(self) -> set[str]:
        return {e.name for e in self.entries}

    def get(self, name: str) -> ParamSpec | None:
        for e in self.entries:
            if e.name == name:
                return e
        return None

    def validate(self, values: Mapping[str, Any] | None) -> dict[str, Any]:
        """Return a full mapping with defaults filled; reject unknown keys."""
        values = dict(values or {})
        unknown = set(values) - self.names()
        if unknown:
            raise UnknownParamError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        out: dict[str, Any] = {}
        for e in self.entries:
            if e.name in values:
                v = values[e.name]
                if e.kind == "float" and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                if not _kind_ok(e.kind, v):
                    raise ConstraintViolationError(e.name, f"must be {e.kind}", v)
                _check_constraint(e, v)
                out[e.name] = list(v) if isinstance(v, tuple) else v
            elif e.required:
                raise MissingParamError(f"missing required parameter {e.name!r}")
            else:
                out[e.name] = list(e.default) if isinstance(e.default, (list, tuple)) else e.default
        return out


@dataclass(frozen=True)
class PortSpec:
    """A named port with a type-expression template (may contain $param refs)."""

    name: str
    template: str


@dataclass(frozen=True)
class StateSpec:
    """One trainable tensor: shape entries are ints or param names.

    ``init`` is "glorot", "zeros", or "$<param>" to read the scheme from a
    string parameter at instantiation time.
    """

    name: str
    shape: tuple
    init: str = "glorot"


@dataclass(frozen=True)
class PrimitiveImpl:
    kernel: str
    state: tuple[StateSpec, ...] = ()
    attr_params: tuple[str, ...] = ()


@dataclass(frozen=True)
class CompositeImpl:
    build: Callable[[dict], "CompositeSpec"]
    validation_params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DataLayerImpl:
    source: str  # loader kind, e.g. "csv" or "sequence"


@dataclass(frozen=True)
class ChildSpec:
    id: str
    descriptor: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CompositeSpec:
    """Static wiring of a composite's internal sub-graph.

    Edge endpoints are (child_id, port); the pseudo-id "$in" refers to the
    composite's own input ports. ``outputs`` maps each composite output port
    to the internal (child_id, port) producing it.
    """

    children: tuple[ChildSpec, ...]
    edges: tuple[tuple[tuple[str, str], tuple[str, str]], ...]
    outputs: tuple[tuple[str, tuple[str, str]], ...]


@dataclass(frozen=True)
class ModuleDescriptor:
    name: str
    params: ParamSchema
    inputs: tuple[PortSpec, ...]
    outputs: tuple[PortSpec, ...]
    impl: PrimitiveImpl | CompositeImpl | DataLayerImpl
    trainable: bool = False
    # Port-typing rule: "template" resolves every port from its template;
    # "transpose" and "concat" derive output types from type-valued params.
    port_rule: str = "template"

    def __post_init__(self):
        for ports, label in ((self.inputs, "inputs"), (self.outputs, "outputs")):
            names = [p.name for p in ports]
            if len(names) != len(set(names)):
                raise SchemaError(f"$.{label}", f"duplicate port names in {self.name}")
        if isinstance(self.impl, DataLayerImpl) and self.inputs:
            raise SchemaError("$.inputs", f"data layer {self.name} must not declare inputs")


class Parameter:
    """A trainable tensor owned by one instance; identity is object identity."""

    __slots__ = ("key", "value")

    def __init__(self, key: tuple[str, str], value: np.ndarray):
        self.key = key
        self.value = value

    def __repr__(self):
        return f"Parameter({self.key[0]}.{self.key[1]}, shape={self.value.shape})"


@dataclass(frozen=True)
class Step:
    """One primitive evaluation in a lowered program."""

    kernel: str
    inputs: tuple[str, ...]
    params: tuple[Parameter, ...]
    output: str
    attrs: dict = field(default_factory=dict)
    instance: str = ""


class ModuleInstance:
    """A descriptor bound to validated parameter values and resolved types."""

    def __init__(self, instance_id: str, descriptor: ModuleDescriptor, params: dict,
                 input_types: dict, output_types: dict, attrs: dict):
        self.id = instance_id
        self.descriptor = descriptor
        self.params = params
        self.input_types: dict[str, NeuralType] = input_types
        self.output_types: dict[str, NeuralType] = output_types
        self.attrs = attrs
        self.state: dict[str, Parameter] = {}
        self.children: dict[str, ModuleInstance] = {}
        self._child_order: tuple[str, ...] = ()
        self._composite_spec: CompositeSpec | None = None

    def __repr__(self):
        return f"ModuleInstance({self.id}: {self.descriptor.name})"

    @property
    def is_data_layer(self) -> bool:
        return isinstance(self.descriptor.impl, DataLayerImpl)

    def parameters(self) -> list[Parameter]:
        """All trainable tensors of this instance and its children, depth-first."""
        out = list(self.state.values())
        for cid in self._child_order:
            out.extend(self.children[cid].parameters())
        return out

    def state_hash(self) -> int:
        return zlib.crc32(b"".join(p.value.tobytes() for p in self.parameters()))


# --- port template resolution -----------------------------------------------

_TEMPLATE_AXIS_RE = re.compile(
    r"(\$?[A-Za-z][A-Za-z0-9_]*)\s*(?::\s*(\$?[A-Za-z0-9_]+))?\Z"
)


def _subst_tag(token: str, params: dict, port: str) -> str:
    if token.startswith("$"):
        v = params.get(token[1:])
        if not isinstance(v, str):
            raise ConstraintViolationError(token[1:], f"must name a tag for port {port}", v)
        return v
    return token


def _subst_dim(token: str | None, params: dict, port: str):
    if token is None:
        return None
    if token.startswith("$"):
        v = params.get(token[1:])
        if v is None:
            return None
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConstraintViolationError(token[1:], f"must be an int dim for port {port}", v)
        return v
    if not token.isdigit():
        raise TypeExprError(f"bad dim token {token!r} in template for port {port}")
    return int(token)


def resolve_template(h: TagHierarchy, template: str, params: dict, port: str) -> NeuralType:
    """Instantiate a port template against validated parameter values."""
    s = template.strip()
    if s.startswith("$"):
        v = params.get(s[1:])
        if not isinstance(v, str):
            raise ConstraintViolationError(s[1:], f"must hold a type expression for port {port}", v)
        return parse_type_expr(h, v)
    if s == "root":
        return NeuralType.root()
    if s.startswith("scalar(") and s.endswith(")"):
        return NeuralType.scalar(h, _subst_tag(s[7:-1].strip(), params, port))
    if not (s.startswith("[") and s.endswith("]")):
        raise TypeExprError(f"cannot parse port template {template!r}")
    axes = []
    for part in s[1:-1].split(","):
        m = _TEMPLATE_AXIS_RE.match(part.strip())
        if not m:
            raise TypeExprError(f"bad axis spec {part.strip()!r} in template {template!r}")
        tag = _subst_tag(m.group(1), params, port)
        dim = _subst_dim(m.group(2), params, port)
        if dim is not None and dim < 1:
            raise ConstraintViolationError(port, "dim >= 1", dim)
        axes.append(AxisType(tag, dim))
    return NeuralType.tensor(h, axes)


def _permute_type(h: TagHierarchy, t: NeuralType, perm) -> NeuralType:
    return NeuralType.tensor(h, [t.axes[j] for j in perm])


def resolve_ports(d: ModuleDescriptor, h: TagHierarchy, params: dict):
    """Port types and derived kernel attrs, purely from validated params."""
    attrs = {name: params[name] for name in getattr(d.impl, "attr_params", ())}

    if d.port_rule == "transpose":
        in_t = parse_type_expr(h, params["in_type"])
        perm = tuple(params["perm"])
        if sorted(perm) != list(range(in_t.rank)):
            raise ConstraintViolationError("perm", f"permutation of 0..{in_t.rank - 1}", perm)
        out_t = _permute_type(h, in_t, perm)
        attrs["perm"] = perm
        return {"x": in_t}, {"y": out_t}, attrs

    if d.port_rule == "concat":
        a = parse_type_expr(h, params["in_a"])
        b = parse_type_expr(h, params["in_b"])
        axis_tag = params["axis"]
        if a.rank != b.rank or any(pa.tag != pb.tag for pa, pb in zip(a.axes, b.axes)):
            raise ConstraintViolationError("in_b", "same axis tags as in_a", params["in_b"])
        hits = [i for i, ax in enumerate(a.axes) if ax.tag == axis_tag]
        if len(hits) != 1:
            raise ConstraintViolationError("axis", "must name exactly one axis of in_a", axis_tag)
        k = hits[0]
        for i, (pa, pb) in enumerate(zip(a.axes, b.axes)):
            if i != k and pa.dim is not None and pb.dim is not None and pa.dim != pb.dim:
                raise ConstraintViolationError("in_b", "non-concat dims must match in_a", params["in_b"])
        da, db = a.axes[k].dim, b.axes[k].dim
        out_axes = list(a.axes)
        out_axes[k] = AxisType(axis_tag, da + db if da is not None and db is not None else None)
        attrs["axis_index"] = k
        return {"a": a, "b": b}, {"out": NeuralType.tensor(h, out_axes)}, attrs

    ins = {p.name: resolve_template(h, p.template, params, p.name) for p in d.inputs}
    outs = {p.name: resolve_template(h, p.template, params, p.name) for p in d.outputs}
    return ins, outs, attrs


# --- deterministic state initialisation --------------------------------------

def _instance_rng(graph_seed: int, instance_id: str, param_seed: int) -> np.random.Generator:
    # PCG64 via SeedSequence; entropy mixes the graph seed, a CRC32 of the
    # instance path, and the instance's own seed parameter.
    entropy = [graph_seed & 0xFFFFFFFFFFFFFFFF,
               zlib.crc32(instance_id.encode("utf-8")),
               param_seed & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _init_tensor(rng: np.random.Generator, shape: tuple[int, ...], scheme: str) -> np.ndarray:
    if scheme == "zeros" or len(shape) < 2:
        return np.zeros(shape, dtype=np.float32)
    if scheme == "glorot":
        fan_out, fan_in = shape[0], shape[-1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(np.float32)
    raise ConstraintViolationError("init", "in {glorot, zeros}", scheme)


def _resolve_state_shape(spec: StateSpec, params: dict) -> tuple[int, ...]:
    dims = []
    for entry in spec.shape:
        v = params[entry] if isinstance(entry, str) else entry
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConstraintViolationError(str(entry), "state dims must be ints >= 1", v)
        dims.append(v)
    return tuple(dims)


# --- registry -----------------------------------------------------------------

def _subst_child_params(params: dict, parent: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, str) and v.startswith("$$"):
            out[k] = v[1:]
        elif isinstance(v, str) and v.startswith("$"):
            name = v[1:]
            if name not in parent:
                raise UnknownParamError(f"child param forwards unknown parent param {name!r}")
            out[k] = parent[name]
        else:
            out[k] = v
    return out


class Registry:
    """Descriptor registry bound to a frozen tag hierarchy."""

    def __init__(self, hierarchy: TagHierarchy):
        self.hierarchy = hierarchy
        self._descriptors: dict[str, ModuleDescriptor] = {}

    def register(self, d: ModuleDescriptor) -> None:
        if d.name in self._descriptors:
            raise DuplicateDescriptorError(f"descriptor {d.name!r} already registered")
        if isinstance(d.impl, CompositeImpl):
            self._validate_composite(d)
        self._descriptors[d.name] = d

    def lookup(self, name: str) -> ModuleDescriptor:
        d = self._descriptors.get(name)
        if d is None:
            raise UnknownDescriptorError(f"unknown descriptor {name!r}")
        return d

    def __contains__(self, name: str) -> bool:
        return name in self._descriptors

    def names(self) -> list[str]:
        return sorted(self._descriptors)

    def _validate_composite(self, d: ModuleDescriptor) -> None:
        # Eager check with sample parameters: children must already be
        # registered (which rules out recursion), the sub-graph must wire up
        # acyclically, and every internal connection must type-check.
        try:
            values = d.params.validate(d.impl.validation_params)
        except Exception as exc:
            raise InvalidCompositeError(
                f"{d.name}: validation_params do not satisfy the schema: {exc}") from exc
        try:
            self._instantiate(d, values, f"__validate__/{d.name}", rng_seed=0, depth=0)
        except RecursionLimitError:
            raise
        except InvalidCompositeError:
            raise
        except Exception as exc:
            raise InvalidCompositeError(f"{d.name}: {exc}") from exc

    def instantiate(self, name: str, values: Mapping[str, Any] | None, instance_id: str,
                    rng_seed: int) -> ModuleInstance:
        return self._instantiate(self.lookup(name), values, instance_id, rng_seed, depth=0)

    def _instantiate(self, d: ModuleDescriptor, values, instance_id, rng_seed,
                     depth: int) -> ModuleInstance:
        if depth > _COMPOSITE_DEPTH_LIMIT:
            raise RecursionLimitError(
                f"composite nesting exceeds {_COMPOSITE_DEPTH_LIMIT}; registry is corrupt")
        params = d.params.validate(values)
        in_types, out_types, attrs = resolve_ports(d, self.hierarchy, params)
        inst = ModuleInstance(instance_id, d, params, in_types, out_types, attrs)

        if isinstance(d.impl, PrimitiveImpl):
            rng = _instance_rng(rng_seed, instance_id, int(params.get("seed", 0) or 0))
            for spec in d.impl.state:
                scheme = spec.init
                if scheme.startswith("$"):
                    scheme = params[scheme[1:]]
                shape = _resolve_state_shape(spec, params)
                inst.state[spec.name] = Parameter(
                    (instance_id, spec.name), _init_tensor(rng, shape, scheme))
        elif isinstance(d.impl, CompositeImpl):
            spec = d.impl.build(params)
            for child in spec.children:
                child_desc = self.lookup(child.descriptor)
                inst.children[child.id] = self._instantiate(
                    child_desc, _subst_child_params(child.params, params),
                    f"{instance_id}/{child.id}", rng_seed, depth + 1)
            inst._composite_spec = spec
            inst._child_order = _validate_subgraph(self.hierarchy, inst, spec)
        return inst


def _validate_subgraph(h: TagHierarchy, inst: ModuleInstance, spec: CompositeSpec) -> tuple[str, ...]:
    """Check the composite wiring and return the children in topological order."""
    d = inst.descriptor
    in_ports = {p.name for p in d.inputs}
    bound: dict[tuple[str, str], tuple[str, str]] = {}
    for (src, dst) in spec.edges:
        src_id, src_port = src
        dst_id, dst_port = dst
        if dst_id not in inst.children or dst_port not in inst.children[dst_id].input_types:
            raise InvalidCompositeError(f"{d.name}: edge into unknown port {dst_id}.{dst_port}")
        if (dst_id, dst_port) in bound:
            raise InvalidCompositeError(f"{d.name}: port {dst_id}.{dst_port} bound twice")
        if src_id == "$in":
            if src_port not in in_ports:
                raise InvalidCompositeError(f"{d.name}: edge from unknown input {src_port}")
            src_type = inst.input_types[src_port]
        else:
            if src_id not in inst.children or src_port not in inst.children[src_id].output_types:
                raise InvalidCompositeError(f"{d.name}: edge from unknown port {src_id}.{src_port}")
            src_type = inst.children[src_id].output_types[src_port]
        dst_type = inst.children[dst_id].input_types[dst_port]
        result = compare_types(h, src_type, dst_type)
        if not result.accepted:
            raise InvalidCompositeError(
                f"{d.name}: {result.name} at {src_id}.{src_port} -> {dst_id}.{dst_port}: "
                f"{render_type_expr(src_type)} vs {render_type_expr(dst_type)}")
        bound[(dst_id, dst_port)] = src
    for cid, child in inst.children.items():
        for port in child.input_types:
            if (cid, port) not in bound:
                raise InvalidCompositeError(f"{d.name}: unbound internal port {cid}.{port}")
    out_map = dict(spec.outputs)
    for p in d.outputs:
        if p.name not in out_map:
            raise InvalidCompositeError(f"{d.name}: output port {p.name} has no internal source")
        cid, port = out_map[p.name]
        if cid not in inst.children or port not in inst.children[cid].output_types:
            raise InvalidCompositeError(f"{d.name}: output {p.name} maps to unknown {cid}.{port}")
        result = compare_types(h, inst.children[cid].output_types[port], inst.output_types[p.name])
        if not result.accepted:
            raise InvalidCompositeError(
                f"{d.name}: declared output {p.name} is {result.name} vs internal producer")

    # Kahn order over children; deterministic by child-id.
    deps: dict[str, set[str]] = {cid: set() for cid in inst.children}
    for (src, dst) in spec.edges:
        if src[0] != "$in":
            deps[dst[0]].add(src[0])
    order: list[str] = []
    placed: set[str] = set()
    remaining = dict(deps)
    while remaining:
        ready = sorted(c for c, ds in remaining.items() if ds <= placed)
        if not ready:
            raise InvalidCompositeError(f"{d.name}: internal cycle among {sorted(remaining)}")
        for cid in ready:
            order.append(cid)
            placed.add(cid)
            del remaining[cid]
    return tuple(order)


# --- lowering -------------------------------------------------------------------

def lower(instance: ModuleInstance) -> list[Step]:
    """Expand an instance to primitive evaluation steps in execution order."""
    in_slots = {p: f"{instance.id}.{p}" for p in instance.input_types}
    steps, _ = _lower_into(instance, in_slots, depth=0)
    return steps


def lower_outputs(instance: ModuleInstance) -> dict[str, str]:
    """Slot names holding each output port's value after :func:`lower` runs."""
    in_slots = {p: f"{instance.id}.{p}" for p in instance.input_types}
    _, outs = _lower_into(instance, in_slots, depth=0)
    return outs


def flatten_steps(steps: list[Step]) -> list[Step]:
    """Lowering a fully lowered step list is the identity."""
    return list(steps)


def _lower_into(inst: ModuleInstance, in_slots: dict[str, str], depth: int):
    if depth > _COMPOSITE_DEPTH_LIMIT:
        raise RecursionLimitError("lowering depth exceeded; registry is corrupt")
    impl = inst.descriptor.impl

    if isinstance(impl, DataLayerImpl):
        steps = [Step("source", (), (), f"{inst.id}.{p}",
                      {"port": p, "source": impl.source}, inst.id)
                 for p in inst.output_types]
        return steps, {p: f"{inst.id}.{p}" for p in inst.output_types}

    if isinstance(impl, PrimitiveImpl):
        (out_port,) = inst.output_types.keys()
        out_slot = f"{inst.id}.{out_port}"
        ordered_inputs = tuple(in_slots[p.name] for p in inst.descriptor.inputs)
        params = tuple(inst.state[s.name] for s in impl.state)
        return [Step(impl.kernel, ordered_inputs, params, out_slot,
                     dict(inst.attrs), inst.id)], {out_port: out_slot}

    spec = inst._composite_spec
    child_outs: dict[str, dict[str, str]] = {}
    steps: list[Step] = []
    for cid in inst._child_order:
        child = inst.children[cid]
        slots = {}
        for port in child.input_types:
            for (src, dst) in spec.edges:
                if dst == (cid, port):
                    slots[port] = (in_slots[src[1]] if src[0] == "$in"
                                   else child_outs[src[0]][src[1]])
        sub_steps, outs = _lower_into(child, slots, depth + 1)
        steps.extend(sub_steps)
        child_outs[cid] = outs
    out_slots = {p: child_outs[cid][port] for p, (cid, port) in spec.outputs}
    return steps, out_slots


# --- descriptor definition files ---------------------------------------------

def _port_ref(text, path: str) -> tuple[str, str]:
    if not isinstance(text, str) or text.count(".") != 1:
        raise SchemaError(path, f"port reference must be 'id.port', got {text!r}")
    left, right = text.split(".")
    return left, right


def descriptor_from_doc(doc: Mapping, reg: Registry) -> ModuleDescriptor:
    """Build a user-defined composite descriptor from its document form."""
    if not isinstance(doc, Mapping):
        raise SchemaError("$", "descriptor document must be an object")
    unknown = set(doc) - {"name", "params", "inputs", "outputs", "impl"}
    if unknown:
        raise SchemaError(f"$.{sorted(unknown)[0]}", "unknown key in descriptor document")
    for key in ("name", "inputs", "outputs", "impl"):
        if key not in doc:
            raise SchemaError(f"$.{key}", "missing required key")

    entries = []
    for i, p in enumerate(doc.get("params", [])):
        try:
            entries.append(ParamSpec(
                name=p["name"], kind=p["kind"], required=p.get("required", False),
                default=p.get("default"), constraint=p.get("constraint")))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"$.params[{i}]", f"bad schema entry: {exc}") from exc

    def ports(key):
        out = []
        for i, p in enumerate(doc[key]):
            if not isinstance(p, Mapping) or "name" not in p or "type" not in p:
                raise SchemaError(f"$.{key}[{i}]", "port needs 'name' and 'type'")
            out.append(PortSpec(p["name"], p["type"]))
        return tuple(out)

    impl_doc = doc["impl"]
    if not isinstance(impl_doc, Mapping) or impl_doc.get("kind") != "composite":
        raise SchemaError("$.impl.kind", "descriptor files define composite impls only")
    children = tuple(
        ChildSpec(m["id"], m["class"], dict(m.get("params", {})))
        for m in impl_doc.get("modules", [])
    )
    edges = []
    for i, e in enumerate(impl_doc.get("dag", [])):
        edges.append((_port_ref(e.get("from"), f"$.impl.dag[{i}].from"),
                      _port_ref(e.get("to"), f"$.impl.dag[{i}].to")))
    outputs = tuple(
        (name, _port_ref(ref, f"$.impl.outputs.{name}"))
        for name, ref in impl_doc.get("outputs", {}).items()
    )
    spec = CompositeSpec(children, tuple(edges), outputs)
    trainable = any(
        c.descriptor in reg and reg.lookup(c.descriptor).trainable for c in children
    )
    return ModuleDescriptor(
        name=doc["name"],
        params=ParamSchema(entries),
        inputs=ports("inputs"),
        outputs=ports("outputs"),
        impl=CompositeImpl(build=lambda _params, _spec=spec: _spec,
                           validation_params=dict(impl_doc.get("validation_params", {}))),
        trainable=trainable,
        port_rule="template",
    )
