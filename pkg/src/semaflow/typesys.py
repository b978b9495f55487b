"""Semantic axis tags, neural types, and the six-way type comparison.

Every tensor axis carries a semantic tag drawn from a single-inheritance
hierarchy (Batch, Channel, user-defined Spectrogram, ...) plus an optional
fixed dimension. A neural type is an ordered list of such axis types, the
universal root type, or a tagged non-tensor (scalar) type. Comparing a
producer type against a consumer type yields one of six results; only SAME
and LESS permit a connection.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

from .errors import (
    DuplicateTagError,
    HierarchyFrozenError,
    HierarchyNotFrozenError,
    InvalidDimError,
    SchemaError,
    TypeExprError,
    UnknownParentError,
    UnknownTagError,
)

_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")

#: Tags present in every hierarchy; the only tags allowed to have no parent.
BUILTIN_TAGS = (
    "Batch", "Time", "Channel", "Height", "Width",
    "Embedding", "LogProbs", "Label", "Length",
)


@dataclass(frozen=True)
class Tag:
    """A semantic axis tag; ``parent`` is None only for the built-in roots."""

    name: str
    parent: str | None = None


class TagHierarchy:
    """Registry of tags related by single-inheritance is-a edges.

    Mutable until :meth:`freeze` is called; neural types can only be
    constructed against a frozen hierarchy, after which everything here is
    immutable and safe to share across threads.
    """

    def __init__(self):
        self._tags: dict[str, Tag] = {n: Tag(n) for n in BUILTIN_TAGS}
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "TagHierarchy":
        self._frozen = True
        return self

    def define(self, name: str, parent: str) -> Tag:
        """Register a new tag under an existing parent."""
        if self._frozen:
            raise HierarchyFrozenError(f"cannot define tag {name!r}: hierarchy is frozen")
        if not _IDENT_RE.match(name or ""):
            raise TypeExprError(f"invalid tag name {name!r}")
        if name in self._tags:
            raise DuplicateTagError(f"tag {name!r} is already defined")
        parent_name = parent.name if isinstance(parent, Tag) else parent
        if parent_name not in self._tags:
            raise UnknownParentError(f"parent tag {parent_name!r} is not defined")
        tag = Tag(name, parent_name)
        self._tags[name] = tag
        return tag

    def get(self, name: str) -> Tag:
        tag = self._tags.get(name.name if isinstance(name, Tag) else name)
        if tag is None:
            raise UnknownTagError(f"unknown tag {name!r}")
        return tag

    def __contains__(self, name: str) -> bool:
        return (name.name if isinstance(name, Tag) else name) in self._tags

    def tags(self) -> tuple[Tag, ...]:
        return tuple(self._tags.values())

    def is_subtag(self, a: Union[str, Tag], b: Union[str, Tag]) -> bool:
        """True iff ``a`` equals ``b`` or ``b`` is an ancestor of ``a``."""
        a_name = self.get(a).name
        b_name = self.get(b).name
        cur: str | None = a_name
        while cur is not None:
            if cur == b_name:
                return True
            cur = self._tags[cur].parent
        return False


def load_hierarchy(path) -> TagHierarchy:
    """Load user tags from a JSON file: {"tags": [{"name", "parent"}, ...]}.

    Built-ins are implicit and must not be redeclared. Returns a frozen
    hierarchy.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError("$", f"cannot read tag file {path}: {exc}") from exc
    return hierarchy_from_doc(doc)


def hierarchy_from_doc(doc) -> TagHierarchy:
    if not isinstance(doc, dict):
        raise SchemaError("$", "tag document must be an object")
    unknown = set(doc) - {"tags"}
    if unknown:
        raise SchemaError(f"$.{sorted(unknown)[0]}", "unknown key in tag document")
    entries = doc.get("tags", [])
    if not isinstance(entries, list):
        raise SchemaError("$.tags", "must be a list")
    h = TagHierarchy()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"name", "parent"}:
            raise SchemaError(f"$.tags[{i}]", "entry must have exactly 'name' and 'parent'")
        h.define(entry["name"], entry["parent"])
    return h.freeze()


class TypeKind(Enum):
    TENSOR = "tensor"
    ROOT = "root"
    NON_TENSOR = "non_tensor"


@dataclass(frozen=True)
class AxisType:
    """One tensor axis: a semantic tag plus an optional fixed dimension."""

    tag: str
    dim: int | None = None

    def __post_init__(self):
        if self.dim is not None and self.dim < 1:
            raise InvalidDimError(f"axis dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class NeuralType:
    """A tensor type (ordered axis list), the root type, or a tagged scalar."""

    kind: TypeKind
    axes: tuple[AxisType, ...] = ()
    element_tag: str | None = None

    @staticmethod
    def tensor(h: TagHierarchy, axes: Iterable[AxisType]) -> "NeuralType":
        axes = tuple(axes)
        if not h.frozen:
            raise HierarchyNotFrozenError("neural types require a frozen hierarchy")
        if not axes:
            raise TypeExprError("tensor type needs at least one axis; use root instead")
        for ax in axes:
            h.get(ax.tag)
        return NeuralType(TypeKind.TENSOR, axes=axes)

    @staticmethod
    def root() -> "NeuralType":
        return NeuralType(TypeKind.ROOT)

    @staticmethod
    def scalar(h: TagHierarchy, tag: str) -> "NeuralType":
        if not h.frozen:
            raise HierarchyNotFrozenError("neural types require a frozen hierarchy")
        return NeuralType(TypeKind.NON_TENSOR, element_tag=h.get(tag).name)

    @property
    def rank(self) -> int:
        return len(self.axes)


class ComparisonResult(Enum):
    """Outcome of comparing a producer type against a consumer type."""

    SAME = "SAME"
    LESS = "LESS"
    GREATER = "GREATER"
    DIM_INCOMPATIBLE = "DIM_INCOMPATIBLE"
    TRANSPOSE_SAME = "TRANSPOSE_SAME"
    INCOMPATIBLE = "INCOMPATIBLE"

    @property
    def accepted(self) -> bool:
        """Only SAME and LESS permit a connection."""
        return self in (ComparisonResult.SAME, ComparisonResult.LESS)


def _dims_compatible(a: int | None, b: int | None) -> bool:
    # A dynamic (absent) dim is compatible with anything at graph time.
    return a is None or b is None or a == b


def transpose_permutation(
    h: TagHierarchy,
    producer: tuple[AxisType, ...],
    consumer: tuple[AxisType, ...],
) -> tuple[int, ...] | None:
    """Find p such that producer[p[i]] matches consumer[i] for every i.

    A match requires exact tag equality (not subtyping) and compatible dims.
    Uses augmenting-path bipartite matching so duplicated tags are handled;
    candidate producer axes are tried in ascending index order, which keeps
    the chosen permutation deterministic. Returns None when no permutation
    aligns all axes.
    """
    n = len(producer)
    if n != len(consumer):
        return None
    candidates = [
        [j for j, pa in enumerate(producer)
         if pa.tag == ca.tag and _dims_compatible(pa.dim, ca.dim)]
        for ca in consumer
    ]
    match_of_producer: list[int | None] = [None] * n  # producer axis -> consumer axis

    def try_assign(i: int, visited: set[int]) -> bool:
        for j in candidates[i]:
            if j in visited:
                continue
            visited.add(j)
            if match_of_producer[j] is None or try_assign(match_of_producer[j], visited):
                match_of_producer[j] = i
                return True
        return False

    for i in range(n):
        if not try_assign(i, set()):
            return None
    perm = [0] * n
    for j, i in enumerate(match_of_producer):
        perm[i] = j
    return tuple(perm)


def compare_types(h: TagHierarchy, producer: NeuralType, consumer: NeuralType) -> ComparisonResult:
    """Compare a producer's output type against a consumer's input type.

    Precedence:
      1. root consumer absorbs anything -> SAME
      2. root producer into a typed consumer -> GREATER
      3. non-tensor vs tensor -> INCOMPATIBLE; non-tensor pairs compare
         element tags by subtyping
      4. differing axis counts -> INCOMPATIBLE
      5. any in-place axis with unrelated tags: a permutation aligning every
         axis by exact tag and compatible dim -> TRANSPOSE_SAME, else
         INCOMPATIBLE
      6. any axis with both dims fixed and unequal -> DIM_INCOMPATIBLE
      7. all tags equal -> SAME; any consumer-side subtag -> GREATER;
         otherwise (some producer-side subtag) -> LESS
    """
    for t in (producer, consumer):
        for ax in t.axes:
            h.get(ax.tag)
        if t.element_tag is not None:
            h.get(t.element_tag)

    if consumer.kind is TypeKind.ROOT:
        return ComparisonResult.SAME
    if producer.kind is TypeKind.ROOT:
        return ComparisonResult.GREATER

    if producer.kind is TypeKind.NON_TENSOR or consumer.kind is TypeKind.NON_TENSOR:
        if producer.kind is not consumer.kind:
            return ComparisonResult.INCOMPATIBLE
        a, b = producer.element_tag, consumer.element_tag
        if a == b:
            return ComparisonResult.SAME
        if h.is_subtag(a, b):
            return ComparisonResult.LESS
        if h.is_subtag(b, a):
            return ComparisonResult.GREATER
        return ComparisonResult.INCOMPATIBLE

    if producer.rank != consumer.rank:
        return ComparisonResult.INCOMPATIBLE

    pairs = list(zip(producer.axes, consumer.axes))
    if any(not h.is_subtag(pa.tag, ca.tag) and not h.is_subtag(ca.tag, pa.tag)
           for pa, ca in pairs):
        if transpose_permutation(h, producer.axes, consumer.axes) is not None:
            return ComparisonResult.TRANSPOSE_SAME
        return ComparisonResult.INCOMPATIBLE

    if any(pa.dim is not None and ca.dim is not None and pa.dim != ca.dim
           for pa, ca in pairs):
        return ComparisonResult.DIM_INCOMPATIBLE

    if all(pa.tag == ca.tag for pa, ca in pairs):
        return ComparisonResult.SAME
    if any(pa.tag != ca.tag and h.is_subtag(ca.tag, pa.tag) for pa, ca in pairs):
        return ComparisonResult.GREATER
    return ComparisonResult.LESS


# --- textual form -----------------------------------------------------------
#
# Grammar:  "root"
#         | "scalar(" TagName ")"
#         | "[" AxisSpec ("," AxisSpec)* "]"    AxisSpec = TagName (":" Integer)?

_SCALAR_RE = re.compile(r"scalar\(\s*([A-Za-z][A-Za-z0-9_]*)\s*\)\Z")
_AXIS_RE = re.compile(r"([A-Za-z][A-Za-z0-9_]*)\s*(?::\s*(-?\d+))?\Z")


def parse_type_expr(h: TagHierarchy, text: str) -> NeuralType:
    """Parse the textual type form; inverse of :func:`render_type_expr`."""
    s = text.strip()
    if s == "root":
        return NeuralType.root()
    m = _SCALAR_RE.match(s)
    if m:
        return NeuralType.scalar(h, m.group(1))
    if not (s.startswith("[") and s.endswith("]")):
        raise TypeExprError(f"cannot parse type expression {text!r}")
    body = s[1:-1].strip()
    if not body:
        raise TypeExprError(f"empty axis list in {text!r}; use 'root' for the root type")
    axes = []
    for part in body.split(","):
        m = _AXIS_RE.match(part.strip())
        if not m:
            raise TypeExprError(f"bad axis spec {part.strip()!r} in {text!r}")
        tag, dim = m.group(1), m.group(2)
        if dim is not None and int(dim) < 1:
            raise InvalidDimError(f"axis dim must be >= 1, got {dim} in {text!r}")
        axes.append(AxisType(tag, int(dim) if dim is not None else None))
    return NeuralType.tensor(h, axes)


def render_type_expr(t: NeuralType) -> str:
    if t.kind is TypeKind.ROOT:
        return "root"
    if t.kind is TypeKind.NON_TENSOR:
        return f"scalar({t.element_tag})"
    parts = [ax.tag if ax.dim is None else f"{ax.tag}:{ax.dim}" for ax in t.axes]
    return "[" + ", ".join(parts) + "]"
