"""semaflow: typed dataflow composition for neural modules.

Modules describe typed input/output ports; a semantic axis-tag type system
checks every connection when the activation-flow DAG is built; a lazy
reference backend executes train/eval/infer actions with reverse-mode
autodiff.
"""

from .typesys import (
    AxisType,
    ComparisonResult,
    NeuralType,
    Tag,
    TagHierarchy,
    TypeKind,
    compare_types,
    load_hierarchy,
    parse_type_expr,
    render_type_expr,
)
from .modulesys import ModuleDescriptor, ModuleInstance, ParamSchema, ParamSpec, PortSpec, Registry
from .graph import Binding, Graph, TensorHandle, ValidationReport, load_graph, save_graph
from .backend import Tensor, Tape, forward, backward, grad_check, kernel_call_count, reset_kernel_call_count
from .runtime import ActionConfig, Callback, TrainReport, evaluate, infer, train
from . import stdcollection

__all__ = [
    "AxisType", "ComparisonResult", "NeuralType", "Tag", "TagHierarchy", "TypeKind",
    "compare_types", "load_hierarchy", "parse_type_expr", "render_type_expr",
    "ModuleDescriptor", "ModuleInstance", "ParamSchema", "ParamSpec", "PortSpec", "Registry",
    "Binding", "Graph", "TensorHandle", "ValidationReport", "load_graph", "save_graph",
    "Tensor", "Tape", "forward", "backward", "grad_check",
    "kernel_call_count", "reset_kernel_call_count",
    "ActionConfig", "Callback", "TrainReport", "evaluate", "infer", "train",
    "stdcollection",
]
