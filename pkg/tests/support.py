"""Shared builders for the test suite: a minimal descriptor set and hierarchies.

These mirror the shapes of the standard collection but stay deliberately
small so unit tests do not depend on it.
"""

import numpy as np

from semaflow.modulesys import (
    ChildSpec,
    CompositeImpl,
    CompositeSpec,
    DataLayerImpl,
    ModuleDescriptor,
    ParamSchema,
    ParamSpec,
    PortSpec,
    PrimitiveImpl,
    Registry,
    StateSpec,
)
from semaflow.typesys import TagHierarchy


def make_hierarchy() -> TagHierarchy:
    h = TagHierarchy()
    h.define("Spectrogram", "Channel")
    h.define("Encoded", "Channel")
    h.define("Loss", "Channel")
    return h.freeze()


def linear_descriptor():
    return ModuleDescriptor(
        name="Linear",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("out_features", "int", required=True, constraint=">= 1"),
            ParamSpec("in_tag", "string", default="Channel"),
            ParamSpec("out_tag", "string", default="Channel"),
            ParamSpec("init", "string", default="glorot", constraint="in {glorot, zeros}"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("x", "[Batch, $in_tag:$in_features]"),),
        outputs=(PortSpec("y", "[Batch, $out_tag:$out_features]"),),
        impl=PrimitiveImpl(
            kernel="linear",
            state=(StateSpec("W", ("out_features", "in_features"), "$init"),
                   StateSpec("b", ("out_features",), "zeros")),
        ),
        trainable=True,
    )


def relu_descriptor():
    return ModuleDescriptor(
        name="Relu",
        params=ParamSchema([
            ParamSpec("features", "int", required=True, constraint=">= 1"),
            ParamSpec("tag", "string", default="Channel"),
        ]),
        inputs=(PortSpec("x", "[Batch, $tag:$features]"),),
        outputs=(PortSpec("y", "[Batch, $tag:$features]"),),
        impl=PrimitiveImpl(kernel="relu"),
    )


def tanh_descriptor():
    return ModuleDescriptor(
        name="Tanh",
        params=ParamSchema([
            ParamSpec("features", "int", required=True, constraint=">= 1"),
            ParamSpec("tag", "string", default="Channel"),
        ]),
        inputs=(PortSpec("x", "[Batch, $tag:$features]"),),
        outputs=(PortSpec("y", "[Batch, $tag:$features]"),),
        impl=PrimitiveImpl(kernel="tanh"),
    )


def log_softmax_descriptor():
    return ModuleDescriptor(
        name="LogSoftmax",
        params=ParamSchema([
            ParamSpec("features", "int", required=True, constraint=">= 1"),
            ParamSpec("in_tag", "string", default="Channel"),
        ]),
        inputs=(PortSpec("x", "[Batch, $in_tag:$features]"),),
        outputs=(PortSpec("y", "[Batch, LogProbs:$features]"),),
        impl=PrimitiveImpl(kernel="log_softmax"),
    )


def nll_loss_descriptor():
    return ModuleDescriptor(
        name="NllLoss",
        params=ParamSchema([
            ParamSpec("num_classes", "int", required=True, constraint=">= 1"),
        ]),
        inputs=(PortSpec("log_probs", "[Batch, LogProbs:$num_classes]"),
                PortSpec("labels", "[Batch, Label]")),
        outputs=(PortSpec("loss", "scalar(Loss)"),),
        impl=PrimitiveImpl(kernel="nll_loss"),
    )


def mse_loss_descriptor():
    return ModuleDescriptor(
        name="MseLoss",
        params=ParamSchema([
            ParamSpec("pred_type", "string", default="[Batch, Channel]"),
            ParamSpec("target_type", "string", default="[Batch, Channel]"),
        ]),
        inputs=(PortSpec("prediction", "$pred_type"), PortSpec("target", "$target_type")),
        outputs=(PortSpec("loss", "scalar(Loss)"),),
        impl=PrimitiveImpl(kernel="mse_loss"),
    )


def identity_descriptor():
    return ModuleDescriptor(
        name="Identity",
        params=ParamSchema([ParamSpec("type", "string", required=True)]),
        inputs=(PortSpec("x", "$type"),),
        outputs=(PortSpec("y", "$type"),),
        impl=PrimitiveImpl(kernel="identity"),
    )


def concat_descriptor():
    return ModuleDescriptor(
        name="Concat",
        params=ParamSchema([
            ParamSpec("in_a", "string", required=True),
            ParamSpec("in_b", "string", required=True),
            ParamSpec("axis", "string", required=True),
        ]),
        inputs=(PortSpec("a", "$in_a"), PortSpec("b", "$in_b")),
        outputs=(PortSpec("out", "$in_a"),),  # actual type derived by the rule
        impl=PrimitiveImpl(kernel="concat"),
        port_rule="concat",
    )


def transpose_descriptor():
    return ModuleDescriptor(
        name="Transpose",
        params=ParamSchema([
            ParamSpec("in_type", "string", required=True),
            ParamSpec("perm", "int-list", required=True),
        ]),
        inputs=(PortSpec("x", "$in_type"),),
        outputs=(PortSpec("y", "$in_type"),),  # actual type derived from perm
        impl=PrimitiveImpl(kernel="transpose"),
        port_rule="transpose",
    )


def array_data_layer_descriptor():
    """Test-only source with declared port types; batches are fed explicitly."""
    return ModuleDescriptor(
        name="ArraySource",
        params=ParamSchema([
            ParamSpec("features", "int", required=True, constraint=">= 1"),
            ParamSpec("feature_tag", "string", default="Channel"),
            ParamSpec("repeats", "bool", default=True),
        ]),
        inputs=(),
        outputs=(PortSpec("x", "[Batch, $feature_tag:$features]"),
                 PortSpec("labels", "[Batch, Label]")),
        impl=DataLayerImpl(source="array"),
    )


def accuracy_descriptor():
    return ModuleDescriptor(
        name="Accuracy",
        params=ParamSchema([
            ParamSpec("num_classes", "int", required=True, constraint=">= 1"),
        ]),
        inputs=(PortSpec("log_probs", "[Batch, LogProbs:$num_classes]"),
                PortSpec("labels", "[Batch, Label]")),
        outputs=(PortSpec("accuracy", "scalar(Label)"),),
        impl=PrimitiveImpl(kernel="accuracy"),
    )


def seq_source_descriptor():
    """Rank-3 producer used by transpose scenarios."""
    return ModuleDescriptor(
        name="SeqSource",
        params=ParamSchema([
            ParamSpec("steps", "int", required=True, constraint=">= 1"),
            ParamSpec("features", "int", required=True, constraint=">= 1"),
        ]),
        inputs=(),
        outputs=(PortSpec("x", "[Time:$steps, Batch, Channel:$features]"),),
        impl=DataLayerImpl(source="array"),
    )


def consumer_descriptor():
    """Typed sink-side consumer for connection tests (identity transpose)."""
    return ModuleDescriptor(
        name="BatchMajorConsumer",
        params=ParamSchema([
            ParamSpec("steps", "int", required=True, constraint=">= 1"),
            ParamSpec("features", "int", required=True, constraint=">= 1"),
        ]),
        inputs=(PortSpec("x", "[Batch, Time:$steps, Channel:$features]"),),
        outputs=(PortSpec("y", "[Batch, Time:$steps, Channel:$features]"),),
        impl=PrimitiveImpl(kernel="identity"),
    )


def mlp_block_descriptor():
    spec = CompositeSpec(
        children=(
            ChildSpec("l0", "Linear", {"in_features": "$in_features", "out_features": "$hidden"}),
            ChildSpec("act", "Relu", {"features": "$hidden"}),
            ChildSpec("l1", "Linear", {"in_features": "$hidden", "out_features": "$out_features"}),
        ),
        edges=(
            (("$in", "x"), ("l0", "x")),
            (("l0", "y"), ("act", "x")),
            (("act", "y"), ("l1", "x")),
        ),
        outputs=(("y", ("l1", "y")),),
    )
    return ModuleDescriptor(
        name="MLPBlock",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("hidden", "int", required=True, constraint=">= 1"),
            ParamSpec("out_features", "int", required=True, constraint=">= 1"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("x", "[Batch, Channel:$in_features]"),),
        outputs=(PortSpec("y", "[Batch, Channel:$out_features]"),),
        impl=CompositeImpl(build=lambda p, _s=spec: _s,
                           validation_params={"in_features": 4, "hidden": 3, "out_features": 2}),
        trainable=True,
    )


def make_registry() -> Registry:
    reg = Registry(make_hierarchy())
    for make in (linear_descriptor, relu_descriptor, tanh_descriptor,
                 log_softmax_descriptor, nll_loss_descriptor, mse_loss_descriptor,
                 identity_descriptor, concat_descriptor, transpose_descriptor,
                 array_data_layer_descriptor, seq_source_descriptor,
                 consumer_descriptor, mlp_block_descriptor, accuracy_descriptor):
        reg.register(make())
    return reg


def blob_batch(rng: np.random.Generator, n: int, features: int = 2):
    """Two Gaussian blobs; returns (x, labels) as f32 arrays."""
    half = n // 2
    x0 = rng.normal(-1.0, 0.6, size=(half, features))
    x1 = rng.normal(+1.0, 0.6, size=(n - half, features))
    x = np.concatenate([x0, x1]).astype(np.float32)
    y = np.concatenate([np.zeros(half), np.ones(n - half)]).astype(np.float32)
    idx = rng.permutation(n)
    return x[idx], y[idx].reshape(-1, 1)
