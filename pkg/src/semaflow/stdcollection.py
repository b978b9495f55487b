"""The shipped collection: data layers, standard modules, and wiring templates.

Descriptors here are desk-scale building blocks: a linear+tanh encoder
stack, an MLP decoder, a teacher-forced tanh-recurrence decoder, a linear
dimension-adapter connector, elementwise/loss/shape primitives, and CSV and
token-sequence data layers. ``build_encoder_decoder_template`` wires them
into the two classic variants (shared data layer and encoder; swappable
decoder and loss, with a connector repairing the width mismatch).

CSV dialect: comma-separated, header row required, decimal point, no
quoting. Token files: one space-separated integer sequence per line.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import DataFormatError
from .graph import Graph
from .modulesys import (
    ChildSpec,
    CompositeImpl,
    CompositeSpec,
    DataLayerImpl,
    ModuleDescriptor,
    ModuleInstance,
    ParamSchema,
    ParamSpec,
    PortSpec,
    PrimitiveImpl,
    Registry,
    StateSpec,
)
from .runtime import DataSource, register_data_loader
from .typesys import TagHierarchy

#: The twelve descriptors every installation ships.
STANDARD_NAMES = (
    "CsvDataLayer", "SequenceDataLayer", "LinearEncoder", "MlpDecoder",
    "RnnDecoder", "Connector", "LogSoftmax", "NllLoss", "MseLoss",
    "Concat", "Transpose", "EmbeddingLookup",
)


def standard_hierarchy() -> TagHierarchy:
    """Built-ins plus the shipped semantic tags, frozen."""
    h = TagHierarchy()
    h.define("Spectrogram", "Channel")
    h.define("Encoded", "Channel")
    h.define("WordEmbedding", "Embedding")
    h.define("Loss", "Channel")
    return h.freeze()


# --- primitive building blocks -------------------------------------------------

def _linear():
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


def _connector():
    return ModuleDescriptor(
        name="Connector",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("out_features", "int", required=True, constraint=">= 1"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("x", "[Batch, Channel:$in_features]"),),
        outputs=(PortSpec("y", "[Batch, Channel:$out_features]"),),
        impl=PrimitiveImpl(
            kernel="linear",
            state=(StateSpec("W", ("out_features", "in_features"), "glorot"),
                   StateSpec("b", ("out_features",), "zeros")),
        ),
        trainable=True,
    )


def _elementwise(name: str, kernel: str):
    return ModuleDescriptor(
        name=name,
        params=ParamSchema([
            ParamSpec("features", "int", required=True, constraint=">= 1"),
            ParamSpec("tag", "string", default="Channel"),
        ]),
        inputs=(PortSpec("x", "[Batch, $tag:$features]"),),
        outputs=(PortSpec("y", "[Batch, $tag:$features]"),),
        impl=PrimitiveImpl(kernel=kernel),
    )


def _log_softmax():
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


def _nll_loss():
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


def _mse_loss():
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


def _concat():
    return ModuleDescriptor(
        name="Concat",
        params=ParamSchema([
            ParamSpec("in_a", "string", required=True),
            ParamSpec("in_b", "string", required=True),
            ParamSpec("axis", "string", required=True),
        ]),
        inputs=(PortSpec("a", "$in_a"), PortSpec("b", "$in_b")),
        outputs=(PortSpec("out", "$in_a"),),  # widened along `axis` by the rule
        impl=PrimitiveImpl(kernel="concat"),
        port_rule="concat",
    )


def _transpose():
    return ModuleDescriptor(
        name="Transpose",
        params=ParamSchema([
            ParamSpec("in_type", "string", required=True),
            ParamSpec("perm", "int-list", required=True),
        ]),
        inputs=(PortSpec("x", "$in_type"),),
        outputs=(PortSpec("y", "$in_type"),),  # permuted by the rule
        impl=PrimitiveImpl(kernel="transpose"),
        port_rule="transpose",
    )


def _identity():
    return ModuleDescriptor(
        name="Identity",
        params=ParamSchema([ParamSpec("type", "string", required=True)]),
        inputs=(PortSpec("x", "$type"),),
        outputs=(PortSpec("y", "$type"),),
        impl=PrimitiveImpl(kernel="identity"),
    )


def _embedding_lookup():
    return ModuleDescriptor(
        name="EmbeddingLookup",
        params=ParamSchema([
            ParamSpec("vocab_size", "int", required=True, constraint=">= 1"),
            ParamSpec("embed_dim", "int", required=True, constraint=">= 1"),
            ParamSpec("in_type", "string", default="[Batch, Label]"),
            ParamSpec("out_type", "string", required=True),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("ids", "$in_type"),),
        outputs=(PortSpec("embedded", "$out_type"),),
        impl=PrimitiveImpl(
            kernel="embedding_lookup",
            state=(StateSpec("table", ("vocab_size", "embed_dim"), "glorot"),),
        ),
        trainable=True,
    )


def _rnn_core():
    return ModuleDescriptor(
        name="RnnCore",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("embed_dim", "int", required=True, constraint=">= 1"),
            ParamSpec("hidden", "int", required=True, constraint=">= 1"),
            ParamSpec("steps", "int", default=1, constraint=">= 1"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("context", "[Batch, Channel:$in_features]"),
                PortSpec("embedded", "[Batch, Embedding:$embed_dim]")),
        outputs=(PortSpec("h", "[Batch, Channel:$hidden]"),),
        impl=PrimitiveImpl(
            kernel="rnn",
            state=(StateSpec("Wc", ("hidden", "in_features"), "glorot"),
                   StateSpec("We", ("hidden", "embed_dim"), "glorot"),
                   StateSpec("Wh", ("hidden", "hidden"), "glorot"),
                   StateSpec("b", ("hidden",), "zeros")),
            attr_params=("steps",),
        ),
        trainable=True,
    )


def _accuracy():
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


# --- composites ------------------------------------------------------------------

def _linear_encoder():
    def build(params: dict) -> CompositeSpec:
        depth = params["depth"]
        children = []
        edges = [(("$in", "x"), ("l0", "x"))]
        for i in range(depth):
            last = i == depth - 1
            tag = "Encoded" if last else "Channel"
            children.append(ChildSpec(f"l{i}", "Linear", {
                "in_features": params["in_features"] if i == 0 else params["hidden"],
                "out_features": params["hidden"],
                "out_tag": tag,
                "seed": params["seed"],
            }))
            children.append(ChildSpec(f"a{i}", "Tanh",
                                      {"features": params["hidden"], "tag": tag}))
            edges.append(((f"l{i}", "y"), (f"a{i}", "x")))
            if not last:
                edges.append(((f"a{i}", "y"), (f"l{i + 1}", "x")))
        return CompositeSpec(tuple(children), tuple(edges),
                             (("y", (f"a{depth - 1}", "y")),))

    return ModuleDescriptor(
        name="LinearEncoder",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("hidden", "int", required=True, constraint=">= 1"),
            ParamSpec("depth", "int", default=1, constraint=">= 1"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("x", "[Batch, Channel:$in_features]"),),
        outputs=(PortSpec("y", "[Batch, Encoded:$hidden]"),),
        impl=CompositeImpl(build, validation_params={"in_features": 4, "hidden": 4}),
        trainable=True,
    )


def _mlp_decoder():
    def build(params: dict) -> CompositeSpec:
        return CompositeSpec(
            children=(
                ChildSpec("l0", "Linear", {"in_features": params["in_features"],
                                           "out_features": params["hidden"],
                                           "seed": params["seed"]}),
                ChildSpec("t0", "Tanh", {"features": params["hidden"]}),
                ChildSpec("l1", "Linear", {"in_features": params["hidden"],
                                           "out_features": params["num_classes"],
                                           "init": params["final_init"],
                                           "seed": params["seed"]}),
                ChildSpec("sm", "LogSoftmax", {"features": params["num_classes"]}),
            ),
            edges=(
                (("$in", "x"), ("l0", "x")),
                (("l0", "y"), ("t0", "x")),
                (("t0", "y"), ("l1", "x")),
                (("l1", "y"), ("sm", "x")),
            ),
            outputs=(("log_probs", ("sm", "y")),),
        )

    return ModuleDescriptor(
        name="MlpDecoder",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("hidden", "int", required=True, constraint=">= 1"),
            ParamSpec("num_classes", "int", required=True, constraint=">= 1"),
            ParamSpec("final_init", "string", default="glorot",
                      constraint="in {glorot, zeros}"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("x", "[Batch, Channel:$in_features]"),),
        outputs=(PortSpec("log_probs", "[Batch, LogProbs:$num_classes]"),),
        impl=CompositeImpl(build, validation_params={
            "in_features": 4, "hidden": 3, "num_classes": 2}),
        trainable=True,
    )


def _rnn_decoder():
    def build(params: dict) -> CompositeSpec:
        return CompositeSpec(
            children=(
                ChildSpec("emb", "EmbeddingLookup", {
                    "vocab_size": params["vocab_size"],
                    "embed_dim": params["embed_dim"],
                    "in_type": "[Batch, Label]",
                    "out_type": f"[Batch, Embedding:{params['embed_dim']}]",
                    "seed": params["seed"],
                }),
                ChildSpec("core", "RnnCore", {
                    "in_features": params["in_features"],
                    "embed_dim": params["embed_dim"],
                    "hidden": params["hidden"],
                    "steps": params["steps"],
                    "seed": params["seed"],
                }),
                ChildSpec("out", "Linear", {"in_features": params["hidden"],
                                            "out_features": params["num_classes"],
                                            "seed": params["seed"]}),
                ChildSpec("sm", "LogSoftmax", {"features": params["num_classes"]}),
            ),
            edges=(
                (("$in", "encoder_outputs"), ("core", "context")),
                (("$in", "targets"), ("emb", "ids")),
                (("emb", "embedded"), ("core", "embedded")),
                (("core", "h"), ("out", "x")),
                (("out", "y"), ("sm", "x")),
            ),
            outputs=(("log_probs", ("sm", "y")),),
        )

    return ModuleDescriptor(
        name="RnnDecoder",
        params=ParamSchema([
            ParamSpec("in_features", "int", required=True, constraint=">= 1"),
            ParamSpec("hidden", "int", required=True, constraint=">= 1"),
            ParamSpec("num_classes", "int", required=True, constraint=">= 1"),
            ParamSpec("vocab_size", "int", required=True, constraint=">= 1"),
            ParamSpec("embed_dim", "int", default=8, constraint=">= 1"),
            ParamSpec("steps", "int", default=1, constraint=">= 1"),
            ParamSpec("seed", "int", default=0),
        ]),
        inputs=(PortSpec("encoder_outputs", "[Batch, Channel:$in_features]"),
                PortSpec("targets", "[Batch, Label]")),
        outputs=(PortSpec("log_probs", "[Batch, LogProbs:$num_classes]"),),
        impl=CompositeImpl(build, validation_params={
            "in_features": 4, "hidden": 4, "num_classes": 3, "vocab_size": 3}),
        trainable=True,
    )


# --- data layers -------------------------------------------------------------------

def _csv_data_layer():
    return ModuleDescriptor(
        name="CsvDataLayer",
        params=ParamSchema([
            ParamSpec("path", "string", required=True),
            ParamSpec("num_features", "int", required=True, constraint=">= 1"),
            ParamSpec("num_classes", "int", required=True, constraint=">= 1"),
            ParamSpec("batch_size", "int", default=32, constraint=">= 1"),
            ParamSpec("label_column", "string", default="label"),
            ParamSpec("feature_tag", "string", default="Channel"),
            ParamSpec("label_tag", "string", default="Label"),
            ParamSpec("label_kind", "string", default="class",
                      constraint="in {class, float}"),
            ParamSpec("repeats", "bool", default=True),
        ]),
        inputs=(),
        outputs=(PortSpec("features", "[Batch, $feature_tag:$num_features]"),
                 PortSpec("labels", "[Batch, $label_tag]"),
                 PortSpec("lengths", "[Batch, Length]")),
        impl=DataLayerImpl(source="csv"),
    )


def _sequence_data_layer():
    return ModuleDescriptor(
        name="SequenceDataLayer",
        params=ParamSchema([
            ParamSpec("path", "string", required=True),
            ParamSpec("max_len", "int", required=True, constraint=">= 1"),
            ParamSpec("vocab_size", "int", required=True, constraint=">= 1"),
            ParamSpec("batch_size", "int", default=32, constraint=">= 1"),
            ParamSpec("padding_id", "int", default=0, constraint=">= 0"),
            ParamSpec("repeats", "bool", default=True),
        ]),
        inputs=(),
        outputs=(PortSpec("tokens", "[Batch, Time:$max_len]"),
                 PortSpec("mask", "[Batch, Time:$max_len]"),
                 PortSpec("labels", "[Batch, Time:$max_len]")),
        impl=DataLayerImpl(source="sequence"),
    )


def _resolve_path(instance: ModuleInstance) -> str:
    path = instance.params["path"]
    base = getattr(instance, "base_dir", "")
    return path if os.path.isabs(path) or not base else os.path.join(base, path)


def _load_csv(instance: ModuleInstance) -> DataSource:
    params = instance.params
    path = _resolve_path(instance)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: missing header row")
    header = [c.strip() for c in rows[0]]
    label_col = params["label_column"]
    if label_col not in header:
        raise DataFormatError(f"{path}: no column named {label_col!r} in header")
    feature_cols = [i for i, name in enumerate(header) if name != label_col]
    if len(feature_cols) != params["num_features"]:
        raise DataFormatError(
            f"{path}: declared {params['num_features']} feature columns, "
            f"header has {len(feature_cols)}")
    label_idx = header.index(label_col)

    features, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{r}: expected {len(header)} cells, got {len(row)}")
        try:
            features.append([float(row[i]) for i in feature_cols])
            raw = row[label_idx].strip()
            if params["label_kind"] == "class":
                label = int(raw)
                if not 0 <= label < params["num_classes"]:
                    raise DataFormatError(
                        f"{path}:{r}: label {label} outside [0, {params['num_classes']})")
                labels.append(float(label))
            else:
                labels.append(float(raw))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{r}: {exc}") from exc

    n = len(features)
    f_arr = np.asarray(features, dtype=np.float32).reshape(n, params["num_features"])
    l_arr = np.asarray(labels, dtype=np.float32).reshape(n, 1)
    lengths = np.full((n, 1), params["num_features"], dtype=np.float32)
    return DataSource({"features": f_arr, "labels": l_arr, "lengths": lengths})


def _load_sequences(instance: ModuleInstance) -> DataSource:
    params = instance.params
    path = _resolve_path(instance)
    max_len, vocab, pad = params["max_len"], params["vocab_size"], params["padding_id"]
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc

    tokens = np.full((len(lines), max_len), pad, dtype=np.float32)
    mask = np.zeros((len(lines), max_len), dtype=np.float32)
    labels = np.full((len(lines), max_len), pad, dtype=np.float32)
    for r, line in enumerate(lines):
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{r + 1}: {exc}") from exc
        for tok in ids:
            if not 0 <= tok < vocab:
                raise DataFormatError(f"{path}:{r + 1}: token id {tok} outside [0, {vocab})")
        ids = ids[:max_len]
        tokens[r, :len(ids)] = ids
        mask[r, :len(ids)] = 1.0
        labels[r, :max(len(ids) - 1, 0)] = ids[1:]
    return DataSource({"tokens": tokens, "mask": mask, "labels": labels})


register_data_loader("csv", _load_csv)
register_data_loader("sequence", _load_sequences)


# --- registration -------------------------------------------------------------------

def register_std_descriptors(reg: Registry) -> None:
    """Register the standard collection (plus its internal building blocks)."""
    for make in (_linear, lambda: _elementwise("Tanh", "tanh"),
                 lambda: _elementwise("Relu", "relu"), _identity, _log_softmax,
                 _nll_loss, _mse_loss, _concat, _transpose, _embedding_lookup,
                 _rnn_core, _accuracy, _connector, _csv_data_layer,
                 _sequence_data_layer, _linear_encoder, _mlp_decoder, _rnn_decoder):
        reg.register(make())


def std_registry(hierarchy: TagHierarchy | None = None) -> Registry:
    reg = Registry(hierarchy or standard_hierarchy())
    register_std_descriptors(reg)
    return reg


# --- wiring templates ----------------------------------------------------------------

_TEMPLATE_DEFAULTS = {
    "num_features": 2,
    "num_classes": 2,
    "enc_hidden": 16,
    "enc_depth": 1,
    "dec_hidden": 16,
    "rnn_hidden": 12,
    "rnn_in": 12,
    "embed_dim": 4,
    "steps": 1,
    "batch_size": 32,
    "seed": 0,
}


def build_encoder_decoder_template(reg: Registry, variant: str, params: dict,
                                   include_connector: bool = True) -> Graph:
    """Wire the shared data layer + encoder with a swappable decoder/loss pair.

    ``ctc_style``: data -> encoder -> MlpDecoder -> NllLoss.
    ``seq_style``: the same data layer and encoder (ids and params), then
    Connector -> RnnDecoder -> NllLoss; the decoder is teacher-forced from
    the data layer's labels. Without the connector the encoder/decoder
    widths differ, so connecting raises DIM_INCOMPATIBLE.
    """
    if variant not in ("ctc_style", "seq_style"):
        raise ValueError(f"unknown template variant {variant!r}")
    p = dict(_TEMPLATE_DEFAULTS)
    p.update(params)
    if "csv_path" not in p:
        raise ValueError("template params need csv_path")

    g = Graph(reg, seed=p["seed"])
    g.add("CsvDataLayer", "data", {
        "path": p["csv_path"],
        "num_features": p["num_features"],
        "num_classes": p["num_classes"],
        "batch_size": p["batch_size"],
        "feature_tag": "Spectrogram",
    })
    g.add("LinearEncoder", "encoder", {
        "in_features": p["num_features"],
        "hidden": p["enc_hidden"],
        "depth": p["enc_depth"],
        "seed": p["seed"],
    })
    g.connect("data.features", "encoder", "x")

    if variant == "ctc_style":
        g.add("MlpDecoder", "decoder", {
            "in_features": p["enc_hidden"],
            "hidden": p["dec_hidden"],
            "num_classes": p["num_classes"],
            "seed": p["seed"],
        })
        g.add("NllLoss", "loss", {"num_classes": p["num_classes"]})
        g.connect("encoder.y", "decoder", "x")
        g.connect("decoder.log_probs", "loss", "log_probs")
        g.connect("data.labels", "loss", "labels")
        g.add_sink("loss.loss")
    else:
        g.add("RnnDecoder", "rnn_decoder", {
            "in_features": p["rnn_in"],
            "hidden": p["rnn_hidden"],
            "num_classes": p["num_classes"],
            "vocab_size": p["num_classes"],
            "embed_dim": p["embed_dim"],
            "steps": p["steps"],
            "seed": p["seed"],
        })
        g.add("NllLoss", "seq_loss", {"num_classes": p["num_classes"]})
        if include_connector:
            g.add("Connector", "connector", {
                "in_features": p["enc_hidden"],
                "out_features": p["rnn_in"],
                "seed": p["seed"],
            })
            g.connect("encoder.y", "connector", "x")
            g.connect("connector.y", "rnn_decoder", "encoder_outputs")
        else:
            # Raises DIM_INCOMPATIBLE whenever enc_hidden != rnn_in.
            g.connect("encoder.y", "rnn_decoder", "encoder_outputs")
        g.connect("data.labels", "rnn_decoder", "targets")
        g.connect("rnn_decoder.log_probs", "seq_loss", "log_probs")
        g.connect("data.labels", "seq_loss", "labels")
        g.add_sink("seq_loss.loss")

    report = g.validate()
    if not report.ok:
        raise AssertionError(f"template failed validation: {report.lines()}")
    return g
