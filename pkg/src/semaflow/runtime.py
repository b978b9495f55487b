"""Actions over validated graphs: train, eval, infer, callbacks, checkpoints.

Training consumes ``accumulation_steps`` micro-batches per optimizer update
and averages their gradients (mean-reduced losses make this exactly a larger
batch). Sample order is a deterministic stream: one permutation per epoch
derived from (seed, data-layer id, epoch index), consumed sequentially across
epoch boundaries, so accumulation and resume equivalences are testable.

Checkpoints and tensor dumps use small length-prefixed binary formats
(magics ``NMCK``/``NMTD``) that round-trip bit-exactly; optimizer state is
kept in f32 so a save/load cycle reproduces the trajectory exactly.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
import numpy as np

from .backend import backward, forward
from .errors import (
    ActionError,
    CheckpointFormatError,
    DataExhaustedError,
    NoScalarLossError,
    NotValidatedError,
    SchemaError,
)
from .graph import Graph, read_graph_file
from .modulesys import DataLayerImpl, ModuleInstance, Parameter
from .typesys import TypeKind

CHECKPOINT_MAGIC = b"NMCK"
DUMP_MAGIC = b"NMTD"
FORMAT_VERSION = 1
_SEED_KEY = "__meta__.seed"


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ActionConfig:
    action: str  # "train" | "eval" | "infer"
    max_steps: int = 0
    batch_size: int = 32
    optimizer: OptimizerConfig = OptimizerConfig("sgd", 0.01)
    accumulation_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.action not in ("train", "eval", "infer"):
            raise SchemaError("$.action.action", f"unknown action {self.action!r}")
        if self.max_steps < 0:
            raise SchemaError("$.action.max_steps", "must be >= 0")
        if self.batch_size < 1:
            raise SchemaError("$.action.batch_size", "must be >= 1")
        if self.accumulation_steps < 1:
            raise SchemaError("$.action.accumulation_steps", "must be >= 1")
        if self.optimizer.lr <= 0:
            raise SchemaError("$.action.optimizer.lr", "must be > 0")


def action_config_from_doc(doc: dict) -> ActionConfig:
    if not isinstance(doc, dict):
        raise SchemaError("$.action", "must be an object")
    unknown = set(doc) - {"action", "max_steps", "batch_size", "optimizer",
                          "accumulation_steps", "seed"}
    if unknown:
        raise SchemaError(f"$.action.{sorted(unknown)[0]}", "unknown key")
    opt_doc = doc.get("optimizer", {})
    if not isinstance(opt_doc, dict):
        raise SchemaError("$.action.optimizer", "must be an object")
    opt_unknown = set(opt_doc) - {"kind", "lr", "momentum", "beta1", "beta2", "eps"}
    if opt_unknown:
        raise SchemaError(f"$.action.optimizer.{sorted(opt_unknown)[0]}", "unknown key")
    kind = opt_doc.get("kind", "sgd")
    if kind not in ("sgd", "adam"):
        raise SchemaError("$.action.optimizer.kind", f"unknown optimizer {kind!r}")
    opt = OptimizerConfig(
        kind=kind,
        lr=float(opt_doc.get("lr", 0.01)),
        momentum=float(opt_doc.get("momentum", 0.0)),
        beta1=float(opt_doc.get("beta1", 0.9)),
        beta2=float(opt_doc.get("beta2", 0.999)),
        eps=float(opt_doc.get("eps", 1e-8)),
    )
    return ActionConfig(
        action=doc.get("action", "train"),
        max_steps=int(doc.get("max_steps", 0)),
        batch_size=int(doc.get("batch_size", 32)),
        optimizer=opt,
        accumulation_steps=int(doc.get("accumulation_steps", 1)),
        seed=int(doc.get("seed", 0)),
    )


@dataclass(frozen=True)
class Callback:
    kind: str  # "loss_log" | "checkpoint" | "evaluator"
    interval_steps: int
    target: object = None  # path for checkpoint, Graph or path for evaluator

    def __post_init__(self):
        if self.kind not in ("loss_log", "checkpoint", "evaluator"):
            raise SchemaError("$.callbacks.kind", f"unknown callback kind {self.kind!r}")
        if self.interval_steps < 1:
            raise SchemaError("$.callbacks.interval_steps", "must be >= 1")


def callbacks_from_docs(docs: list) -> list[Callback]:
    out = []
    for i, doc in enumerate(docs or []):
        if not isinstance(doc, dict) or "kind" not in doc:
            raise SchemaError(f"$.callbacks[{i}]", "callback needs a 'kind'")
        unknown = set(doc) - {"kind", "interval_steps", "target"}
        if unknown:
            raise SchemaError(f"$.callbacks[{i}].{sorted(unknown)[0]}", "unknown key")
        out.append(Callback(doc["kind"], int(doc.get("interval_steps", 1)),
                            doc.get("target")))
    return out


@dataclass
class CallbackEvent:
    step: int
    kind: str
    payload: object


@dataclass
class TrainReport:
    losses: list[float]
    steps: int
    param_hash: str
    events: list[CallbackEvent] = field(default_factory=list)


# --- data sources ---------------------------------------------------------------

@dataclass
class DataSource:
    """Row-aligned full dataset, one array per output port."""

    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        rows = {a.shape[0] for a in self.arrays.values()}
        if len(rows) > 1:
            raise ActionError(f"data source ports disagree on row count: {sorted(rows)}")

    @property
    def num_rows(self) -> int:
        return next(iter(self.arrays.values())).shape[0] if self.arrays else 0


_DATA_LOADERS: dict[str, callable] = {}


def register_data_loader(kind: str, fn) -> None:
    """fn(instance) -> DataSource; keyed by DataLayerImpl.source."""
    _DATA_LOADERS[kind] = fn


def attach_arrays(instance: ModuleInstance, arrays: dict[str, np.ndarray]) -> None:
    """Bind in-memory arrays to an 'array' data layer (tests, notebooks)."""
    instance.source_arrays = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}


def _array_loader(instance: ModuleInstance) -> DataSource:
    arrays = getattr(instance, "source_arrays", None)
    if arrays is None:
        raise ActionError(f"no arrays attached to data layer {instance.id!r}")
    return DataSource(dict(arrays))


register_data_loader("array", _array_loader)


def resolve_source(instance: ModuleInstance) -> DataSource:
    impl = instance.descriptor.impl
    loader = _DATA_LOADERS.get(impl.source)
    if loader is None:
        raise ActionError(f"no data loader registered for source kind {impl.source!r}")
    src = loader(instance)
    missing = set(instance.output_types) - set(src.arrays)
    if missing:
        raise ActionError(f"{instance.id}: source lacks ports {sorted(missing)}")
    return src


class SampleStream:
    """Deterministic epoch-shuffling sample stream.

    One permutation per epoch from (seed entropy, epoch index); batches are
    consecutive slices of the concatenated permutation stream, so k
    micro-batches of size b cover exactly the same samples as one batch of
    size k*b. ``skip`` fast-forwards to a known consumed-sample position.
    """

    def __init__(self, source: DataSource, batch_size: int, seed_entropy: list[int],
                 repeats: bool, shuffle: bool):
        self.source = source
        self.batch_size = batch_size
        self.seed_entropy = list(seed_entropy)
        self.repeats = repeats
        self.shuffle = shuffle
        self.consumed = 0
        self._perm_cache: tuple[int, np.ndarray] | None = None

    def _perm(self, epoch: int) -> np.ndarray:
        if self._perm_cache and self._perm_cache[0] == epoch:
            return self._perm_cache[1]
        n = self.source.num_rows
        if self.shuffle:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(self.seed_entropy + [epoch])))
            perm = rng.permutation(n)
        else:
            perm = np.arange(n)
        self._perm_cache = (epoch, perm)
        return perm

    def skip(self, consumed: int) -> None:
        self.consumed = consumed

    def next_rows(self) -> np.ndarray:
        n = self.source.num_rows
        if n == 0:
            raise DataExhaustedError("data source is empty")
        if not self.repeats and self.consumed + self.batch_size > n:
            raise DataExhaustedError(
                f"need {self.batch_size} samples but only {n - self.consumed} remain "
                "and the data layer is non-repeating")
        idx = np.empty(self.batch_size, dtype=np.int64)
        filled = 0
        while filled < self.batch_size:
            epoch, off = divmod(self.consumed, n)
            take = min(self.batch_size - filled, n - off)
            idx[filled:filled + take] = self._perm(epoch)[off:off + take]
            filled += take
            self.consumed += take
        return idx

    def next_batch(self, instance_id: str) -> dict:
        rows = self.next_rows()
        return {(instance_id, port): arr[rows] for port, arr in self.source.arrays.items()}

    def one_epoch_batches(self, instance_id: str):
        """Sequential single pass, final partial batch included."""
        n = self.source.num_rows
        if n == 0:
            raise DataExhaustedError("data source is empty")
        for start in range(0, n, self.batch_size):
            rows = np.arange(start, min(start + self.batch_size, n))
            yield {(instance_id, port): arr[rows]
                   for port, arr in self.source.arrays.items()}


# --- optimizers -----------------------------------------------------------------

class Optimizer:
    """sgd (with momentum) or adam; all state is f32 so checkpoints are exact."""

    def __init__(self, cfg: OptimizerConfig, params: list[Parameter]):
        self.cfg = cfg
        self.params = list(params)
        self.slots: dict[str, dict[int, np.ndarray]] = {}
        if cfg.kind == "sgd":
            self.slots["v"] = {id(p): np.zeros_like(p.value) for p in self.params}
        elif cfg.kind == "adam":
            self.slots["m"] = {id(p): np.zeros_like(p.value) for p in self.params}
            self.slots["v"] = {id(p): np.zeros_like(p.value) for p in self.params}
        else:
            raise SchemaError("$.action.optimizer.kind", f"unknown optimizer {cfg.kind!r}")

    def apply(self, grads: dict[Parameter, np.ndarray], step: int) -> None:
        lr = np.float32(self.cfg.lr)
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            g = g.astype(np.float32, copy=False)
            if self.cfg.kind == "sgd":
                v = self.slots["v"][id(p)]
                v *= np.float32(self.cfg.momentum)
                v += g
                p.value -= lr * v
            else:
                b1, b2 = np.float32(self.cfg.beta1), np.float32(self.cfg.beta2)
                m = self.slots["m"][id(p)]
                v = self.slots["v"][id(p)]
                m *= b1
                m += (np.float32(1.0) - b1) * g
                v *= b2
                v += (np.float32(1.0) - b2) * (g * g)
                mhat = m / np.float32(1.0 - self.cfg.beta1 ** step)
                vhat = v / np.float32(1.0 - self.cfg.beta2 ** step)
                p.value -= lr * mhat / (np.sqrt(vhat) + np.float32(self.cfg.eps))

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for slot in sorted(self.slots):
            for p in self.params:
                out.append((f"{slot}::{_param_key(p)}", self.slots[slot][id(p)]))
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        for slot in self.slots:
            for p in self.params:
                key = f"{slot}::{_param_key(p)}"
                if key in entries:
                    arr = entries[key]
                    if arr.shape != p.value.shape:
                        raise CheckpointFormatError(
                            f"optimizer entry {key} has shape {arr.shape}, "
                            f"expected {p.value.shape}")
                    self.slots[slot][id(p)][...] = arr


def _param_key(p: Parameter) -> str:
    return f"{p.key[0]}.{p.key[1]}"


def parameter_hash(params: list[Parameter]) -> str:
    digest = hashlib.sha256()
    for p in sorted(params, key=_param_key):
        digest.update(_param_key(p).encode("utf-8"))
        digest.update(p.value.tobytes())
    return digest.hexdigest()


# --- checkpoint / dump binary formats ---------------------------------------------

def _write_entry(f, key: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw_key = key.encode("utf-8")
    f.write(struct.pack("<I", len(raw_key)))
    f.write(raw_key)
    f.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(data.tobytes())


def _read_entry(f) -> tuple[str, np.ndarray]:
    (key_len,) = struct.unpack("<I", _read_exact(f, 4))
    key = _read_exact(f, key_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return key, arr.copy()


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError("unexpected end of file")
    return data


def _seed_limbs(seed: int) -> np.ndarray:
    sign = 1.0 if seed >= 0 else -1.0
    mag = abs(seed)
    return np.array([sign, mag >> 24, mag & 0xFFFFFF], dtype=np.float32)


def _seed_from_limbs(arr: np.ndarray) -> int:
    sign, hi, lo = (int(v) for v in arr)
    return sign * ((hi << 24) | lo)


@dataclass
class Checkpoint:
    version: int
    seed: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int


def write_checkpoint(path, g: Graph, optimizer: Optimizer | None, step: int) -> None:
    params = g.parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(params) + 1))
        _write_entry(f, _SEED_KEY, _seed_limbs(g.seed))
        for p in params:
            _write_entry(f, _param_key(p), p.value)
        opt_entries = optimizer.state_entries() if optimizer is not None else []
        f.write(struct.pack("<I", len(opt_entries)))
        for key, arr in opt_entries:
            _write_entry(f, key, arr)
        f.write(struct.pack("<Q", step))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
        params = dict(_read_entry(f) for _ in range(n_params))
        (n_opt,) = struct.unpack("<I", _read_exact(f, 4))
        optimizer = dict(_read_entry(f) for _ in range(n_opt))
        (step,) = struct.unpack("<Q", _read_exact(f, 8))
    if _SEED_KEY not in params:
        raise CheckpointFormatError("checkpoint lacks the seed entry")
    seed = _seed_from_limbs(params.pop(_SEED_KEY))
    return Checkpoint(FORMAT_VERSION, seed, params, optimizer, step)


def apply_checkpoint(g: Graph, optimizer: Optimizer | None, ckpt: Checkpoint) -> int:
    if ckpt.seed != g.seed:
        raise CheckpointFormatError(
            f"checkpoint was written for graph seed {ckpt.seed}, not {g.seed}")
    by_key = {_param_key(p): p for p in g.parameters()}
    for key, arr in ckpt.params.items():
        p = by_key.get(key)
        if p is None:
            raise CheckpointFormatError(f"checkpoint entry {key!r} matches no parameter")
        if arr.shape != p.value.shape:
            raise CheckpointFormatError(
                f"checkpoint entry {key!r} has shape {arr.shape}, expected {p.value.shape}")
        p.value[...] = arr
    if optimizer is not None:
        optimizer.load_state(ckpt.optimizer)
    return ckpt.step


def write_dump(path, entries: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(entries)))
        for key, arr in entries:
            _write_entry(f, key, arr)


def read_dump(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DUMP_MAGIC:
            raise CheckpointFormatError(f"{path} is not a tensor dump (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported dump version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        return dict(_read_entry(f) for _ in range(count))


# --- action helpers -----------------------------------------------------------------

def _data_layer(g: Graph) -> ModuleInstance:
    layers = [i for i in g.instances.values() if isinstance(i.descriptor.impl, DataLayerImpl)]
    if len(layers) != 1:
        raise ActionError(f"actions need exactly one data layer, found {len(layers)}")
    return layers[0]


def _scalar_sinks(g: Graph) -> list[tuple[str, str]]:
    return [(i, p) for (i, p) in g.sinks
            if g.instances[i].output_types[p].kind is TypeKind.NON_TENSOR]


def _loss_sink(g: Graph) -> tuple[str, str]:
    scalars = _scalar_sinks(g)
    if len(scalars) != 1:
        raise NoScalarLossError(
            f"training needs exactly one scalar loss sink, found {len(scalars)}")
    return scalars[0]


def _stream_for(g: Graph, cfg: ActionConfig, layer: ModuleInstance,
                shuffle: bool) -> SampleStream:
    source = resolve_source(layer)
    entropy = [cfg.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(layer.id.encode("utf-8"))]
    repeats = bool(layer.params.get("repeats", True))
    return SampleStream(source, cfg.batch_size, entropy, repeats, shuffle)


def _metric_name(g: Graph, used: set, instance: str, port: str) -> str:
    if port not in used:
        used.add(port)
        return port
    return f"{instance}.{port}"


# --- actions -------------------------------------------------------------------------

def run_callbacks(step: int, callbacks: list[Callback], ctx: dict) -> list[CallbackEvent]:
    """Fire every callback whose interval divides the step, in registration order.

    Callback failures become "error" events; they never abort training.
    """
    events = []
    for cb in callbacks:
        if step % cb.interval_steps != 0:
            continue
        try:
            if cb.kind == "loss_log":
                line = f"step={step} loss={ctx['last_loss']:.6f}"
                events.append(CallbackEvent(step, "loss_log", line))
            elif cb.kind == "checkpoint":
                path = str(cb.target).format(step=step)
                write_checkpoint(path, ctx["graph"], ctx.get("optimizer"), step)
                events.append(CallbackEvent(step, "checkpoint", path))
            elif cb.kind == "evaluator":
                eval_graph = _resolve_eval_graph(cb.target, ctx["graph"])
                metrics = evaluate(eval_graph, ctx["eval_cfg"])
                events.append(CallbackEvent(step, "evaluator", metrics))
        except Exception as exc:  # noqa: BLE001 - callbacks must not kill training
            events.append(CallbackEvent(step, "error", f"{cb.kind}: {exc}"))
    sink = ctx.get("event_sink")
    if sink is not None:
        for e in events:
            sink(e)
    return events


def _resolve_eval_graph(target, train_graph: Graph) -> Graph:
    if isinstance(target, Graph):
        return target
    eval_graph = read_graph_file(str(target), train_graph.registry)
    report = eval_graph.validate()
    if not report.ok:
        raise ActionError(f"evaluator graph invalid: {report.lines()}")
    adopt_parameters(eval_graph, train_graph)
    return eval_graph


def adopt_parameters(dst: Graph, src: Graph) -> int:
    """Make same-id, same-descriptor instances in dst share src's tensors."""
    adopted = 0

    def share(dst_inst: ModuleInstance, src_inst: ModuleInstance) -> int:
        if dst_inst.descriptor.name != src_inst.descriptor.name:
            return 0
        n = 0
        for name, p in src_inst.state.items():
            if name in dst_inst.state and dst_inst.state[name].value.shape == p.value.shape:
                dst_inst.state[name] = p
                n += 1
        for cid, child in dst_inst.children.items():
            if cid in src_inst.children:
                n += share(child, src_inst.children[cid])
        return n

    for iid, inst in dst.instances.items():
        if iid in src.instances:
            adopted += share(inst, src.instances[iid])
    return adopted


def train(g: Graph, cfg: ActionConfig, callbacks: list[Callback] = (),
          event_sink=None, resume_from=None) -> TrainReport:
    """Run optimizer updates until ``cfg.max_steps`` total steps are reached.

    Each update averages gradients over ``cfg.accumulation_steps``
    micro-batches. ``resume_from`` loads a checkpoint (parameters, optimizer
    state, step counter) and fast-forwards the sample stream, so an
    interrupted run continues exactly where it left off; max_steps counts the
    total including pre-resume steps.
    """
    if not g.validated:
        raise NotValidatedError("graph must pass validation before training")
    loss_key = _loss_sink(g)
    layer = _data_layer(g)
    params = g.parameters()
    optimizer = Optimizer(cfg.optimizer, params)
    stream = _stream_for(g, cfg, layer, shuffle=True)

    start_step = 0
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else read_checkpoint(resume_from)
        start_step = apply_checkpoint(g, optimizer, ckpt)
        stream.skip(start_step * cfg.accumulation_steps * cfg.batch_size)

    eval_cfg = ActionConfig(action="eval", batch_size=cfg.batch_size,
                            optimizer=cfg.optimizer, seed=cfg.seed)
    ctx = {"graph": g, "cfg": cfg, "optimizer": optimizer, "eval_cfg": eval_cfg,
           "event_sink": event_sink, "last_loss": float("nan")}
    report = TrainReport(losses=[], steps=0, param_hash="")

    for step in range(start_step + 1, cfg.max_steps + 1):
        acc = {p: np.zeros(p.value.shape, dtype=np.float64) for p in params}
        micro_losses = []
        for _ in range(cfg.accumulation_steps):
            batch = stream.next_batch(layer.id)
            sinks, tape = forward(g, batch, record=True)
            loss = sinks[loss_key]
            micro_losses.append(float(loss.data))
            grads = backward(tape, loss)
            for p, grad in grads.items():
                acc[p] += grad
        averaged = {p: (acc[p] / cfg.accumulation_steps).astype(np.float32)
                    for p in params}
        optimizer.apply(averaged, step)
        ctx["last_loss"] = float(np.mean(micro_losses))
        report.losses.append(ctx["last_loss"])
        report.steps += 1
        report.events.extend(run_callbacks(step, list(callbacks), ctx))

    report.param_hash = parameter_hash(params)
    return report


def evaluate(g_eval: Graph, cfg: ActionConfig) -> dict[str, float]:
    """One unshuffled pass over the eval data; sample-weighted mean per sink.

    Never mutates trainable state; metric names come from sink port names.
    """
    if not g_eval.validated:
        raise NotValidatedError("graph must pass validation before evaluation")
    layer = _data_layer(g_eval)
    scalars = _scalar_sinks(g_eval)
    if not scalars:
        raise NoScalarLossError("evaluation needs at least one scalar metric sink")
    if set(scalars) != set(g_eval.sinks):
        raise ActionError("evaluation sinks must all be scalar metrics")
    stream = _stream_for(g_eval, cfg, layer, shuffle=False)

    totals = {key: 0.0 for key in scalars}
    rows_seen = 0
    for batch in stream.one_epoch_batches(layer.id):
        rows = next(iter(batch.values())).shape[0]
        sinks, _ = forward(g_eval, batch)
        for key in scalars:
            totals[key] += float(sinks[key].data) * rows
        rows_seen += rows
    used: set = set()
    return {_metric_name(g_eval, used, i, p): totals[(i, p)] / rows_seen
            for (i, p) in scalars}


def infer(g: Graph, cfg: ActionConfig, out_path) -> int:
    """Write every sink tensor for every batch to a tensor dump; returns batches."""
    if not g.validated:
        raise NotValidatedError("graph must pass validation before inference")
    if not g.sinks:
        raise ActionError("inference needs at least one sink")
    layer = _data_layer(g)
    stream = _stream_for(g, cfg, layer, shuffle=False)
    entries: list[tuple[str, np.ndarray]] = []
    batches = 0
    if stream.source.num_rows > 0:
        for batch in stream.one_epoch_batches(layer.id):
            sinks, _ = forward(g, batch)
            for (i, p) in g.sinks:
                entries.append((f"{i}.{p}/{batches:05d}", sinks[(i, p)].data))
            batches += 1
    write_dump(out_path, entries)
    return batches
