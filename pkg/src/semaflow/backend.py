"""Reference execution backend: dense f32 tensors, kernels, and reverse-mode tape.

Each kernel implements a forward rule and, when differentiable, a
vector-Jacobian-product rule. Execution walks a validated graph in topo
order, lowering every instance to primitive steps; with ``record=True`` a
:class:`Tape` captures the evaluations so :func:`backward` can accumulate
parameter gradients. A module-global invocation counter makes the lazy
execution contract observable: building and validating graphs never moves it.

Everything here is single-threaded; training tensors are float32 throughout,
while :func:`grad_check` re-runs the same kernels in float64 so the
finite-difference comparison is not polluted by f32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ActionError,
    DataFormatError,
    NonFiniteValueError,
    NonScalarSinkError,
    NotValidatedError,
    SemaflowError,
    ShapeMismatchError,
    TooManyParametersError,
)
from .graph import Graph
from .modulesys import ModuleInstance, Parameter, Step, _lower_into
from .typesys import NeuralType, TypeKind

_KERNEL_CALLS = 0


def kernel_call_count() -> int:
    return _KERNEL_CALLS


def reset_kernel_call_count() -> None:
    global _KERNEL_CALLS
    _KERNEL_CALLS = 0


@dataclass
class Tensor:
    """A dense value plus the neural type it instantiates (dims now concrete)."""

    data: np.ndarray
    ntype: NeuralType | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def _as_array(value, dtype) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype=dtype)


# --- kernels -------------------------------------------------------------------

def _squeeze_ids(ids: np.ndarray) -> np.ndarray:
    # Label columns are stored (..., 1); index arrays drop the trailing axis.
    if ids.ndim >= 1 and ids.shape[-1] == 1:
        ids = ids[..., 0]
    return ids.astype(np.int64)


def _linear_fwd(inputs, params, attrs):
    (x,), (w, b) = inputs, params
    return x @ w.T + b, None


def _linear_vjp(g, inputs, params, out, saved, attrs):
    (x,), (w, _b) = inputs, params
    dx = g @ w
    g2 = g.reshape(-1, g.shape[-1])
    dw = g2.T @ x.reshape(-1, x.shape[-1])
    db = g2.sum(axis=0)
    return [dx], [dw, db]


def _relu_fwd(inputs, params, attrs):
    (x,) = inputs
    return np.maximum(x, 0), None


def _relu_vjp(g, inputs, params, out, saved, attrs):
    (x,) = inputs
    return [g * (x > 0)], []


def _tanh_fwd(inputs, params, attrs):
    (x,) = inputs
    return np.tanh(x), None


def _tanh_vjp(g, inputs, params, out, saved, attrs):
    return [g * (1.0 - out * out)], []


def _log_softmax_fwd(inputs, params, attrs):
    (x,) = inputs
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


def _log_softmax_vjp(g, inputs, params, out, saved, attrs):
    softmax = np.exp(out)
    return [g - softmax * g.sum(axis=-1, keepdims=True)], []


def _nll_gather_index(lp, labels):
    idx = _squeeze_ids(labels)
    if idx.shape != lp.shape[:-1]:
        raise ShapeMismatchError("nll_loss", "labels", lp.shape[:-1], idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= lp.shape[-1]):
        raise DataFormatError(
            f"labels must lie in [0, {lp.shape[-1]}), got range "
            f"[{idx.min()}, {idx.max()}]")
    return idx


def _nll_loss_fwd(inputs, params, attrs):
    lp, labels = inputs
    idx = _nll_gather_index(lp, labels)
    picked = np.take_along_axis(lp, idx[..., None], axis=-1)
    return -picked.mean(dtype=lp.dtype), idx


def _nll_loss_vjp(g, inputs, params, out, saved, attrs):
    lp, _labels = inputs
    idx = saved
    dlp = np.zeros_like(lp)
    np.put_along_axis(dlp, idx[..., None], (-g / idx.size).astype(lp.dtype), axis=-1)
    return [dlp, None], []


def _mse_loss_fwd(inputs, params, attrs):
    p, t = inputs
    if p.shape != t.shape:
        raise ShapeMismatchError("mse_loss", "target", p.shape, t.shape)
    d = p - t
    return (d * d).mean(dtype=p.dtype), None


def _mse_loss_vjp(g, inputs, params, out, saved, attrs):
    p, t = inputs
    scale = 2.0 / p.size
    d = (p - t) * (scale * g)
    return [d, -d], []


def _concat_fwd(inputs, params, attrs):
    a, b = inputs
    axis = attrs["axis_index"]
    return np.concatenate([a, b], axis=axis), a.shape[axis]


def _concat_vjp(g, inputs, params, out, saved, attrs):
    axis, offset = attrs["axis_index"], saved
    da, db = np.split(g, [offset], axis=axis)
    return [np.ascontiguousarray(da), np.ascontiguousarray(db)], []


def _transpose_fwd(inputs, params, attrs):
    (x,) = inputs
    return np.ascontiguousarray(np.transpose(x, attrs["perm"])), None


def _transpose_vjp(g, inputs, params, out, saved, attrs):
    perm = attrs["perm"]
    inverse = np.argsort(perm)
    return [np.ascontiguousarray(np.transpose(g, inverse))], []


def _identity_fwd(inputs, params, attrs):
    (x,) = inputs
    return x.copy(), None


def _identity_vjp(g, inputs, params, out, saved, attrs):
    return [g], []


def _embedding_fwd(inputs, params, attrs):
    (ids,), (table,) = inputs, params
    idx = _squeeze_ids(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DataFormatError(
            f"token ids must lie in [0, {table.shape[0]}), got range "
            f"[{idx.min()}, {idx.max()}]")
    return table[idx], idx


def _embedding_vjp(g, inputs, params, out, saved, attrs):
    (table,) = params
    idx = saved
    dtable = np.zeros_like(table)
    np.add.at(dtable, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
    return [None], [dtable]


def _rnn_fwd(inputs, params, attrs):
    # Single-layer tanh recurrence driven by a constant per-sample input:
    # h_t = tanh(ctx.Wc^T + emb.We^T + h_{t-1}.Wh^T + b), output h_steps.
    ctx, emb = inputs
    wc, we, wh, b = params
    steps = attrs["steps"]
    drive = ctx @ wc.T + emb @ we.T + b
    hs = [np.zeros((ctx.shape[0], wh.shape[0]), dtype=ctx.dtype)]
    for _ in range(steps):
        hs.append(np.tanh(drive + hs[-1] @ wh.T))
    return hs[-1], hs


def _rnn_vjp(g, inputs, params, out, saved, attrs):
    ctx, emb = inputs
    wc, we, wh, _b = params
    hs = saved
    steps = attrs["steps"]
    dh = g
    dwc = np.zeros_like(wc)
    dwe = np.zeros_like(we)
    dwh = np.zeros_like(wh)
    db = np.zeros(wc.shape[0], dtype=ctx.dtype)
    dctx = np.zeros_like(ctx)
    demb = np.zeros_like(emb)
    for t in range(steps, 0, -1):
        dpre = dh * (1.0 - hs[t] * hs[t])
        db += dpre.sum(axis=0)
        dwc += dpre.T @ ctx
        dwe += dpre.T @ emb
        dwh += dpre.T @ hs[t - 1]
        dctx += dpre @ wc
        demb += dpre @ we
        dh = dpre @ wh
    return [dctx, demb], [dwc, dwe, dwh, db]


def _accuracy_fwd(inputs, params, attrs):
    lp, labels = inputs
    idx = _nll_gather_index(lp, labels)
    hits = (lp.argmax(axis=-1) == idx)
    return np.asarray(hits.mean(), dtype=lp.dtype), None


# Shape functions declare each kernel's output shape from its input and
# parameter shapes; the executor asserts them after every evaluation.

def _ids_shape(shape):
    return shape[:-1] if len(shape) >= 1 and shape[-1] == 1 else shape


def _linear_shape(ins, ps, attrs):
    return ins[0][:-1] + (ps[0][0],)


def _same_shape(ins, ps, attrs):
    return ins[0]


def _scalar_shape(ins, ps, attrs):
    return ()


def _concat_shape(ins, ps, attrs):
    k = attrs["axis_index"]
    a, b = ins
    return a[:k] + (a[k] + b[k],) + a[k + 1:]


def _transpose_shape(ins, ps, attrs):
    return tuple(ins[0][j] for j in attrs["perm"])


def _embedding_shape(ins, ps, attrs):
    return _ids_shape(ins[0]) + (ps[0][-1],)


def _rnn_shape(ins, ps, attrs):
    return (ins[0][0], ps[2][0])


@dataclass(frozen=True)
class Kernel:
    fwd: callable
    vjp: callable | None = None
    shape: callable = _same_shape


KERNELS: dict[str, Kernel] = {
    "linear": Kernel(_linear_fwd, _linear_vjp, _linear_shape),
    "relu": Kernel(_relu_fwd, _relu_vjp, _same_shape),
    "tanh": Kernel(_tanh_fwd, _tanh_vjp, _same_shape),
    "log_softmax": Kernel(_log_softmax_fwd, _log_softmax_vjp, _same_shape),
    "nll_loss": Kernel(_nll_loss_fwd, _nll_loss_vjp, _scalar_shape),
    "mse_loss": Kernel(_mse_loss_fwd, _mse_loss_vjp, _scalar_shape),
    "concat": Kernel(_concat_fwd, _concat_vjp, _concat_shape),
    "transpose": Kernel(_transpose_fwd, _transpose_vjp, _transpose_shape),
    "identity": Kernel(_identity_fwd, _identity_vjp, _same_shape),
    "embedding_lookup": Kernel(_embedding_fwd, _embedding_vjp, _embedding_shape),
    "rnn": Kernel(_rnn_fwd, _rnn_vjp, _rnn_shape),
    "accuracy": Kernel(_accuracy_fwd, None, _scalar_shape),
}


# --- tape ------------------------------------------------------------------------

# TapeNode keeps the raw arrays of one evaluation; the owning Parameter
# objects ride along so backward can key gradients by parameter identity.
@dataclass
class TapeNode:
    kernel: str
    inputs: tuple
    step_params: tuple  # Parameter objects
    param_arrays: tuple
    output: np.ndarray
    saved: object
    attrs: dict
    instance: str


@dataclass
class Tape:
    """Record of one forward pass; replaying it reproduces the values exactly."""

    nodes: list = field(default_factory=list)
    parameters: list = field(default_factory=list)
    _seen_params: set = field(default_factory=set)

    def add(self, node: TapeNode) -> None:
        self.nodes.append(node)
        for p in node.step_params:
            if id(p) not in self._seen_params:
                self._seen_params.add(id(p))
                self.parameters.append(p)


# --- execution --------------------------------------------------------------------

def _check_shape(instance_id: str, port: str, ntype: NeuralType, arr: np.ndarray) -> None:
    if ntype.kind is TypeKind.ROOT:
        return
    if ntype.kind is TypeKind.NON_TENSOR:
        if arr.size != 1:
            raise ShapeMismatchError(instance_id, port, "scalar", arr.shape)
        return
    if arr.ndim != ntype.rank:
        raise ShapeMismatchError(
            instance_id, port, f"rank {ntype.rank}", f"rank {arr.ndim}")
    for i, ax in enumerate(ntype.axes):
        if ax.dim is not None and arr.shape[i] != ax.dim:
            raise ShapeMismatchError(
                instance_id, port,
                tuple(ax.dim if ax.dim is not None else -1 for ax in ntype.axes),
                arr.shape)


def _normalize_batch(batch, dtype) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for key, value in (batch or {}).items():
        if isinstance(key, str):
            inst, _, port = key.partition(".")
            key = (inst, port)
        out[key] = _as_array(value, dtype)
    return out


class _Executor:
    def __init__(self, g: Graph, dtype, param_override):
        if not g.validated:
            raise NotValidatedError("graph must pass validation before execution")
        self.g = g
        self.dtype = dtype
        self.param_override = param_override or {}
        self.order = g.topo_order()
        # Pre-lower every instance once; executed per batch.
        self.lowered: dict[str, tuple[list[Step], dict[str, str]]] = {}
        for iid in self.order:
            inst = g.instances[iid]
            in_slots = {p: f"{iid}.{p}" for p in inst.input_types}
            self.lowered[iid] = _lower_into(inst, in_slots, depth=0)

    def param_value(self, p: Parameter) -> np.ndarray:
        return self.param_override.get(id(p), p.value)

    def run(self, batch, record=False, check_finite=True):
        global _KERNEL_CALLS
        env: dict[str, np.ndarray] = {}
        tape = Tape() if record else None
        batch = _normalize_batch(batch, self.dtype)

        for iid in self.order:
            inst = self.g.instances[iid]
            steps, _ = self.lowered[iid]
            if inst.is_data_layer:
                for port, ntype in inst.output_types.items():
                    if (iid, port) not in batch:
                        raise ActionError(f"batch is missing a value for {iid}.{port}")
                    arr = batch[(iid, port)]
                    _check_shape(iid, port, ntype, arr)
                    env[f"{iid}.{port}"] = arr
                continue
            for port, src in self.g.input_bindings(iid).items():
                arr = env[self._slot_of(src.instance, src.port)]
                _check_shape(iid, port, inst.input_types[port], arr)
                env[f"{iid}.{port}"] = arr
            for step in steps:
                self._run_step(step, env, tape, check_finite)

        sinks = {}
        for (i, p) in self.g.sinks:
            arr = env[self._slot_of(i, p)]
            sinks[(i, p)] = Tensor(arr, self.g.instances[i].output_types[p])
        return sinks, tape

    def _slot_of(self, instance_id: str, port: str) -> str:
        _, outs = self.lowered[instance_id]
        return outs[port]

    def _run_step(self, step: Step, env, tape, check_finite):
        global _KERNEL_CALLS
        kernel = KERNELS.get(step.kernel)
        if kernel is None:
            raise SemaflowError(f"unknown kernel {step.kernel!r} in {step.instance}")
        inputs = tuple(env[s] for s in step.inputs)
        param_arrays = tuple(self.param_value(p) for p in step.params)
        out, saved = kernel.fwd(inputs, param_arrays, step.attrs)
        out = np.asarray(out)
        _KERNEL_CALLS += 1
        declared = kernel.shape(tuple(a.shape for a in inputs),
                                tuple(a.shape for a in param_arrays), step.attrs)
        if tuple(out.shape) != tuple(declared):
            raise ShapeMismatchError(step.instance, step.output, declared, out.shape)
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteValueError(step.instance)
        env[step.output] = out
        if tape is not None:
            tape.add(TapeNode(step.kernel, inputs, step.params, param_arrays,
                              out, saved, step.attrs, step.instance))


def forward(g: Graph, batch, record: bool = False, check_finite: bool = True,
            dtype=np.float32, param_override=None):
    """Evaluate all sinks of a validated graph for one batch.

    ``batch`` maps data-layer ports ("id.port" or (id, port)) to values.
    Returns (sinks, tape); the tape is None unless ``record`` is set.
    """
    ex = _Executor(g, dtype, param_override)
    return ex.run(batch, record=record, check_finite=check_finite)


def backward(tape: Tape, sink) -> dict[Parameter, np.ndarray]:
    """Accumulate d(sink)/d(parameter) for every parameter the tape saw.

    The sink must be scalar. Parameters never reached by the reverse sweep
    map to zero tensors.
    """
    sink_arr = sink.data if isinstance(sink, Tensor) else np.asarray(sink)
    if sink_arr.size != 1:
        raise NonScalarSinkError(f"sink must be scalar, got shape {sink_arr.shape}")
    grads: dict[int, np.ndarray] = {id(sink_arr): np.ones_like(sink_arr)}
    param_grads: dict[int, np.ndarray] = {}

    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        kernel = KERNELS[node.kernel]
        if kernel.vjp is None:
            raise SemaflowError(
                f"kernel {node.kernel!r} is not differentiable but lies on the loss path")
        in_grads, p_grads = kernel.vjp(
            g, node.inputs, node.param_arrays, node.output, node.saved, node.attrs)
        for arr, d in zip(node.inputs, in_grads):
            if d is None:
                continue
            key = id(arr)
            grads[key] = grads[key] + d if key in grads else d
        for p, d in zip(node.step_params, p_grads):
            if d is None:
                continue
            key = id(p)
            param_grads[key] = param_grads[key] + d if key in param_grads else d

    out = {}
    for p in tape.parameters:
        got = param_grads.get(id(p))
        out[p] = got if got is not None else np.zeros_like(p.value)
    return out


# --- gradient verification ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]  # per top-level instance
    checked: int
    masked: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_error.values())


def _loss_sink(g: Graph):
    scalars = [(i, p) for (i, p) in g.sinks
               if g.instances[i].output_types[p].kind is TypeKind.NON_TENSOR]
    if len(scalars) != 1:
        raise NonScalarSinkError(
            f"expected exactly one scalar sink, found {len(scalars)}")
    return scalars[0]


#: Gradients below this magnitude are compared with absolute tolerance
#: tol * _REL_FLOOR instead of a pure ratio.
_REL_FLOOR = 1e-2


def grad_check(g: Graph, batch, epsilon: float = 1e-3, tol: float = 1e-4,
               max_parameters: int = 10_000) -> GradCheckReport:
    """Central finite differences vs the tape, element by element, in float64.

    float64 keeps f32 rounding out of the comparison, so discrepancies can
    only come from wrong vjp rules. Elements whose +/-epsilon evaluations
    flip any relu branch are excluded per the subgradient convention.
    """
    sink_key = _loss_sink(g)
    params = g.parameters()
    total = sum(p.value.size for p in params)
    if total > max_parameters:
        raise TooManyParametersError(f"{total} parameters exceed limit {max_parameters}")

    override = {id(p): p.value.astype(np.float64) for p in params}

    def run():
        sinks, tape = forward(g, batch, record=True, dtype=np.float64,
                              param_override=override)
        loss = float(sinks[sink_key].data)
        signs = [node.inputs[0] > 0 for node in tape.nodes if node.kernel == "relu"]
        return loss, signs, tape, sinks

    _loss0, _signs0, tape, sinks = run()
    analytic = backward(tape, sinks[sink_key])
    by_param = {id(p): analytic.get(p, np.zeros_like(override[id(p)])) for p in params}

    max_err: dict[str, float] = {}
    checked = masked = 0
    for p in params:
        inst = p.key[0].split("/")[0]
        arr = override[id(p)]
        a_grad = np.asarray(by_param[id(p)], dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            loss_plus, signs_plus, _, _ = run()
            flat[i] = orig - epsilon
            loss_minus, signs_minus, _, _ = run()
            flat[i] = orig
            if any(not np.array_equal(sp, sm) for sp, sm in zip(signs_plus, signs_minus)):
                masked += 1
                continue
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            a = float(a_grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
            max_err[inst] = max(max_err.get(inst, 0.0), err)
            checked += 1
    return GradCheckReport(max_err, checked, masked, tol)
