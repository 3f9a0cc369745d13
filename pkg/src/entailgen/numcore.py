"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

The design is define-by-run: while a :class:`GradientGraph` is active (used
as a context manager), every operation appends a record to the graph's tape.
The tape is already topologically ordered because records are appended in
execution order, so ``backward`` is a single reverse sweep.

Only what the sequence models need is provided: strict 2-D matmul,
same-shape add/mul (plus bias-add over leading axes and scalar operands),
sigmoid/tanh, last-axis concat, row softmax, embedding row gather, and a
masked cross-entropy loss. There is deliberately no general broadcasting.

Tensors carry float32 data by default; float64 is used by the gradient
checking suite, which needs the headroom.
"""

from __future__ import annotations

import itertools
import struct
import threading

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, FormatError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)

_node_ids = itertools.count()


class Tensor:
    """Dense n-dimensional float array, optionally tracked by a graph.

    ``grad`` is populated (on leaves with ``requires_grad``) by
    :func:`backward`. ``node_id`` identifies the tensor inside any gradient
    graph it participates in; ids are globally unique so a parameter keeps
    its identity across the per-step graphs of define-by-run training.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


def as_tensor(value, like=None):
    """Wrap plain numbers/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


class _OpRecord:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_graph_state = threading.local()


def _active_graph():
    stack = getattr(_graph_state, "stack", None)
    return stack[-1] if stack else None


class GradientGraph:
    """Tape of operation records in execution (hence topological) order.

    A graph is confined to the thread that opened it. It is single-use:
    after :meth:`backward` runs, recording into it is an error, matching the
    rebuild-per-step training discipline.
    """

    def __init__(self):
        self.records = []
        self.finalized = False

    def __enter__(self):
        if not hasattr(_graph_state, "stack"):
            _graph_state.stack = []
        _graph_state.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_state.stack.pop()
        return False

    def _record(self, kind, inputs, output, backward_fn):
        if self.finalized:
            raise ContractError("cannot record into a finalized graph")
        self.records.append(_OpRecord(kind, inputs, output, backward_fn))

    def backward(self, loss, leaves=None):
        """Reverse sweep from a scalar loss; see module-level :func:`backward`."""
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        self.finalized = True
        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.get(rec.output.node_id)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward_fn(g_out)):
                if g is None:
                    continue
                acc = grads.get(inp.node_id)
                grads[inp.node_id] = g if acc is None else acc + g
        if leaves is None:
            leaves = []
            seen = set()
            for rec in self.records:
                for inp in rec.inputs:
                    if inp.requires_grad and inp.node_id not in seen:
                        seen.add(inp.node_id)
                        leaves.append(inp)
        for leaf in leaves:
            leaf.grad = grads.get(leaf.node_id)
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        return [leaf.grad for leaf in leaves]


def backward(graph, loss, leaves=None):
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Leaves not used by the loss receive zero gradients. Returns the list of
    gradient arrays aligned with ``leaves`` (or with the discovered
    requires-grad leaves, in first-use order, when ``leaves`` is None).
    """
    return graph.backward(loss, leaves)


def _emit(kind, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None:
        graph._record(kind, tuple(inputs), out, backward_fn)
    return out


def _sum_to_shape(g, shape):
    # Reduce a gradient back to an operand shape after bias/scalar broadcast.
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _check_addlike(op, a, b):
    # Permitted: identical shapes, scalar operand, or 1-D bias against the
    # last axis (broadcast over leading axes). Nothing else.
    if a.shape == b.shape:
        return
    if a.shape == () or b.shape == ():
        return
    vec, other = (a, b) if a.ndim == 1 else (b, a)
    if vec.ndim == 1 and other.ndim >= 1 and other.shape[-1] == vec.shape[0]:
        return
    raise DimensionError(op, a.shape, b.shape)


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_addlike("add", a, b)
    out = a.data + b.data

    def back(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _emit("add", (a, b), out, back)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_addlike("sub", a, b)
    out = a.data - b.data

    def back(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _emit("sub", (a, b), out, back)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_addlike("mul", a, b)
    out = a.data * b.data

    def back(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _emit("mul", (a, b), out, back)


def neg(a):
    return mul(a, -1.0)


def matmul(a, b):
    """Strict 2-D matrix product with dA = dC @ B^T, dB = A^T @ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), out, back)


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)

    def back(g, s=out):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (a,), out, back)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g, t=out):
        return (g * (1.0 - t * t),)

    return _emit("tanh", (a,), out, back)


def concat(tensors, axis=-1):
    """Concatenate along the last axis; inputs share all other extents."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead or t.ndim != tensors[0].ndim:
            raise DimensionError("concat", *(t.shape for t in tensors))
    out = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat", tensors, out, back)


def softmax(a):
    """Row softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError("softmax", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g, s=out):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _emit("softmax", (a,), out, back)


def gather_rows(table, indices):
    """Select rows of a 2-D table by integer index (embedding lookup).

    The backward rule scatter-adds the incoming gradient into the table.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError("gather_rows", table.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def back(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit("gather_rows", (table,), out, back)


def log_softmax(x, axis=-1):
    """Numerically stable log-softmax on a plain array (not an autodiff op)."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, mask=None, reduction="mean"):
    """Token-level negative log-likelihood of ``targets`` under row softmax.

    ``logits`` is (N, V); ``targets`` holds N indices into the V axis.
    ``mask``, when given, weights each position (0 excludes it); ``mean``
    divides by the number of included positions, ``sum`` does not divide.
    The backward rule is the classic (softmax - onehot) per included row.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy", logits.shape)
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise DimensionError("cross_entropy", logits.shape, tgt.shape)
    if n < 1:
        raise ContractError("cross_entropy on zero positions")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(
            f"cross_entropy: target index out of range for vocab of {v}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    w = np.ones(n, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError("cross_entropy", logits.shape, w.shape)

    x = logits.data.astype(np.float64, copy=False)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - x[np.arange(n), tgt]
    if reduction == "mean":
        denom = w.sum()
        if denom <= 0:
            raise ContractError("cross_entropy: mask excludes every position")
    else:
        denom = 1.0
    out = np.asarray((nll * w).sum() / denom, dtype=logits.dtype)

    def back(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        p[np.arange(n), tgt] -= 1.0
        p *= (w / denom)[:, None]
        return (np.asarray(g, dtype=np.float64).reshape(()) * p).astype(logits.dtype),

    return _emit("cross_entropy", (logits,), out, back)


def elementwise(kind, *inputs):
    """Dispatch by name, for callers that select the op at run time."""
    ops = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
           "concat-last-axis": lambda *ts: concat(ts)}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](*inputs)


# ---------------------------------------------------------------------------
# Parameter initialization and Adam
# ---------------------------------------------------------------------------

def uniform_param(shape, rng, scale=0.08, dtype=DEFAULT_DTYPE):
    """Leaf parameter with entries uniform in [-scale, scale]."""
    data = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class AdamState:
    """Per-parameter moment buffers and the step counter for Adam.

    Defaults follow the training setup used throughout: lr 1e-4,
    beta1 0.9, beta2 0.999, epsilon 1e-8.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step", (len(params),), (len(grads),), (len(state.m),))
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise DimensionError("adam_step", p.data.shape, g.shape)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Parameter checkpoint file ("EGCK")
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params):
    """Write named float32 arrays: magic, version, then per-name records.

    Each record is name length (u32 LE), name bytes, rank (u32 LE), extents
    (u32 LE each) and the row-major float32 LE payload. Round-trips
    bit-exactly for float32 inputs.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in named_params.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read an EGCK file back into an ordered dict of float32 arrays."""
    blob = open(path, "rb").read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    out = {}
    while pos < len(blob):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        rank = struct.unpack("<I", take(4, "rank"))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * count, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out
