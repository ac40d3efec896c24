"""Dense float64 tensors with record-based reverse-mode differentiation.

Every differentiable op is a pair of plain functions over numpy arrays
(``forward`` returning ``(out, saved)`` and ``backward`` mapping the output
gradient to one gradient per input). Ops executed while a :class:`Record` is
active, and that touch at least one tensor with ``requires_grad``, append an
:class:`Entry` to it. Entries are appended in execution order, so a record is
topologically ordered by construction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Record",
    "Entry",
    "ShapeError",
    "RecordError",
    "NumericalError",
    "tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "log_sigmoid",
    "softplus",
    "tanh",
    "mean",
    "sum",
    "reshape",
    "transpose",
    "slice",
    "concat",
    "conv2d",
    "row_softmax",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = "") -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        parts = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class RecordError(RuntimeError):
    """A computation record is malformed (cycle, missing node, non-scalar loss)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor's reflected op

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

    def __getstate__(self):
        return self.data, self.requires_grad, self.name

    def __setstate__(self, state) -> None:
        # ids are process-local; a restored tensor gets a fresh one
        self.data, self.requires_grad, self.name = state
        self.grad = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


@dataclass
class Entry:
    """One executed op: ``op`` applied to ``inputs`` produced ``output``."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


_active: list["Record"] = []


class Record:
    """Ordered log of differentiable ops executed inside ``with Record():``."""

    def __init__(self) -> None:
        self.entries: list[Entry] = []

    def __enter__(self) -> "Record":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, loss: Tensor | None = None) -> dict[int, int]:
        """Check topological order; returns output-id -> entry-index."""
        producer: dict[int, int] = {}
        for i, e in enumerate(self.entries):
            if e.output_id in producer:
                raise RecordError(f"tensor {e.output_id} produced twice (entries {producer[e.output_id]} and {i})")
            producer[e.output_id] = i
        for i, e in enumerate(self.entries):
            for tid in e.input_ids:
                j = producer.get(tid)
                if j is not None and j >= i:
                    raise RecordError(f"cycle: entry {i} ({e.op}) consumes tensor {tid} produced by entry {j}")
        if loss is not None and loss.id not in producer:
            raise RecordError(f"loss tensor {loss.id} is not produced by any entry in the record")
        return producer

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every entry from the leaf values; returns output-id -> array."""
        self.validate()
        values: dict[int, np.ndarray] = {}
        for e in self.entries:
            arrays = [values.get(t.id, t.data) for t in e.inputs]
            out, _ = OPS[e.op][0](*arrays, **e.attrs)
            values[e.output_id] = out
        return values


def _recording() -> Record | None:
    return _active[-1] if _active else None


# -- op machinery ---------------------------------------------------------

OPS: dict[str, tuple[Callable, Callable]] = {}


def _apply(name: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    fwd, _ = OPS[name]
    out, saved = fwd(*[t.data for t in inputs], **attrs)
    rec = _recording()
    track = rec is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        rec.entries.append(Entry(name, tuple(inputs), result, saved, attrs))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op}: produced non-finite values")


# elementwise binary


def _add_f(a, b):
    _broadcast_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_b(g, saved, a, b):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


OPS["add"] = (_add_f, _add_b)


def _sub_f(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_b(g, saved, a, b):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


OPS["sub"] = (_sub_f, _sub_b)


def _mul_f(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, None


def _mul_b(g, saved, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


OPS["mul"] = (_mul_f, _mul_b)


def _div_f(a, b):
    _broadcast_shape("div", a, b)
    out = a / b
    _check_finite("div", out)
    return out, out


def _div_b(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


OPS["div"] = (_div_f, _div_b)


def _neg_f(a):
    return -a, None


OPS["neg"] = (_neg_f, lambda g, s, a: (-g,))


# matmul


def _matmul_f(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None
    return np.matmul(a, b), None


def _matmul_b(g, saved, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


OPS["matmul"] = (_matmul_f, _matmul_b)


# elementwise unary


def _relu_f(a):
    return np.maximum(a, 0.0), None


OPS["relu"] = (_relu_f, lambda g, s, a: (g * (a > 0),))


def _sigmoid_f(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, out


OPS["sigmoid"] = (_sigmoid_f, lambda g, out, a: (g * out * (1.0 - out),))


def _log_f(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    _check_finite("log", out)
    return out, None


OPS["log"] = (_log_f, lambda g, s, a: (g / a,))


def _exp_f(a):
    with np.errstate(over="ignore"):
        out = np.exp(a)
    _check_finite("exp", out)
    return out, out


OPS["exp"] = (_exp_f, lambda g, out, a: (g * out,))


def _softplus_f(a):
    return np.logaddexp(0.0, a), None


def _softplus_b(g, s, a):
    return (g * _sigmoid_f(a)[0],)


OPS["softplus"] = (_softplus_f, _softplus_b)


def _log_sigmoid_f(a):
    return -np.logaddexp(0.0, -a), None


def _log_sigmoid_b(g, s, a):
    return (g * _sigmoid_f(-a)[0],)


OPS["log_sigmoid"] = (_log_sigmoid_f, _log_sigmoid_b)


def _tanh_f(a):
    out = np.tanh(a)
    return out, out


OPS["tanh"] = (_tanh_f, lambda g, out, a: (g * (1.0 - out * out),))


# reductions and shape ops


def _sum_f(a, axis=None, keepdims=False):
    return np.asarray(np.sum(a, axis=axis, keepdims=keepdims)), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_b(g, s, a, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


OPS["sum"] = (_sum_f, _sum_b)


def _mean_f(a, axis=None, keepdims=False):
    return np.asarray(np.mean(a, axis=axis, keepdims=keepdims)), None


def _mean_b(g, s, a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(a.shape[ax] for ax in axes)
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,)


OPS["mean"] = (_mean_f, _mean_b)


def _reshape_f(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None


OPS["reshape"] = (_reshape_f, lambda g, s, a, shape: (g.reshape(a.shape),))


def _transpose_f(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dimensions")
    return np.ascontiguousarray(np.transpose(a, axes)), None


def _transpose_b(g, s, a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


OPS["transpose"] = (_transpose_f, _transpose_b)


def _slice_f(a, index):
    try:
        return np.array(a[index]), None
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None


def _slice_b(g, s, a, index):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


OPS["slice"] = (_slice_f, _slice_b)


def _concat_f(*arrays, axis=0):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat", ref.shape, arr.shape, detail=f"axis={axis}")
    return np.concatenate(arrays, axis=axis), [a.shape[ax] for a in arrays]


def _concat_b(g, sizes, *arrays, axis=0):
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


OPS["concat"] = (_concat_f, _concat_b)


def _softmax_f(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _softmax_b(g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


OPS["row_softmax"] = (_softmax_f, _softmax_b)


# convolution over NHWC images with HWIO kernels


def _conv_f(x, w, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="expects x (B,H,W,Cin), w (kh,kw,Cin,Cout)")
    kh, kw, cin, cout = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    b, h, wd, _ = x.shape
    if h < kh or wd < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B,Ho,Wo,Cin,kh,kw) -> (B*Ho*Wo, kh*kw*Cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * cin)
    out = (cols @ w.reshape(kh * kw * cin, cout)).reshape(b, ho, wo, cout)
    return out, (cols, x.shape, ho, wo)


def _conv_b(g, saved, x, w, stride=1, pad=0):
    cols, padded_shape, ho, wo = saved
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(w.shape)
    gcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(g.shape[0], ho, wo, kh, kw, cin)
    gx = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
    if pad:
        gx = gx[:, pad:-pad, pad:-pad, :]
    return gx, gw


OPS["conv2d"] = (_conv_f, _conv_b)


# public functional API


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    return _apply("add", (_t(a), _t(b)))


def sub(a, b) -> Tensor:
    return _apply("sub", (_t(a), _t(b)))


def mul(a, b) -> Tensor:
    return _apply("mul", (_t(a), _t(b)))


def div(a, b) -> Tensor:
    return _apply("div", (_t(a), _t(b)))


def neg(a) -> Tensor:
    return _apply("neg", (_t(a),))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (_t(a), _t(b)))


def relu(a) -> Tensor:
    return _apply("relu", (_t(a),))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (_t(a),))


def log(a) -> Tensor:
    return _apply("log", (_t(a),))


def exp(a) -> Tensor:
    return _apply("exp", (_t(a),))


def softplus(a) -> Tensor:
    return _apply("softplus", (_t(a),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    return _apply("log_sigmoid", (_t(a),))


def tanh(a) -> Tensor:
    return _apply("tanh", (_t(a),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return _apply("sum", (_t(a),), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return _apply("mean", (_t(a),), axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Tensor:
    return _apply("reshape", (_t(a),), shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return _apply("transpose", (_t(a),), axes=None if axes is None else tuple(axes))


def slice(a, index) -> Tensor:  # noqa: A001
    return _apply("slice", (_t(a),), index=index)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _apply("concat", tuple(_t(t) for t in tensors), axis=axis)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return _apply("conv2d", (_t(x), _t(w)), stride=stride, pad=pad)


def row_softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    return _apply("row_softmax", (_t(a),))


# reverse pass


def backward(loss: Tensor, record: Record) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``.

    Leaves are tensors consumed by the record but not produced by it.
    """
    if loss.size != 1:
        raise RecordError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RecordError("loss does not depend on any tensor that requires grad")
    producer = record.validate(loss)
    stop = producer[loss.id]
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for e in reversed(record.entries[: stop + 1]):
        g = grads.pop(e.output_id, None)
        if g is None:
            continue
        in_grads = OPS[e.op][1](g, e.saved, *[t.data for t in e.inputs], **e.attrs)
        for t, gi in zip(e.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if t.id not in producer:
                leaves[t.id] = t
    for tid, t in leaves.items():
        g = np.asarray(grads[tid], dtype=np.float64).reshape(t.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for tensor {t.name or tid}")
        t.grad = g.copy() if t.grad is None else t.grad + g


def no_record():
    """Context manager that suspends recording (like running outside any Record)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._saved = list(_active)
        _active.clear()

    def __exit__(self, *exc):
        _active.extend(self._saved)


def finite_or_raise(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"{what}: non-finite values")
    return t


def add_n(terms: Sequence) -> Tensor:
    """Elementwise sum of same-shape tensors as one recorded reduction."""
    if not terms:
        raise ValueError("add_n of an empty sequence")
    ts = [_t(t) for t in terms]
    shape = ts[0].shape
    if all(t.size == 1 for t in ts):
        return sum(concat([reshape(t, (1,)) for t in ts]))
    if any(t.shape != shape for t in ts):
        raise ShapeError("add_n", *(t.shape for t in ts))
    return sum(concat([reshape(t, (1,) + shape) for t in ts], axis=0), axis=0)
