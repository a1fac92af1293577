"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a `Tensor` wraps a C-contiguous float64
ndarray and, when it participates in a differentiable computation, carries a
link to its parent tensors plus a closure that pushes gradients to them.
Calling :func:`backward` on a scalar loss walks the recorded graph (the
"tape") once in reverse topological order, accumulates `.grad` buffers on
every tracked leaf, and then consumes the tape; a second `backward` on the
same graph raises.

Conventions enforced throughout:

* every forward op validates shapes explicitly and raises :class:`ShapeError`
  naming the op and the offending extents; the only implicit broadcasting is
  scalar-with-tensor,
* every forward op checks its result for NaN/Inf and raises
  :class:`NonFiniteError` immediately (fail fast rather than propagate),
* values are float64 and row-major, so finite-difference checks at 1e-4
  relative tolerance are meaningful.

The module also defines the binary tensor file format used by
checkpointing: little-endian, a u32 rank, one u32 per extent, then the raw
f64 payload.
"""

from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "add_bias",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "relu",
    "sigmoid",
    "tanh",
    "absolute",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "embedding",
    "cross_entropy",
    "conv2d",
    "batchnorm2d",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand extents do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Invalid use of the gradient tape (non-scalar loss, reused tape, ...)."""


_grad_enabled = True
_node_ids = itertools.count(1)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """A dense float64 array, optionally tracked on the gradient tape.

    `requires_grad=True` marks a leaf parameter; tensors produced by ops on
    tracked inputs are tracked automatically. `grad` is populated by
    :func:`backward` and has the same shape as `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite("tensor", arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_node_ids) if self.requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, off the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _result(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the tape if any parent is tracked."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = parents
        out._backward_fn = backward_fn
        out.tape_id = next(_node_ids)
    else:
        out._parents = ()
        out._backward_fn = None
        out.tape_id = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tracked leaf reachable from `loss`.

    The loss must be a scalar on the tape. The tape is consumed: interior
    nodes are released and a second call raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward: tape already consumed by a previous backward")
    if not loss.requires_grad:
        raise TapeError("backward: loss is not tracked on the tape")

    # Iterative post-order DFS; recursion would overflow on long decode chains.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
    # Consume the tape: drop closures and interior grads, keep leaf grads.
    for node in topo:
        if node._backward_fn is not None:
            node._backward_fn = None
            node._parents = ()
            node._consumed = True
            node.grad = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_operands(op: str, a, b):
    """Resolve the (tensor, tensor-or-scalar) forms of a binary op."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a = Tensor(np.float64(a))
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = Tensor(np.float64(b))
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{op}: operands must be Tensors or python scalars")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(only scalar-with-tensor broadcasting is supported)")
    return a, b


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Collapse a broadcast gradient back to a scalar operand's shape."""
    if shape == g.shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    out_data = a.data + b.data

    def grad_fn(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, g))

    return _result("add", out_data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    out_data = a.data - b.data

    def grad_fn(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, -g))

    return _result("sub", out_data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    out_data = a.data * b.data

    def grad_fn(g):
        _accum(a, _reduce_to(a.shape, g * b.data))
        _accum(b, _reduce_to(b.shape, g * a.data))

    return _result("mul", out_data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accum(a, -g)

    return _result("neg", -a.data, (a,), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis: (..., H) + (H,)."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} along last axis of {x.shape}")
    out_data = x.data + b.data

    def grad_fn(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _result("add_bias", out_data, (x, b), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2d @ 2d, batched 3d @ 3d, or 3d @ shared 2d."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

        def grad_fn(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched extents differ, {a.shape} @ {b.shape}")

        def grad_fn(g):
            _accum(a, g @ b.data.swapaxes(-1, -2))
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    elif a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

        def grad_fn(g):
            _accum(a, g @ b.data.T)
            _accum(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))

    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")

    return _result("matmul", a.data @ b.data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got {a.shape}")

    def grad_fn(g):
        _accum(a, g.swapaxes(-1, -2))

    return _result("transpose", a.data.swapaxes(-1, -2), (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def grad_fn(g):
        _accum(a, g.reshape(a.shape))

    return _result("reshape", a.data.reshape(shape), (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    axis = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != nd or base[:axis] != other[:axis] or base[axis + 1:] != other[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    extent = a.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {extent} of {a.shape}")
    index = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _accum(a, buf)

    return _result("slice_axis", a.data[index], (a,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def grad_fn(g):
        _accum(a, g * (a.data > 0.0))

    return _result("relu", out_data, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic

    def grad_fn(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _result("sigmoid", out_data, (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def grad_fn(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _result("tanh", out_data, (a,), grad_fn)


def absolute(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accum(a, g * np.sign(a.data))

    return _result("abs", np.abs(a.data), (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims))

    return _result("sum", out_data, (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.sum(axis=axis, keepdims=keepdims).size and _axis_count(a.shape, axis)

    def grad_fn(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims) / count)

    return _result("mean", out_data, (a,), grad_fn)


def _axis_count(shape: tuple, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax % len(shape)]
    return n


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _result("softmax", out_data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# lookups and losses
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table (V, E) indexed by an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]}) in lookup")

    def grad_fn(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _accum(table, buf)

    return _result("embedding", table.data[ids], (table,), grad_fn)


def cross_entropy(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class targets.

    logits: (N, V); targets: (N,) ints; mask: optional (N,) weights selecting
    the positions that contribute (e.g. non-pad). "mean" divides by the mask
    total, "sum" does not.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2d, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError(f"cross_entropy: target class out of range [0, {logits.shape[1]})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    w = np.ones(logits.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: mask shape {w.shape} does not match batch {logits.shape[0]}")
    total_w = w.sum()
    if reduction == "mean" and total_w <= 0:
        raise ValueError("cross_entropy: no unmasked targets to average over")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(x.shape[0])
    nll = lse - x[rows, targets]
    denom = total_w if reduction == "mean" else 1.0
    out_data = np.asarray((nll * w).sum() / denom)

    def grad_fn(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, targets] -= 1.0
        scale = (g.reshape(()) * w / denom)[:, None]
        _accum(logits, p * scale)

    return _result("cross_entropy", out_data, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and batch normalization
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2d convolution over (N, C, H, W) with an (Cout, Cin, kh, kw) kernel.

    Output extents follow floor((in + 2*pad - k) / stride) + 1. `pad_mode`
    "zeros" pads with zeros, "replicate" repeats the border pixels (which
    keeps spatially constant inputs constant through the conv).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_k, kh, kw = w.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_k} "
                         f"(input {x.shape}, kernel {w.shape})")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if pad_mode not in ("zeros", "replicate"):
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with pad {pad}")

    if pad > 0:
        mode = "constant" if pad_mode == "zeros" else "edge"
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    w_flat = w.data.reshape(cout, -1)
    out = cols @ w_flat.T
    if b is not None:
        out += b.data
    out_data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accum(w, (g2.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w_flat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            hp, wp = xp.shape[2], xp.shape[3]
            dxp = np.zeros((n, cin, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                        kj:kj + stride * (wo - 1) + 1:stride] += dcols[:, :, :, :, ki, kj]
                    # slice stop is exact, so each window cell lands once
            if pad == 0:
                dx = dxp
            elif pad_mode == "zeros":
                dx = dxp[:, :, pad:pad + h, pad:pad + wdt]
            else:
                # replicate: fold padded-border gradient back onto edge pixels
                sh = np.zeros((h, hp))
                sh[np.clip(np.arange(hp) - pad, 0, h - 1), np.arange(hp)] = 1.0
                sw = np.zeros((wdt, wp))
                sw[np.clip(np.arange(wp) - pad, 0, wdt - 1), np.arange(wp)] = 1.0
                dx = np.einsum("hp,ncpq,wq->nchw", sh, dxp, sw)
            _accum(x, dx)

    return _result("conv2d", out_data, parents, grad_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, C, H, W).

    In training mode the batch statistics normalize the activations and the
    running buffers are updated in place with the given momentum (biased
    variance throughout, so a constant batch maps exactly to beta). In eval
    mode the running buffers are treated as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4d input, got {x.shape}")
    n, c, h, wdt = x.shape
    if n < 1:
        raise ShapeError("batchnorm2d: batch dimension must be >= 1")
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {t.shape} != ({c},)")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv_std[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            _accum(x, dx)

    return _result("batchnorm2d", out_data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# binary tensor format (used by checkpointing)
# ---------------------------------------------------------------------------


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Little-endian: u32 rank, u32 per extent, then the raw f64 payload."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    header = struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + arr.astype("<f8", copy=False).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("tensor payload truncated: missing rank header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    need = 4 + 4 * rank
    if len(buf) < need:
        raise ValueError("tensor payload truncated: missing extent header")
    shape = struct.unpack_from(f"<{rank}I", buf, 4) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != need + 8 * count:
        raise ValueError(f"tensor payload truncated: expected {need + 8 * count} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=need)
    return data.astype(np.float64).reshape(shape)


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
