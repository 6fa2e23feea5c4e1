"""Minimal dense-tensor engine with reverse-mode gradients.

Tensors are float32 numpy arrays of rank <= 3. Operations executed inside an
active :class:`Tape` are recorded together with whatever their backward rule
needs; :meth:`Tape.backward` then walks the records once in reverse order.
Operations executed with no active tape are plain forward computations, which
is how evaluation runs.

Leading batch axes are supported where the model needs them (``B x T x d``
activations multiplied by ``d x d`` weights, batched attention products), but
there is no general broadcasting beyond trailing-axis bias vectors.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32
MAX_RANK = 3

DEBUG = os.environ.get("TCAN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions."""


class SequenceTooShortError(ShapeError):
    """Raised when a convolution would produce fewer than one output row."""


class Tensor:
    """Dense float32 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()
# op name -> factor applied to that op's input gradients; a test hook only
_backward_scale: dict = {}


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the operations executed while it is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Intermediate results carry their gradients only inside this call, so
        running backward twice on the same tape adds the same leaf gradients
        twice.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            factor = _backward_scale.get(node.op)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    ig = ig * DTYPE(factor)
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
                elif inp.grad is None:
                    inp.grad = np.array(ig, dtype=DTYPE, copy=True)
                else:
                    inp.grad += ig


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


@contextlib.contextmanager
def scaled_backward(op: str, factor: float) -> Iterator[None]:
    """Multiply the input gradients of every ``op`` node by ``factor``.

    Exists so gradient checks can be shown to fail on a broken rule.
    """
    previous = _backward_scale.get(op)
    _backward_scale[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _backward_scale.pop(op, None)
        else:
            _backward_scale[op] = previous


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Run ops in another float type; gradient checks use float64.

    Changes a module-wide setting, so it must not overlap with training in
    another thread.
    """
    global DTYPE
    previous = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(i.data)) for i in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        for inp in inputs:
            if inp.requires_grad:
                out.requires_grad = True
                tape.nodes.append(Node(op, inputs, out, backward_fn))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_ONES: dict = {}


def _row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keeping it; a matmul is far faster than a ufunc
    reduction on short contiguous rows."""
    n = x.shape[-1]
    ones = _ONES.get(n)
    if ones is None:
        ones = _ONES[n] = np.ones((n, 1), dtype=DTYPE)
    return x @ ones


def _row_max(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    flat = np.ascontiguousarray(x.reshape(-1, n).T)
    return flat.max(axis=0).reshape(x.shape[:-1] + (1,))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or (len(sb) == 1 and sa[-1:] == sb):
        return
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} both need broadcasting")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form cannot overflow and saturates cleanly to exactly 0 or 1
    out = DTYPE(0.5) * (DTYPE(1) + np.tanh(DTYPE(0.5) * x.data))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    sign = np.sign(x.data)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported operand ranks: 2@2, 3@2 (shared right operand), 3@3 (batched).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or \
            (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]) or \
            (ad.ndim == 2 and bd.ndim == 3):
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if ad.ndim == 3 and bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result("transpose", np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def split_heads(x: Tensor, h: int) -> Tensor:
    """``[B x] L x d`` -> ``(B*h) x L x (d/h)``; heads become batch entries."""
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    b, n, d = xd.shape
    if d % h:
        raise ShapeError(f"split_heads: width {d} is not divisible by {h} heads")
    dk = d // h
    out = np.ascontiguousarray(xd.reshape(b, n, h, dk).transpose(0, 2, 1, 3)).reshape(b * h, n, dk)

    def bw(g):
        gx = g.reshape(b, h, n, dk).transpose(0, 2, 1, 3).reshape(b, n, d)
        return (gx[0] if squeeze else gx,)

    return _result("split_heads", out, (x,), bw)


def merge_heads(x: Tensor, h: int, squeeze: bool = False) -> Tensor:
    """Inverse of :func:`split_heads`; ``squeeze`` drops a unit batch axis."""
    bh, n, dk = x.shape
    b = bh // h
    out = np.ascontiguousarray(x.data.reshape(b, h, n, dk).transpose(0, 2, 1, 3)).reshape(b, n, h * dk)
    if squeeze:
        out = out[0]

    def bw(g):
        g = g.reshape(b, n, h, dk).transpose(0, 2, 1, 3).reshape(bh, n, dk)
        return (g,)

    return _result("merge_heads", out, (x,), bw)


# ---------------------------------------------------------------------------
# Normalisation and attention kernels
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    e = np.exp(x.data - _row_max(x.data))
    out = e / _row_sum(e)

    def bw(g):
        return (out * (g - _row_sum(g * out)),)

    return _result("softmax", out, (x,), bw)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardisation over the last axis followed by an affine map."""
    xd = x.data
    d = xd.shape[-1]
    inv_d = DTYPE(1.0 / d)
    xc = xd - _row_sum(xd) * inv_d
    var = _row_sum(xc * xc) * inv_d
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - _row_sum(gh) * inv_d - xhat * (_row_sum(gh * xhat) * inv_d))
        flat = (-1, d)
        ggain = (g * xhat).reshape(flat).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(flat).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result("layer_norm", out.astype(DTYPE, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# Sequence ops
# ---------------------------------------------------------------------------

def conv_output_length(t: int, k: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - k) // stride + 1


def conv1d_temporal(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                    padding: int = 0) -> Tensor:
    """Temporal convolution of ``[B x] T x d_in`` with a ``k x d_in x d_out`` kernel."""
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d_temporal: kernel length {k} must be odd")
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    b, t, dx = xd.shape
    if dx != d_in:
        raise ShapeError(f"conv1d_temporal: input width {dx} does not match kernel {kernel.shape}")
    t_out = conv_output_length(t, k, stride, padding)
    if t_out < 1:
        raise SequenceTooShortError(
            f"conv1d_temporal: length {t} with k={k}, stride={stride}, padding={padding} "
            f"gives {t_out} output rows")
    xp = np.pad(xd, ((0, 0), (padding, padding), (0, 0))) if padding else xd
    starts = np.arange(t_out) * stride
    idx = starts[:, None] + np.arange(k)[None, :]          # t_out x k
    cols = xp[:, idx, :].reshape(b, t_out, k * d_in)
    wmat = kernel.data.reshape(k * d_in, d_out)
    out = cols @ wmat + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gflat = g3.reshape(-1, d_out)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (cols.reshape(-1, k * d_in).T @ gflat).reshape(k, d_in, d_out)
        if bias.requires_grad:
            gb = gflat.sum(axis=0)
        if x.requires_grad:
            gcols = (g3 @ wmat.T).reshape(b, t_out, k, d_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                # rows hit by tap j: starts + j; distinct within one tap
                gxp[:, starts + j, :] += gcols[:, :, j, :]
            gx = gxp[:, padding:padding + t, :] if padding else gxp
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    return _result("conv1d", out, (x, kernel, bias), bw)


def resample_rows(x: Tensor, lengths, n_out: int) -> Tensor:
    """Linear interpolation of each sequence to exactly ``n_out`` rows.

    ``x`` is ``B x T x d`` where sample ``i`` occupies its first
    ``lengths[i]`` rows (the rest is padding and never read). Output row ``j``
    samples source position ``j * (len - 1) / (n_out - 1)``, so the end points
    are kept and affine signals are reproduced.
    """
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    b, t, d = xd.shape
    lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (b,))
    if np.any(lengths < 1) or np.any(lengths > t):
        raise ShapeError(f"resample_rows: lengths {lengths.tolist()} out of range for {t} rows")
    if n_out == 1:
        pos = np.zeros((b, 1))
    else:
        pos = np.arange(n_out)[None, :] * ((lengths[:, None] - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, lengths[:, None] - 1)
    hi = np.minimum(lo + 1, lengths[:, None] - 1)
    w_hi = (pos - lo).astype(DTYPE)[:, :, None]
    w_lo = DTYPE(1) - w_hi
    rows = np.arange(b)[:, None]
    out = w_lo * xd[rows, lo] + w_hi * xd[rows, hi]
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        np.add.at(gx, (rows, lo), w_lo * g3)
        np.add.at(gx, (rows, hi), w_hi * g3)
        return (gx[0] if squeeze else gx,)

    return _result("resample", out.astype(DTYPE, copy=False), (x,), bw)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_features: leading extents differ, {a.shape} vs {b.shape}")
    da = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _result("concat", out, (a, b), lambda g: (g[..., :da], g[..., da:]))


def concat_many(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading extents differ, {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _result("concat", out, tuple(parts),
                   lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def mean_rows(x: Tensor) -> Tensor:
    """Average over the time axis (second to last)."""
    n = x.shape[-2]
    src = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / DTYPE(n), src).copy(),)

    return _result("mean_rows", x.data.mean(axis=-2), (x,), bw)


def last_row(x: Tensor) -> Tensor:
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=DTYPE)
        gx[..., -1, :] = g
        return (gx,)

    return _result("last_row", np.ascontiguousarray(x.data[..., -1, :]), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _result("sum", np.asarray(x.data.sum(), dtype=DTYPE), (x,),
                   lambda g: (np.full(src, g, dtype=DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    src, n = x.shape, x.size
    return _result("mean", np.asarray(x.data.mean(), dtype=DTYPE), (x,),
                   lambda g: (np.full(src, g / DTYPE(n), dtype=DTYPE),))
