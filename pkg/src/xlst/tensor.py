"""Dense tensors with reverse-mode automatic differentiation.

Everything the encoder and the losses need, and nothing more: dense numpy
storage, a dynamically recorded tape (each op closes over its inputs and a
vector-Jacobian product), and a topological-order backward pass. Tensors are
immutable values once created; a tape belongs to a single forward pass, so
independent passes can run concurrently without shared state.

Broadcasting is restricted to scalar operands and leading-batch alignment
(one operand's shape must be a suffix of the other's).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from python/int data.

    Accepts 32, 64, "32", "64", np.float32 or np.float64.
    """
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


def get_default_dtype():
    return _default_dtype


def _resolve_dtype(dtype):
    if dtype in (32, "32"):
        return np.float32
    if dtype in (64, "64"):
        return np.float64
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ShapeError(f"unsupported tensor dtype {dtype}; use float32 or float64")
    return dt


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (used by 64-bit gradient tests)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    """Disable tape recording inside the block (frozen/eval forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable dense array plus its position in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is not None:
            arr = np.asarray(data, dtype=_resolve_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype.type not in _FLOAT_DTYPES:
                arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._vjp = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{grad})"

    # arithmetic sugar; all defined in terms of the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_constant(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(out_data, parents, vjp):
    """Wrap an op result; record the tape edge only when a grad can flow."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        a = _as_constant(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_constant(b, a.dtype)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype.name} vs {b.dtype.name}")
    _check_broadcast(a.shape, b.shape)
    return a, b


def _check_broadcast(sa, sb):
    # scalar or suffix alignment only; anything else is a caller bug
    if sa == () or sb == ():
        return
    short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = long[len(long) - len(short):]
    for ds, dl in zip(short, tail):
        if ds != dl and ds != 1 and dl != 1:
            raise ShapeError(f"shapes {sa} and {sb} do not align")


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def add(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def div(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.dtype)
    return _node(out, (a,), lambda g: (g * mask,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp", "overflow to non-finite value")
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log", "argument must be strictly positive")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    if np.any(a.data < 0):
        raise NumericError("sqrt", "argument must be non-negative")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _node(out, (a,), lambda g: (g.transpose(inv),))


def getitem(a, key):
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _node(out, (a,), vjp)


def concat(tensors, axis):
    tensors = list(tensors)
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise ShapeError("concat operands must share a dtype")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# reductions


def _restore_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_restore_reduced(g, a.shape, axis, keepdims),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if out.ndim == 0 and axis is None else a.data.size // out.size

    def vjp(g):
        return (_restore_reduced(g, a.shape, axis, keepdims) / count,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not isinstance(a, Tensor):
        a = _as_constant(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_constant(b, a.dtype)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype.name} vs {b.dtype.name}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


def gather_last(a, index):
    """Pick entries along the last axis: out[..., k] = a[..., index[..., k]]."""
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index, axis=-1)

    def vjp(g):
        ga = np.zeros_like(a.data)
        grid = np.indices(index.shape)
        np.add.at(ga, tuple(grid[:-1]) + (index,), g)
        return (ga,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis; eps inside the sqrt absorbs zero variance."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def masked_moments(a, mask):
    """Per-feature mean/variance over all leading axes, weighted by mask.

    a has shape (..., C); mask broadcasts against a with a trailing 1 axis
    (or is None for an unmasked batch). Returns (mean, var) tensors of shape
    (C,), differentiable through a.
    """
    if mask is None:
        axes = tuple(range(a.ndim - 1))
        mean = tmean(a, axis=axes)
        centered = sub(a, mean)
        var = tmean(mul(centered, centered), axis=axes)
        return mean, var
    mask = np.asarray(mask, dtype=a.dtype)
    n = float(mask.sum())
    if n <= 0:
        raise ShapeError("masked_moments: mask selects no frames")
    axes = tuple(range(a.ndim - 1))
    mean = mul(tsum(mul(a, mask), axis=axes), 1.0 / n)
    centered = sub(a, mean)
    var = mul(tsum(mul(mul(centered, centered), mask), axis=axes), 1.0 / n)
    return mean, var


def frame_batch_norm(a, gain, bias, mask, running_mean, running_var,
                     train_mode, momentum=0.99, eps=1e-5):
    """Per-feature normalization over the frame axis of a batch.

    Train mode computes statistics from the unmasked frames of the batch (on
    the tape, so gradients flow through them) and returns updated running
    statistics; eval mode normalizes with the running statistics unchanged.
    Returns (normalized, new_running_mean, new_running_var).
    """
    if train_mode:
        mean, var = masked_moments(a, mask)
        out = add(mul(div(sub(a, mean), sqrt(add(var, eps))), gain), bias)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean.data
        new_var = momentum * running_var + (1.0 - momentum) * var.data
        return out, new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)
    scale = 1.0 / np.sqrt(running_var.astype(a.dtype) + eps)
    shift = running_mean.astype(a.dtype)
    out = add(mul(mul(sub(a, shift), scale), gain), bias)
    return out, running_mean, running_var


# ---------------------------------------------------------------------------
# convolution building blocks (3x3 same-padding over time x frequency)


def im2col3x3(a):
    """Unfold (B, C, T, F) into 3x3 same-padded patches (B, T, F, C*9)."""
    if a.ndim != 4:
        raise ShapeError("im2col3x3 expects a (B, C, T, F) tensor")
    b, c, t, f = a.shape
    padded = np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # (B, C, T, F, 3, 3) -> (B, T, F, C, 3, 3) -> (B, T, F, C*9)
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, t, f, c * 9)

    def vjp(g):
        gp = g.reshape(b, t, f, c, 3, 3)
        gpad = np.zeros((b, c, t + 2, f + 2), dtype=a.dtype)
        for di in range(3):
            for dj in range(3):
                gpad[:, :, di:di + t, dj:dj + f] += gp[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return (gpad[:, :, 1:-1, 1:-1],)

    return _node(out, (a,), vjp)


def conv3x3(a, weight, bias):
    """Same-padding 3x3 convolution on (B, C_in, T, F) with (C_out, C_in, 3, 3)."""
    c_out, c_in = weight.shape[0], weight.shape[1]
    if a.shape[1] != c_in:
        raise ShapeError(f"conv3x3 channel mismatch: input {a.shape[1]}, weight {c_in}")
    patches = im2col3x3(a)                                  # (B, T, F, C_in*9)
    wmat = reshape(transpose(weight, (1, 2, 3, 0)), (c_in * 9, c_out))
    y = add(matmul(patches, wmat), bias)                    # (B, T, F, C_out)
    return transpose(y, (0, 3, 1, 2))


def maxpool_time2(a):
    """Max over non-overlapping frame pairs of (B, C, T, F); drops an odd tail."""
    b, c, t, f = a.shape
    tp = t // 2
    view = a.data[:, :, : 2 * tp, :].reshape(b, c, tp, 2, f)
    arg = view.argmax(axis=3)
    out = np.take_along_axis(view, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def vjp(g):
        ga = np.zeros_like(a.data)
        gview = ga[:, :, : 2 * tp, :].reshape(b, c, tp, 2, f)
        np.put_along_axis(gview, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        return (ga,)

    return _node(out, (a,), vjp)


def dropout(a, rate, rng):
    """Inverted dropout; the mask is a constant drawn from the caller's rng."""
    if rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, keep)


def custom_op(out_data, parents, vjp):
    """Record a hand-written op on the tape.

    For ops whose backward rule is cheaper or stabler written by hand than
    composed from primitives (the CTC loss). `vjp(g)` must return one
    gradient per parent, None for constants.
    """
    return _node(np.asarray(out_data), tuple(parents), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate gradients of a scalar loss over the recorded tape.

    Returns a dict mapping every requires_grad tensor reachable from `loss`
    to its gradient array. Tensors passed via `params` that sit on no path
    get an explicit zero gradient. Deterministic: parents are visited in
    recording order, so repeated calls on one tape are bit-identical.
    """
    if loss.data.shape != ():
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.data.shape}"
        )
    wanted = {id(p) for p in params} if params is not None else set()
    order = _toposort(loss)
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and (node._vjp is None or id(node) in wanted):
            result[node] = g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    if params is not None:
        for p in params:
            if p.requires_grad and p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def grad_check(f, x, eps=1e-6):
    """Max relative error of tape gradients vs central finite differences.

    `f` maps one Tensor to a scalar Tensor. Run at 64-bit precision; the
    comparison is elementwise with an absolute floor so that jointly tiny
    entries do not blow up the ratio.
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    probe = Tensor(x.data.copy(), requires_grad=True)
    analytic = backward(f(probe), params=[probe])[probe]
    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(probe.data.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(probe.data.copy())).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
