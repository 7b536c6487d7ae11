"""Dense tensors plus reverse-mode automatic differentiation.

Only the operations the network actually uses are implemented. Values live
in NumPy arrays (float32 by default, float64 for gradient checking); when a
Tape is active, every op that touches a grad-enabled tensor appends a node
with a hand-written backward closure. The tape is appended in execution
order, which is already a topological order, so the backward pass is a
single reversed sweep.

All ops are pure and deterministic; nothing here mutates its inputs.
"""

import itertools

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count()
_tape_stack = []


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __deepcopy__(self, memo):
        # fresh tid: a copied tensor must never alias tape entries
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        # Only integer indexing along axis 0 participates in the tape.
        if isinstance(idx, (int, np.integer)):
            return take_line(self, int(idx))
        raise TypeError("only integer axis-0 indexing is supported on Tensor")


def as_tensor(x, like=None):
    """Coerce scalars/arrays to Tensor, matching `like`'s dtype if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out_id", "in_ids", "needs", "fn")

    def __init__(self, out_id, in_ids, needs, fn):
        self.out_id = out_id
        self.in_ids = in_ids
        self.needs = needs
        self.fn = fn


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def gradients(self, loss, params):
        """Gradients of a scalar loss w.r.t. a list of tensors.

        Parameters not reachable from the loss get zeros.
        """
        grads = backward(self, loss)
        return [grads.get(p.tid, np.zeros_like(p.data)) for p in params]


def _record(out, inputs, fn):
    """Attach a backward closure to `out` if a tape is live.

    `fn(g)` must return one gradient array (or None) per input, aligned
    with `inputs`.
    """
    tape = _active_tape()
    if tape is None:
        return out
    needs = [t.requires_grad for t in inputs]
    if not any(needs):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(out.tid, [t.tid for t in inputs], needs, fn))
    return out


def backward(tape, loss):
    """Reverse sweep over the tape; returns {tensor id: gradient array}."""
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.out_id)
        if g_out is None:
            continue  # not reachable from the loss
        g_ins = node.fn(g_out)
        for tid, need, g in zip(node.in_ids, node.needs, g_ins):
            if not need or g is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
    return grads


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data - b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data * b.data)
    da, db = a.data, b.data

    def fn(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _record(out, (a, b), fn)


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data / b.data)
    da, db = a.data, b.data

    def fn(g):
        return (_unbroadcast(g / db, da.shape),
                _unbroadcast(-g * da / (db * db), db.shape))

    return _record(out, (a, b), fn)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)
    da = a.data
    return _record(out, (a,), lambda g: (g * (s + da * s * (1.0 - s)),))


def softplus(a):
    # log(1 + exp(x)), stable form
    out = Tensor(np.logaddexp(0.0, a.data).astype(a.dtype))
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _record(out, (a,), lambda g: (g * s,))


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a):
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def sqrt(a):
    r = np.sqrt(a.data)
    out = Tensor(r)
    return _record(out, (a,), lambda g: (g * 0.5 / r,))


def absolute(a):
    out = Tensor(np.abs(a.data))
    s = np.sign(a.data)
    return _record(out, (a,), lambda g: (g * s,))


def clip(a, lo, hi):
    """Clamp values; gradient passes through only where no clamping occurred."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * mask,))


def arccos(a):
    """Inverse cosine. Input must already sit strictly inside (-1, 1)."""
    out = Tensor(np.arccos(a.data))
    da = a.data
    return _record(out, (a,), lambda g: (-g / np.sqrt(1.0 - da * da),))


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=a.dtype))
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(out, (a,), fn)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a, axis, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    out = Tensor(m if keepdims else np.squeeze(m, axis=axis))
    # ties: route the whole gradient to the first maximum along the axis
    onehot = np.zeros_like(a.data)
    idx = np.argmax(a.data, axis=axis)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)

    def fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (onehot * gg,)

    return _record(out, (a,), fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), fn)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tuple(tensors), fn)


def slice_axis(a, axis, lo, hi):
    """a[..., lo:hi, ...] along `axis`; gradient zero-pads the complement."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (a,), fn)


def take_line(a, i):
    """a[i] along axis 0 (one sequence element)."""
    out = Tensor(a.data[i])
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _record(out, (a,), fn)


def split_half(a):
    """Split the last axis into two equal halves."""
    c = a.shape[-1]
    if c % 2 != 0:
        raise ShapeError(f"split_half needs an even channel count, got {c}")
    return slice_axis(a, -1, 0, c // 2), slice_axis(a, -1, c // 2, c)


def expand_last(a):
    """Append a trailing length-1 axis (for outer products over the state dim)."""
    return reshape(a, a.shape + (1,))


# ---------------------------------------------------------------------------
# linear / convolutional layers


def linear(x, weight, bias=None):
    """Affine map over the last axis: y[..., o] = sum_i x[..., i] * W[o, i] + b[o]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    xd, wd = x.data, weight.data

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, fn)


def _pad_axis(arr, axis, before, after):
    pads = [(0, 0)] * arr.ndim
    pads[axis] = (before, after)
    return np.pad(arr, pads)


def conv1d(x, weight, bias=None):
    """Same-size 1D convolution across the line (axis -2), zero padded.

    x: (..., W, Cin), weight: (Cout, Cin, K) with K odd -> (..., W, Cout).
    """
    cout, cin, k = weight.shape
    if k % 2 != 1:
        raise ContractError(f"conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != weight fan-in {cin}")
    p = k // 2
    xp = _pad_axis(x.data, -2, p, p)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=xp.ndim - 2)
    # win: (..., W, Cin, K)
    y = np.einsum("...wck,ock->...wo", win, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    wd = weight.data

    def fn(g):
        gp = _pad_axis(g, -2, p, p)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=gp.ndim - 2)
        gx = np.einsum("...wok,ock->...wc", gwin, wd[:, :, ::-1], optimize=True)
        gw = np.einsum("...wo,...wck->ock", g, win, optimize=True)
        if bias is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, fn)


def depthwise_conv1d(x, weight, bias=None):
    """Same-size depthwise 1D convolution across the line (axis -2).

    x: (..., W, C), weight: (C, K) with K odd; channel c of the output
    depends only on channel c of the input.
    """
    c, k = weight.shape
    if k % 2 != 1:
        raise ContractError(f"depthwise_conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: {x.shape[-1]} channels vs {c} kernels")
    p = k // 2
    xp = _pad_axis(x.data, -2, p, p)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=xp.ndim - 2)
    # win: (..., W, C, K)
    y = np.einsum("...wck,ck->...wc", win, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    wd = weight.data

    def fn(g):
        gp = _pad_axis(g, -2, p, p)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=gp.ndim - 2)
        gx = np.einsum("...wck,ck->...wc", gwin, wd[:, ::-1], optimize=True)
        gw = np.einsum("...wc,...wck->ck", g, win, optimize=True)
        if bias is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, fn)


def causal_depthwise_conv(x, weight, bias=None):
    """Depthwise convolution along axis 0 (the along-track line axis).

    x: (H, ..., C), weight: (C, K). Output line y sees lines y-K+1 .. y,
    zero padded before the start of the sequence; weight[:, K-1] multiplies
    the newest line.
    """
    c, k = weight.shape
    if x.shape[-1] != c:
        raise ShapeError(f"causal conv: {x.shape[-1]} channels vs {c} kernels")
    xp = _pad_axis(x.data, 0, k - 1, 0)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)
    # win: (H, ..., C, K)
    y = np.einsum("h...ck,ck->h...c", win, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    wd = weight.data

    def fn(g):
        gp = _pad_axis(g, 0, 0, k - 1)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=0)
        gx = np.einsum("h...ck,ck->h...c", gwin, wd[:, ::-1], optimize=True)
        gw = np.einsum("h...c,h...ck->ck", g, win, optimize=True)
        if bias is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, fn)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last (feature) axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gamma/beta must match the feature axis")
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(as_tensor(1.0, like=x), sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gamma), beta)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, step=1e-5):
    """Max relative error between tape gradients and central differences.

    `f()` must rebuild the forward pass from `params` (a list of Tensors)
    and return a scalar Tensor. Everything must be in float64.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
    with Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(f().data)
            flat[i] = orig - step
            lm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during grad_check")
            num = (lp - lm) / (2.0 * step)
            rel = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
