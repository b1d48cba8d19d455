"""Minimal reverse-mode autodiff on dense numpy arrays.

The engine is define-by-run: every differentiable op appends a closure to
the tensor graph, and ``backward`` replays the closures in reverse
topological order. Only what small CNNs, attacks and the feature
regularizer need is implemented; no GPU, no sparse tensors, no
higher-order derivatives.

Subgradient conventions (fixed, deterministic):
  * relu'(0) = 0
  * maxpool ties route the gradient to the first maximal index in
    row-major window order
  * l2_norm gradient at 0 is 0
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


def _as_array(x, dtype=None):
    a = np.asarray(x, dtype=dtype)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def _check_nonempty(op, *arrays):
    for a in arrays:
        if a.size == 0:
            raise ShapeError(f"{op}: zero-size operand of shape {a.shape}")


class Tensor:
    """A dense array plus optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph machinery -----------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _wrap(other):
    if isinstance(other, Tensor):
        return other
    return Tensor(other)


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _make(data, parents, backward):
    req = _needs_grad(*parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_nonempty("add", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.shape))
    return _make(out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_nonempty("sub", a.data, b.data)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(-_unbroadcast(g, b.shape))
    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_nonempty("mul", a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.shape))
    return _make(out, (a, b), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_nonempty("matmul", a.data, b.data)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g @ b.data.T)
        if b.requires_grad:
            b._accum_grad(a.data.T @ g)
    return _make(out, (a, b), bwd)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g.reshape(a.shape))
    return _make(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    _check_nonempty("concat", *[t.data for t in tensors])
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum_grad(g[tuple(idx)])
    return _make(out, tensors, bwd)


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None):
    a = _wrap(a)
    _check_nonempty("sum", a.data)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum_grad(np.broadcast_to(g, a.shape))
        else:
            a._accum_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape))
    return _make(out, (a,), bwd)


def tmean(a, axis=None):
    a = _wrap(a)
    _check_nonempty("mean", a.data)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum_grad(np.broadcast_to(g / n, a.shape))
        else:
            a._accum_grad(np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))
    return _make(out, (a,), bwd)


def amax(a, axis=None):
    """Max reduction; ties route the gradient to the first maximal index."""
    a = _wrap(a)
    _check_nonempty("amax", a.data)
    if axis is None:
        flat = a.data.reshape(1, -1)
        arg = flat.argmax(axis=1)
        out = flat[0, arg[0]]

        def bwd(g):
            if a.requires_grad:
                full = np.zeros_like(flat)
                full[0, arg[0]] = g
                a._accum_grad(full.reshape(a.shape))
        return _make(out, (a,), bwd)
    ax = a.ndim - 1 if axis == -1 else axis
    arg = a.data.argmax(axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(arg, ax),
                              np.expand_dims(g, ax), axis=ax)
            a._accum_grad(full)
    return _make(out, (a,), bwd)


def l2_norm(a, axis=None):
    """Euclidean norm of the flattened tensor (or per row along ``axis``).

    The gradient at an exactly-zero vector is defined to be 0.
    """
    a = _wrap(a)
    _check_nonempty("l2_norm", a.data)
    sq = np.square(a.data)
    if axis is None:
        out = np.sqrt(sq.sum())
    else:
        out = np.sqrt(sq.sum(axis=axis))

    def bwd(g):
        if not a.requires_grad:
            return
        safe = np.where(out == 0.0, 1.0, out)
        if axis is None:
            a._accum_grad(np.where(out == 0.0, 0.0, g / safe) * a.data)
        else:
            scale = np.expand_dims(np.where(out == 0.0, 0.0, g / safe), axis)
            a._accum_grad(scale * a.data)
    return _make(out, (a,), bwd)


# -- nonlinearities ----------------------------------------------------------

def relu(a):
    a = _wrap(a)
    _check_nonempty("relu", a.data)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * mask)
    return _make(out, (a,), bwd)


def clamp(a, lo, hi):
    a = _wrap(a)
    _check_nonempty("clamp", a.data)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * mask)
    return _make(out, (a,), bwd)


def softmax(a, axis=-1):
    a = _wrap(a)
    _check_nonempty("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a._accum_grad(out * (g - dot))
    return _make(out, (a,), bwd)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    _check_nonempty("log_softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g - sm * g.sum(axis=axis, keepdims=True))
    return _make(out, (a,), bwd)


def pick(a, indices):
    """Select a[i, indices[i]] per row of a 2-d tensor."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"pick: expected 2-d tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match rows of {a.shape}")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ValueError(f"pick: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a._accum_grad(full)
    return _make(out, (a,), bwd)


# -- spatial ops -------------------------------------------------------------

def _im2col(x, kh, kw, stride, oh, ow):
    b, c, h, w = x.shape
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    # (B, OH, OW, C, KH, KW) -> rows ordered row-major per output pixel
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(
        b * oh * ow, c * kh * kw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation over NCHW input with OIHW kernels."""
    x, w = _wrap(x), _wrap(w)
    _check_nonempty("conv2d", x.data, w.data)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    xp = x.data if padding == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        b = _wrap(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} filters")
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, cout)
        if b is not None and b.requires_grad:
            b._accum_grad(gmat.sum(axis=0))
        if w.requires_grad:
            w._accum_grad((gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(bsz, oh, ow, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            x._accum_grad(dxp)
    return _make(out, parents, bwd)


def maxpool2d(x, kernel=2, stride=None):
    """Non-overlapping max pooling; ties go to the first index in row-major order."""
    x = _wrap(x)
    _check_nonempty("maxpool2d", x.data)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    if stride != kernel:
        raise ShapeError("maxpool2d: only stride == kernel supported")
    bsz, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"maxpool2d: input {x.shape} not divisible by kernel {kernel}")
    oh, ow = h // kernel, w // kernel
    win = x.data.reshape(bsz, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(bsz, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(bsz, c, oh, ow, kernel, kernel).transpose(
            0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        x._accum_grad(dx)
    return _make(out, (x,), bwd)


def global_maxpool2d(x):
    """Max over all spatial positions of an NCHW tensor -> (N, C)."""
    x = _wrap(x)
    _check_nonempty("global_maxpool2d", x.data)
    if x.ndim != 4:
        raise ShapeError(f"global_maxpool2d: expected 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    flat = x.data.reshape(bsz, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        x._accum_grad(dflat.reshape(x.shape))
    return _make(out, (x,), bwd)


# -- generic dispatch --------------------------------------------------------

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "concat": concat,
    "mean": tmean,
    "sum": tsum,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "l2_norm": l2_norm,
    "clamp": clamp,
}


def forward_op(op, *inputs, **params):
    """Apply a primitive by name; recorded on the graph if any input requires grad."""
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; known: {sorted(_OPS)}")
    if op == "concat":
        return _OPS[op](inputs, **params)
    return _OPS[op](*inputs, **params)
