"""Dense tensors with reverse-mode differentiation on an explicit tape.

Every differentiable operation appends a record (inputs, output, backward
rule) to the active :class:`Tape` when at least one input requires a
gradient.  :func:`backward` replays the records in reverse order and
accumulates gradients into the leaf tensors, then clears the tape.

Floating point precision is selected globally with :func:`set_default_dtype`
(64-bit by default, 32-bit for training runs).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError

_DTYPE = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the global precision."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "alive")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.alive = True


class Tape:
    """Ordered list of recorded operations; inputs always precede outputs."""

    def __init__(self):
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        rec = _Record(tuple(inputs), output, backward_fn)
        output._record = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.alive = False
            # the output keeps its identity as a non-leaf; drop references to inputs
            rec.inputs = ()
            rec.backward_fn = None
        self.records = []


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable recording, e.g. for inference."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op over ``inputs``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    rec = loss._record
    if rec is None or not rec.alive:
        raise ContractError(
            "loss is not the output of an operation on the live tape "
            "(backward already called, or recorded under no_grad)"
        )
    records = _TAPE.records
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for r in reversed(records):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        in_grads = r.backward_fn(g)
        for t, gi in zip(r.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is not None and t._record.alive:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    _TAPE.clear()


# ----------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    """Elementwise a / b for a constant divisor ``b``."""
    a = as_tensor(a)
    b = np.asarray(b.data if isinstance(b, Tensor) else b)
    try:
        out = a.data / b
    except ValueError:
        raise DimensionError(f"div: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return record_op(out.astype(a.data.dtype), (a,), lambda g: (_unbroadcast(g / b, a.shape),))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))
    return record_op(out, (x,), lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def signed_sqrt(x, eps: float = 1e-4) -> Tensor:
    """sign(x) * (sqrt(|x| + eps) - sqrt(eps)); continuous, slope bounded by 1/(2 sqrt(eps))."""
    x = as_tensor(x)
    dt = x.data.dtype.type
    root = np.sqrt(np.abs(x.data) + dt(eps))
    out = np.copysign(root - dt(np.sqrt(eps)), x.data)
    return record_op(out, (x,), lambda g: (g / (dt(2.0) * root),))


def square_sum(x) -> Tensor:
    """Sum of squared entries, as a scalar."""
    x = as_tensor(x)
    return record_op(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,))


# ----------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record_op(a.data @ b.data, (a, b), bw)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: invalid permutation {axes} for shape {x.shape}")
    inv = np.argsort(axes)
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no tensors given")
    nd = ts[0].ndim
    ax = _norm_axis(axis, nd)
    for t in ts:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in ts]} differ outside axis {ax}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return record_op(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def slice_axis(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return record_op(x.data[idx], (x,), bw)


def take_rows(x, rows) -> Tensor:
    """Gather rows (axis 0); repeated rows accumulate gradient."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return record_op(x.data[rows], (x,), bw)


def pick(x, cols) -> Tensor:
    """Select x[i, cols[i]] for every row i of a 2-d tensor."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.intp)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick: need 2-d input and one index per row, got {x.shape}, {cols.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g
        return (full,)

    return record_op(x.data[rows, cols], (x,), bw)


# ----------------------------------------------------------------------
# reductions


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _norm_axis(axis, x.ndim)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first (lowest-index) maximiser."""
    x = as_tensor(x)
    if axis is None:
        flat = x.data.reshape(-1)
        i = int(np.argmax(flat))

        def bw_all(g):
            full = np.zeros(flat.shape, dtype=x.data.dtype)
            full[i] = np.asarray(g).reshape(())
            return (full.reshape(x.shape),)

        out = flat[i]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)
        return record_op(out, (x,), bw_all)
    ax = _norm_axis(axis, x.ndim)
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), g, axis=ax)
        return (full,)

    return record_op(out if keepdims else np.squeeze(out, ax), (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=ax, keepdims=True)),)

    return record_op(s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=ax, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * np.sum(g, axis=ax, keepdims=True),)

    return record_op(out, (x,), bw)


# ----------------------------------------------------------------------
# spatial operators on H x W x C rasters


def _check_raster(x: Tensor, opname: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{opname}: expected an H x W x C raster, got shape {x.shape}")


def conv2d(x, kernel, bias=None) -> Tensor:
    """Same-padded 2-d convolution (cross-correlation) of an H x W x Cin raster."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_raster(x, "conv2d")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be kh x kw x Cin x Cout, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: same padding needs odd kernel extents, got {kh}x{kw}")
    H, W, c = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, kernel {kernel.shape} expects {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    # (H, W, Cin, kh, kw) -> (H*W, kh*kw*Cin)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(H * W, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(H * W, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(H, W, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[a:a + H, b:b + W, :] += dcols[:, :, a, b, :]
            gx = dxp[ph:ph + H, pw:pw + W, :]
        res = [gx, gk]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return record_op(out.reshape(H, W, cout), inputs, bw)


# window offsets in increasing linear-index order, so argmax picks the lowest index on ties
_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2d_same(x) -> Tensor:
    """2 x 2 max pooling with stride 1; the window at (i, j) spans rows i..i+1 and
    cols j..j+1, cells outside the raster are ignored, so extents are preserved."""
    x = as_tensor(x)
    _check_raster(x, "maxpool2d_same")
    H, W, C = x.shape
    xp = np.full((H + 1, W + 1, C), -np.inf, dtype=x.data.dtype)
    xp[:H, :W] = x.data
    cands = [xp[di:di + H, dj:dj + W] for di, dj in _POOL_OFFSETS]
    out = np.maximum(np.maximum(cands[0], cands[1]), np.maximum(cands[2], cands[3]))
    # walk backwards so the lowest-index maximiser is written last
    arg = np.full((H, W, C), 3, dtype=np.int8)
    for k in (2, 1, 0):
        arg = np.where(cands[k] == out, np.int8(k), arg)

    def bw(g):
        dxp = np.zeros((H + 1, W + 1, C), dtype=g.dtype)
        for k, (di, dj) in enumerate(_POOL_OFFSETS):
            dxp[di:di + H, dj:dj + W] += np.where(arg == k, g, 0)
        return (dxp[:H, :W],)

    return record_op(out, (x,), bw)


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    H, W = a.shape[:2]
    p = np.pad(a, ((r, r), (0, 0)) + ((0, 0),) * (a.ndim - 2))
    rows = sum(p[d:d + H] for d in range(2 * r + 1))
    p = np.pad(rows, ((0, 0), (r, r)) + ((0, 0),) * (a.ndim - 2))
    return sum(p[:, d:d + W] for d in range(2 * r + 1))


def box_sum2d(x, radius: int) -> Tensor:
    """Sum over the (2r+1) x (2r+1) spatial window around each cell, zero outside."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"box_sum2d: need at least 2 spatial axes, got {x.shape}")
    if radius < 0:
        raise ConfigurationError("box_sum2d: radius must be >= 0")
    # the window is symmetric, so the adjoint is the same box sum
    return record_op(_box_sum(x.data, radius), (x,), lambda g: (_box_sum(g, radius),))


# ----------------------------------------------------------------------
# batch normalisation


class BatchNorm:
    """Learnable per-feature scale/shift plus running statistics."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=_DTYPE)
        self.running_var = np.ones(num_features, dtype=_DTYPE)

    def __call__(self, x, training: bool = True, axis: int = -1) -> Tensor:
        return batch_norm(x, self, training=training, axis=axis)


def batch_norm(x, bn: BatchNorm, training: bool = True, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    if x.shape[ax] != bn.num_features:
        raise DimensionError(
            f"batch_norm: feature axis has {x.shape[ax]} entries, expected {bn.num_features}"
        )
    red = tuple(i for i in range(x.ndim) if i != ax)
    count = int(np.prod([x.shape[i] for i in red])) if red else 1
    if count == 0:
        raise ContractError("batch_norm: empty batch")
    bshape = [1] * x.ndim
    bshape[ax] = bn.num_features
    gamma = bn.gamma.data.reshape(bshape)
    beta = bn.beta.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        m = bn.momentum
        bn.running_mean = (m * bn.running_mean + (1 - m) * mu.reshape(-1)).astype(bn.running_mean.dtype)
        bn.running_var = (m * bn.running_var + (1 - m) * var.reshape(-1)).astype(bn.running_var.dtype)
    else:
        mu = bn.running_mean.reshape(bshape)
        var = bn.running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma + beta

    def bw(g):
        dgamma = np.sum(g * xhat, axis=red).reshape(-1)
        dbeta = np.sum(g, axis=red).reshape(-1)
        dxhat = g * gamma
        if training:
            dx = inv / count * (
                count * dxhat
                - np.sum(dxhat, axis=red, keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=red, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return record_op(out, (x, bn.gamma, bn.beta), bw)
