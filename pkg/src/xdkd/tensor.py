"""Reverse-mode automatic differentiation on dense float64 arrays.

Define-by-run: every differentiable operation appends one entry to the
active tape (thread-local, rebuilt per forward pass via `new_tape`).
`backward` on a scalar replays the tape in reverse and accumulates `.grad`
on every tensor that requires gradients, intermediates included, which is
what gradient-based saliency needs.

Broadcasting is deliberately narrow: equal shapes, size-1 scalars against
anything, and per-channel (C,1,1) factors against (C,H,W) maps. Anything
else raises ShapeError("shape incompatible").
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from itertools import count

import numpy as np


class ShapeError(ValueError):
    """Operand shapes outside the supported broadcast rules."""


class AutodiffError(RuntimeError):
    """Misuse of the tape machinery (non-scalar backward, etc.)."""


_node_ids = count()
_tls = threading.local()


def _state():
    if not hasattr(_tls, "tape"):
        _tls.tape = Tape()
        _tls.grad_enabled = True
    return _tls


class TapeEntry:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of operations; execution order is topological order."""

    def __init__(self):
        self.entries = []

    def record(self, out, inputs, bwd):
        out.tape = self
        self.entries.append(TapeEntry(out, inputs, bwd))

    def zero_grads(self):
        """Drop every gradient buffer touched by this tape (params included)."""
        for e in self.entries:
            e.out.grad = None
            for t in e.inputs:
                t.grad = None


def new_tape() -> Tape:
    st = _state()
    st.tape = Tape()
    return st.tape


def active_tape() -> Tape:
    return _state().tape


@contextmanager
def no_grad():
    """Disable tape recording; results inside are detached constants."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer.

    Scalars are represented with shape (1,). `grad` is None until a
    backward pass deposits something; None means zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level primitives
    def __add__(self, other):
        return ew_add(self, _lift(other))

    def __radd__(self, other):
        return ew_add(_lift(other), self)

    def __mul__(self, other):
        return ew_mul(self, _lift(other))

    def __rmul__(self, other):
        return ew_mul(_lift(other), self)

    def __sub__(self, other):
        return ew_sub(self, _lift(other))

    def __rsub__(self, other):
        return ew_sub(_lift(other), self)

    def __truediv__(self, other):
        return ew_div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, bwd) -> Tensor:
    """Create the output tensor of an op, recording it when grads are live."""
    st = _state()
    out = Tensor(data)
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.tape.record(out, inputs, bwd)
    return out


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    if len(sa) == 3 and sb == (sa[0], 1, 1):
        return
    if len(sb) == 3 and sa == (sb[0], 1, 1):
        return
    raise ShapeError(f"shape incompatible: {sa} vs {sb}")


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to an operand's shape."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # the remaining legal case: (C,1,1) operand against a (C,H,W) result
    return g.sum(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# elementwise primitives

def ew_add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def ew_sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make(ad * bd, (a, b), bwd)


def ew_div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _make(ad / bd, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def ew_abs(x: Tensor) -> Tensor:
    # subgradient 0 at the kink, same convention as relu
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    # used inside encoder/decoder stages, where narrow layers make plain
    # ReLU death fatal at desk scale
    pos = x.data > 0.0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def _stable_sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    # stable log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    d = x.data
    val = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    s = _stable_sigmoid(d)
    return _make(val, (x,), lambda g: (g * s,))


def ew_exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def ew_log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def ew_sqrt(x: Tensor) -> Tensor:
    # subgradient 0 at x == 0, so norms of all-zero maps stay NaN-free
    r = np.sqrt(x.data)
    pos = r > 0.0
    safe = np.where(pos, r, 1.0)

    def bwd(g):
        return (np.where(pos, g / (2.0 * safe), 0.0),)

    return _make(r, (x,), bwd)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    # gradient is blocked on the floored region (0 at equality)
    mask = x.data > floor
    return _make(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _spread(g, src_shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g.reshape((1,) * len(src_shape)), src_shape)
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, src_shape)


def reduce_sum(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        return (_spread(g, shape, axes, keepdims).copy(),)

    return _make(out, (x,), bwd)


def reduce_mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    if axes is None:
        n = x.data.size
    else:
        n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        return (_spread(g / n, shape, axes, keepdims).copy(),)

    return _make(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a (C,H,W) map, kept as (C,1,1)."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool expects (C,H,W), got {x.shape}")
    return reduce_mean(x, axes=(1, 2), keepdims=True)


def softmax(z: Tensor, axis: int) -> Tensor:
    d = z.data
    if not -d.ndim <= axis < d.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {z.shape}")
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (z,), bwd)


# ---------------------------------------------------------------------------
# structural ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.data.size,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of a (C,H,W) input with an (O,C,Kh,Kw) kernel.

    Output spatial size per axis: floor((N + 2p - d*(K-1) - 1)/s) + 1.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,Kh,Kw), got {x.shape}, {kernel.shape}")
    c, h, w = xd.shape
    o, ck, kh, kw = kd.shape
    if ck != c:
        raise ShapeError(f"shape incompatible: input has {c} channels, kernel expects {ck}")
    if bd.shape != (o,):
        raise ShapeError(f"bias must be ({o},), got {bias.shape}")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel exceeds padded input")

    need_dx = x.requires_grad  # inputs are often constants (scene tensors)

    # 1x1 convs are plain channel mixes; skip the window machinery
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        kmat = kd.reshape(o, c)
        flat = xd.reshape(c, -1)
        out = (kmat @ flat + bd[:, None]).reshape(o, h, w)

        def bwd_point(g):
            gm = g.reshape(o, -1)
            dx = (kmat.T @ gm).reshape(c, h, w) if need_dx else None
            return dx, (gm @ flat.T).reshape(kd.shape), g.sum(axis=(1, 2))

        return _make(out, (x, kernel, bias), bwd_point)

    if padding > 0:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
        xp[:, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd

    # im2col: windows of the (possibly dilated) kernel footprint, then one GEMM
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(1, 2))
    win = win[:, ::stride, ::stride, ::dilation, ::dilation]  # (c,ho,wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    kmat = kd.reshape(o, c * kh * kw)
    out = (kmat @ cols + bd[:, None]).reshape(o, ho, wo)

    def bwd(g):
        gm = g.reshape(o, -1)
        dk = (gm @ cols.T).reshape(kd.shape)
        if not need_dx:
            return None, dk, g.sum(axis=(1, 2))
        dcols = (kmat.T @ gm).reshape(c, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i * dilation:i * dilation + (ho - 1) * stride + 1:stride,
                    j * dilation:j * dilation + (wo - 1) * stride + 1:stride] += dcols[:, i, j]
        dx = dxp[:, padding:padding + h, padding:padding + w] if padding > 0 else dxp
        return dx, dk, g.sum(axis=(1, 2))

    return _make(out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# bilinear upsampling (align_corners=False)

@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor*n_in, n_in) interpolation weights; rows sum to 1."""
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        mat[i, lo] += 1.0 - t
        mat[i, hi] += t
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upscale a (C,H,W) map by an integer factor (half-pixel centers)."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects (C,H,W), got {x.shape}")
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    c, h, w = x.data.shape
    rm = _interp_matrix(h, factor)
    cm = _interp_matrix(w, factor)
    out = np.matmul(np.matmul(rm, x.data), cm.T)

    def bwd(g):
        return (np.matmul(rm.T, np.matmul(g, cm)),)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass and its oracle

def backward(scalar: Tensor, stops=None) -> None:
    """Accumulate d(scalar)/d(ancestor) into .grad over the scalar's tape.

    Repeated calls accumulate; zero grads between passes if that is not
    wanted. Tensors with requires_grad=False are left untouched.

    `stops` (optional sequence of tensors) makes this a targeted pass: only
    tensors that can reach the scalar *through a stop tensor's cone* keep
    their gradients, and entries that cannot influence any stop's gradient
    are skipped. Gradients deposited on the stop tensors themselves are
    bit-identical to a full pass (all paths to the scalar are kept,stops
    being ancestors of each other included); everything below them is
    pruned. Used for the targeted saliency-objective passes.
    """
    if scalar.data.size != 1:
        raise AutodiffError("backward requires scalar")
    seed = np.ones_like(scalar.data)
    if scalar.tape is None:
        if scalar.requires_grad:
            scalar.grad = seed if scalar.grad is None else scalar.grad + seed
        return

    entries = scalar.tape.entries
    needed = None
    if stops is not None:
        # forward reachability: nodes on some stop -> scalar path
        needed = {t.node_id for t in stops}
        for entry in entries:
            if any(t.node_id in needed for t in entry.inputs):
                needed.add(entry.out.node_id)

    pending = {scalar.node_id: seed}
    holders = {scalar.node_id: scalar}
    for entry in reversed(entries):
        out_id = entry.out.node_id
        g = pending.get(out_id)
        if g is None:
            continue
        if needed is not None and out_id not in needed:
            continue
        grads = entry.bwd(g)
        for t, gt in zip(entry.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if needed is not None and t.node_id not in needed:
                continue
            if t.node_id in pending:
                pending[t.node_id] = pending[t.node_id] + gt
            else:
                pending[t.node_id] = gt
                holders[t.node_id] = t
    for nid, g in pending.items():
        t = holders[nid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward's gradient and central differences.

    `f` maps a tensor to a scalar tensor and must be re-runnable. Relative
    error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    st = _state()
    prev_tape = st.tape
    try:
        st.tape = Tape()
        xt = Tensor(x.data.copy(), requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise AutodiffError("finite_diff_check requires a scalar-valued f")
        backward(y)
        analytic = (np.zeros_like(xt.data) if xt.grad is None else xt.grad).reshape(-1)
    finally:
        st.tape = prev_tape

    base = x.data.copy().reshape(-1)
    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            for sgn, slot in ((+1.0, 0), (-1.0, 1)):
                pert = base.copy()
                pert[i] += sgn * h
                val = f(Tensor(pert.reshape(x.shape))).item()
                if slot == 0:
                    fp = val
                else:
                    fm = val
            numeric[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
