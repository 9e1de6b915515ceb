"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy float array. While a :class:`Tape` is active,
every primitive records the closure needed to push gradients back to its
inputs; :func:`backward` replays the tape once, in reverse, and returns a
gradient for every requested parameter. Without an active tape the same
primitives run as plain numpy (inference mode).

Conventions:
  * training arrays are float32, verification runs use float64
  * image batches are NCHW, conv kernels are OIHW (correlation, no flip)
  * reductions use a fixed order, so a given seed reproduces bit-identical
    tapes and losses
"""

from __future__ import annotations

import threading

import numpy as np

from . import _kernels as K

DEFAULT_DTYPE = np.float32

# Probability floor used before taking logs (0*log 0 == 0 convention).
PROB_EPS = 1e-12


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense n-d float array, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

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
        return float(self.data)

    def detach(self):
        """Same values, cut out of the gradient graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        head = f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}"
        if self.name:
            head += f", name={self.name!r}"
        return head + (", grad)" if self.requires_grad else ")")

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of primitive applications; one backward pass per tape."""

    __slots__ = ("_nodes", "consumed")

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STATE.stack.pop()
        assert popped is self
        return False


class _EngineState(threading.local):
    # tape stack and recording suppression are per-thread: a training
    # context is single-owner, and inference may run on other threads
    def __init__(self):
        self.stack = []
        self.no_record = 0


_STATE = _EngineState()


class no_record:
    """Suspend tape recording (inference inside a training step)."""

    def __enter__(self):
        _STATE.no_record += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.no_record -= 1
        return False


class frozen:
    """Temporarily drop tensors out of gradient tracking.

    Covers forward AND the matching backward: closures consult
    ``requires_grad`` when they run, so keep the context open across both.
    """

    def __init__(self, tensors):
        self.tensors = [t for t in tensors if t.requires_grad]

    def __enter__(self):
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, exc_type, exc, tb):
        for t in self.tensors:
            t.requires_grad = True
        return False


def active_tape():
    stack = _STATE.stack
    return stack[-1] if stack and not _STATE.no_record else None


def _apply(out_data, inputs, backward):
    out = Tensor(out_data)
    stack = _STATE.stack
    tape = stack[-1] if stack and not _STATE.no_record else None
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("tape already consumed by a backward pass")
        out.requires_grad = True
        tape._nodes.append(_Node(out, inputs, backward))
    return out


def backward(loss, tape, params=None):
    """Gradients of a scalar loss.

    Returns ``{tensor: grad Tensor}`` for each tensor in ``params`` (zeros for
    parameters the loss never touched). With ``params=None`` the map holds
    every grad-enabled tensor that received a gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed; record a fresh forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            # fresh allocation on accumulate: backward closures may hand out views
            grads[id(t)] = g if prev is None else prev + g
            holders[id(t)] = t

    if params is None:
        return {holders[i]: Tensor(g) for i, g in grads.items()}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = Tensor(g) if g is not None else Tensor(np.zeros_like(p.data))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(a.data - b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply(a.data * b.data, (a, b), bwd)


def div(a, b):
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _apply(a.data / b.data, (a, b), bwd)


def neg(a):
    return _apply(-a.data, (a,), lambda g: (-g,))


def log(a):
    """Natural log; callers clamp their own domains (see clip/PROB_EPS)."""

    def bwd(g):
        return (g / a.data,)

    return _apply(np.log(a.data), (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _apply(out_data, (a,), bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out_data),)

    return _apply(out_data, (a,), bwd)


def abs_(a):
    def bwd(g):
        return (g * np.sign(a.data),)

    return _apply(np.abs(a.data), (a,), bwd)


def clip(a, lo, hi):
    """Clamp values; gradient passes through only where no clamping happened."""
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _apply(np.clip(a.data, lo, hi), (a,), bwd)


def log_clip(a, lo=PROB_EPS, hi=1.0):
    """log(clip(a, lo, hi)) in one node; zero gradient where clamped."""
    xc = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * (inside / xc),)

    return _apply(np.log(xc), (a,), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    out_data = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _apply(out_data, (a,), bwd)


def leaky_relu(a, slope=0.2):
    # slope branch taken at exactly 0: fixed tie-break
    out_data = np.maximum(a.data, a.data * slope)

    def bwd(g):
        return (np.where(a.data > 0, g, g * slope),)

    return _apply(out_data, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _apply(out_data, (a,), bwd)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _apply(out_data, (a,), bwd)


def softmax(a, axis=-1):
    """Shift-invariant softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _apply(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape & reduction


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _apply(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _apply(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _apply(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    inv = 1.0 / count

    def bwd(g):
        expanded = _expand_reduced(g, a.shape, axis, keepdims)
        return ((expanded * inv).astype(a.dtype, copy=False),)

    return _apply(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _apply(a.data @ b.data, (a, b), bwd)


def dense(x, w, b):
    """x @ w + b in one node (row-major batch, per-column bias)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes incompatible: {x.shape} @ {w.shape}")

    def bwd(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _apply(x.data @ w.data + b.data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# fused information terms (hot path of the clustering objective)


def cross_entropy_mean(target, q, lo=PROB_EPS):
    """-mean over rows of sum(target * log(clip(q))); target is constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != q.shape:
        raise ShapeError(f"cross_entropy_mean shapes differ: {t.shape} vs {q.shape}")
    xc = np.clip(q.data, lo, 1.0)
    n = q.shape[0]
    out = -(t * np.log(xc)).sum(axis=1).mean()

    def bwd(g):
        inside = (q.data >= lo) & (q.data <= 1.0)
        return ((-g / n) * t * (inside / xc),)

    return _apply(np.asarray(out, dtype=q.dtype), (q,), bwd)


def entropy_mean(p, lo=PROB_EPS):
    """Mean row entropy -mean(sum(p log clip(p))); differentiable in p."""
    xc = np.clip(p.data, lo, 1.0)
    logx = np.log(xc)
    n = p.shape[0]
    out = -(p.data * logx).sum(axis=1).mean()

    def bwd(g):
        inside = (p.data >= lo) & (p.data <= 1.0)
        return ((-g / n) * (logx + inside),)

    return _apply(np.asarray(out, dtype=p.dtype), (p,), bwd)


def marginal_kl_uniform(p, lo=PROB_EPS):
    """sum(pbar * log(k * clip(pbar))) where pbar is the column mean of p."""
    k = p.shape[1]
    n = p.shape[0]
    pbar = p.data.mean(axis=0)
    xc = np.clip(pbar, lo, 1.0)
    logterm = np.log(xc) + np.log(k)
    out = (pbar * logterm).sum()

    def bwd(g):
        inside = (pbar >= lo) & (pbar <= 1.0)
        return ((g / n) * np.broadcast_to(logterm + inside, p.shape),)

    return _apply(np.asarray(out, dtype=p.dtype), (p,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size, k, s):
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, stride=1, padding="same", bias=None):
    """Cross-correlation of NCHW input with an OIHW kernel.

    ``padding`` is "same" (zero pad, out = ceil(in/stride)) or "valid".
    Differentiable w.r.t. input, kernel and the optional per-channel bias.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d tensors, got input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    s = int(stride)
    if padding == "same":
        oh, pt, pb = _same_pads(h, kh, s)
        ow, pl, pr = _same_pads(wd, kw, s)
    elif padding == "valid":
        if kh > h or kw > wd:
            raise ShapeError(f"conv2d valid: kernel {w.shape} exceeds input {x.shape}")
        oh, ow = (h - kh) // s + 1, (wd - kw) // s + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    xp = np.ascontiguousarray(xp)  # np.pad may keep the input's layout
    cols = K.im2col(xp, kh, kw, s, s, oh, ow).reshape(n * oh * ow, c * kh * kw)
    wm = w.data.reshape(o, -1)
    out_mat = cols @ wm.T
    if bias is not None:
        out_mat += bias.data
    out_data = np.ascontiguousarray(out_mat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    hp, wp = xp.shape[2], xp.shape[3]
    saved_cols = cols if w.requires_grad else None

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gm.T @ saved_cols).reshape(w.shape) if saved_cols is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(n, oh, ow, c, kh, kw)
            gxp = K.col2im(gcols, hp, wp, s, s)
            gx = gxp[:, :, pt : hp - pb, pl : wp - pr]
        if bias is None:
            return gx, gw
        gb = gm.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply(out_data, inputs, bwd)


def conv2d_transpose(x, w, stride=1, padding=0, bias=None):
    """Transposed convolution: NIHW input, IOHW kernel, integer zero padding.

    Output spatial size is ``(in-1)*stride + k - 2*padding``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose expects 4-d tensors, got input {x.shape}, kernel {w.shape}"
        )
    n, ci, h, wd = x.shape
    iw, o, kh, kw = w.shape
    if ci != iw:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape} vs kernel {w.shape}")
    s, p = int(stride), int(padding)
    hp, wp = (h - 1) * s + kh, (wd - 1) * s + kw
    oh, ow = hp - 2 * p, wp - 2 * p
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d_transpose padding {p} too large for output {hp}x{wp}")

    x_mat = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, ci)
    wm = w.data.reshape(ci, o * kh * kw)
    cols = (x_mat @ wm).reshape(n, h, wd, o, kh, kw)
    ypad = K.col2im(cols, hp, wp, s, s)
    out_data = np.ascontiguousarray(ypad[:, :, p : hp - p, p : wp - p])
    if bias is not None:
        out_data += bias.data.reshape(1, -1, 1, 1)
    saved_x_mat = x_mat if w.requires_grad else None

    def bwd(g):
        gpad = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = K.im2col(np.ascontiguousarray(gpad), kh, kw, s, s, h, wd)
        gcols = gcols.reshape(n * h * wd, o * kh * kw)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (gcols @ wm.T).reshape(n, h, wd, ci).transpose(0, 3, 1, 2)
            )
        gw = (saved_x_mat.T @ gcols).reshape(w.shape) if saved_x_mat is not None else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply(out_data, inputs, bwd)


# ---------------------------------------------------------------------------
# dropout


def dropout_apply(x, rate, seed):
    """Inverted dropout: survivors scaled by 1/(1-rate); rate 0 is identity.

    ``seed`` is an int or a numpy Generator; the same seed yields the same
    mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    mask = Tensor((keep / (1.0 - rate)).astype(x.dtype))
    return mul(x, mask)
