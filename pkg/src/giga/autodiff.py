"""Reverse-mode automatic differentiation on dense float64 arrays.

Layouts are channels-last: images [B, H, W, C], volumes [B, D, H, W, C],
feature rows [N, F].  Ops record onto the active ``Tape`` (a context
manager); without one they run in pure inference mode.  Forward execution
order is a topological order, so ``Tape.backward`` just walks the records
in reverse.
"""

import ctypes
import json
import logging
import struct
import threading

import numpy as np
from scipy.linalg.blas import dgemm as _dgemm

logger = logging.getLogger(__name__)


def _tune_allocator():
    """Ask glibc to keep large frees in the heap instead of unmapping.

    The training step cycles many multi-megabyte buffers; with default
    thresholds each reallocation pays kernel zero-fill on first touch.
    No-op on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

CHECKPOINT_MAGIC = "GIGA-CKPT-1"

# names of every differentiable op, mirrored by the gradient-check suite
DIFFERENTIABLE_OPS = (
    "conv2d", "conv3d", "avg_pool2d", "max_pool2d", "nearest_upsample2d",
    "linear", "add_bias", "relu", "sigmoid", "log", "abs_", "clip",
    "minimum", "add", "sub", "mul", "scale", "add_const", "sum_all",
    "mean_all", "sum_axis", "concat", "reshape", "project_mean",
    "plane_sample", "normalize_rows",
)


class ShapeError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


_state = threading.local()

_check_finite = False


def set_finite_checks(on):
    """Assert every op output is finite (slow; meant for tests)."""
    global _check_finite
    _check_finite = bool(on)


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, g, own=False):
        # own=True hands over a freshly computed array that no other
        # tensor references; the buffer is adopted without a copy and
        # may be mutated in place by later accumulations
        if self._grad is None:
            self._grad = g if own else np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (
            tuple(self.shape), self.requires_grad)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Tape:
    """Single-owner record of one forward pass."""

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractViolation("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def _append(self, out, backward):
        self._records.append((out, backward))

    def backward(self, loss):
        if self._consumed:
            raise ContractViolation("tape already consumed by backward")
        if loss.data.size != 1:
            raise ContractViolation(
                "backward needs a scalar loss, got shape %r" % (loss.shape,))
        self._consumed = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, backward in reversed(self._records):
            if out._grad is not None:
                backward(out._grad)
                out._grad = None  # nothing before its record reads it


def _record(out_data, inputs, backward):
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise ContractViolation("non-finite values produced by an op")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._append(out, backward)
    return out


def _same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError("%s: shape %r vs %r" % (opname, a.shape, b.shape))


# ---------------------------------------------------------------- conv

class _BufferPool:
    """Recycled float64 scratch buffers for the conv hot path.

    The C allocator returns multi-megabyte frees to the kernel, so
    reallocating the same conv buffers every op pays kernel zero-fill
    on every touch; recycling keeps the pages mapped.  Buffers handed
    back must have no live views outside the pool's caller.
    """

    def __init__(self, max_per_size=4, min_elems=1 << 16):
        self._free = {}
        self._max = max_per_size
        self._min = min_elems
        self._lock = threading.Lock()

    def take(self, n):
        if n >= self._min:
            with self._lock:
                stack = self._free.get(n)
                if stack:
                    return stack.pop()
        return np.empty(n)

    def give(self, arr):
        base = arr if arr.base is None else arr.base
        if base.size < self._min or not isinstance(base, np.ndarray):
            return
        with self._lock:
            stack = self._free.setdefault(base.size, [])
            if len(stack) < self._max:
                stack.append(base.reshape(-1))


_pool = _BufferPool()


def _conv_nd(x, w, b, spatial):
    """Shared stride-1 same-padded correlation over N spatial dims.

    Works on a flattened zero-padded buffer: for kernel tap offset o,
    output row r pairs with padded row r + o, so every GEMM operand is
    a contiguous slice.  Rows whose window crosses an image border land
    in the pad margin of the output buffer and are sliced away; the
    backward pass embeds the output grad top-left in the padded row
    space so those margin rows pair with zeros.
    """
    B = x.data.shape[0]
    dims = x.data.shape[1:-1]
    cin = x.data.shape[-1]
    k = w.data.shape[0]
    cout = w.data.shape[-1]
    p = k // 2
    pdims = tuple(d + 2 * p for d in dims)
    inner = (slice(None),) + tuple(slice(p, p + d) for d in dims)

    rows = B * int(np.prod(pdims))

    def padded(values, channels, at):
        # zero only the margin strips around the placed block
        buf = _pool.take(rows * channels).reshape((B,) + pdims + (channels,))
        buf[at] = values
        for ax in range(spatial):
            head = (slice(None),) * (1 + ax)
            lo = at[1 + ax].start or 0
            if lo:
                buf[head + (slice(0, lo),)] = 0.0
            buf[head + (slice(lo + dims[ax], None),)] = 0.0
        return buf

    pad = padded(x.data, cin, inner)
    flat = pad.reshape(rows, cin)
    # flat-row strides of the spatial axes give the kernel tap offsets
    strides = np.cumprod((1,) + pdims[:0:-1])[::-1]
    taps = [int(np.dot(idx, strides))
            for idx in np.ndindex(*([k] * spatial))]
    rv = rows - taps[-1]
    wflat = w.data.reshape(-1, cout)
    # skinny inputs: gather all taps into one wide GEMM; wide inputs:
    # one BLAS GEMM per tap accumulated (beta=1) straight into the output
    use_cols = len(taps) * cin <= 32
    cols = None
    big = _pool.take(rows * cout).reshape(rows, cout)  # tail never read

    if use_cols:
        # overlapping-window view, materialized in one gather pass
        rs = flat.strides[0]
        shape = (rv,) + (k,) * spatial + (cin,)
        st = (rs,) + tuple(int(s) * rs for s in strides) + (flat.strides[1],)
        view = np.lib.stride_tricks.as_strided(flat, shape=shape, strides=st)
        cols = _pool.take(rv * len(taps) * cin)
        np.copyto(cols.reshape(shape), view)
        cols = cols.reshape(rv, len(taps) * cin)
        np.matmul(cols, wflat, out=big[:rv])
    else:
        # transposed update keeps every big operand F-contiguous, so the
        # BLAS call accumulates in place without copies or temporaries
        outT = big[:rv].T
        flatT = flat.T
        for i, o in enumerate(taps):
            _dgemm(1.0, wflat[i * cin:(i + 1) * cin].T, flatT[:, o:o + rv],
                   beta=0.0 if i == 0 else 1.0, c=outT, overwrite_c=1)
    valid = (slice(None),) + tuple(slice(0, d) for d in dims)
    bigv = big.reshape((B,) + pdims + (cout,))[valid]
    # one pass: materialize the valid slice and add the bias together
    out = bigv + b.data if b is not None else np.ascontiguousarray(bigv)
    _pool.give(big)
    del big, bigv
    tape = _active_tape()
    needs = tape is not None and (x.requires_grad or w.requires_grad
                                  or (b is not None and b.requires_grad))
    if not needs:
        # no backward will run; recycle the forward scratch now
        _pool.give(pad)
        if cols is not None:
            _pool.give(cols)

    def backward(go):
        if b is not None and b.requires_grad:
            b.accumulate_grad(go.reshape(-1, cout).sum(axis=0), own=True)
        gop = padded(go, cout, valid)
        gof = gop.reshape(rows, cout)[:rv]
        if w.requires_grad:
            if use_cols:
                dw = np.matmul(cols.T, gof)
            else:
                dw = np.empty((len(taps), cin, cout))
                for i, o in enumerate(taps):
                    np.matmul(flat[o:o + rv].T, gof, out=dw[i])
            w.accumulate_grad(dw.reshape(w.data.shape), own=True)
        if x.requires_grad:
            # dflat built transposed: its F-ordered column slices are
            # contiguous, and transposing back is a free C-contiguous view
            base = _pool.take(rows * cin)
            base[:] = 0.0
            dflatT = base.reshape(rows, cin).T
            if use_cols:
                # one GEMM reads gof once; fold tap row blocks back in
                dcolsT = np.matmul(wflat, gof.T)
                for i, o in enumerate(taps):
                    dflatT[:, o:o + rv] += dcolsT[i * cin:(i + 1) * cin]
            else:
                gofT = gof.T
                for i, o in enumerate(taps):
                    _dgemm(1.0, wflat[i * cin:(i + 1) * cin], gofT,
                           beta=1.0, c=dflatT[:, o:o + rv], overwrite_c=1)
            dpad = dflatT.T.reshape((B,) + pdims + (cin,))
            # own=False: accumulate_grad copies, so dflatT can be recycled
            x.accumulate_grad(dpad[inner])
            _pool.give(base)
        _pool.give(pad)
        _pool.give(gop)
        if cols is not None:
            _pool.give(cols)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, backward)


def conv2d(x, w, b=None):
    """Stride-1 same-padded convolution, x [B,H,W,Cin], w [K,K,Cin,Cout]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d: shape %r vs %r" % (x.shape, w.shape))
    kh, kw, cin, cout = w.data.shape
    if cin != x.data.shape[-1] or kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: shape %r vs %r" % (x.shape, w.shape))
    if b is not None and b.data.shape != (cout,):
        raise ShapeError("conv2d: shape %r vs %r" % (w.shape, b.shape))
    return _conv_nd(x, w, b, 2)


def conv3d(x, w, b=None):
    """Stride-1 same-padded convolution, x [B,D,H,W,Cin], w [K,K,K,Cin,Cout]."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d: shape %r vs %r" % (x.shape, w.shape))
    kd, kh, kw, cin, cout = w.data.shape
    if cin != x.data.shape[-1] or not (kd == kh == kw) or kd % 2 == 0:
        raise ShapeError("conv3d: shape %r vs %r" % (x.shape, w.shape))
    if b is not None and b.data.shape != (cout,):
        raise ShapeError("conv3d: shape %r vs %r" % (w.shape, b.shape))
    return _conv_nd(x, w, b, 3)


# ------------------------------------------------------------- pooling

def _check_pool_shape(x):
    if x.data.ndim != 4:
        raise ShapeError("pool2d: shape %r vs (B,H,W,C)" % (x.shape,))
    B, H, W_, C = x.data.shape
    if H % 2 or W_ % 2:
        raise ShapeError("pool2d: shape %r vs even spatial dims" % (x.shape,))
    return B, H, W_, C


def avg_pool2d(x):
    B, H, W_, C = _check_pool_shape(x)
    out = x.data.reshape(B, H // 2, 2, W_ // 2, 2, C).mean(axis=(2, 4))

    def backward(g):
        if x.requires_grad:
            up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
            up *= 0.25
            x.accumulate_grad(up, own=True)

    return _record(out, (x,), backward)


def max_pool2d(x):
    B, H, W_, C = _check_pool_shape(x)
    win = x.data.reshape(B, H // 2, 2, W_ // 2, 2, C)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W_ // 2, C, 4)
    idx = win.argmax(axis=-1)  # first max wins on ties: deterministic
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            dwin = np.zeros((B, H // 2, W_ // 2, C, 4))
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dwin = dwin.reshape(B, H // 2, W_ // 2, C, 2, 2)
            dwin = dwin.transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W_, C)
            x.accumulate_grad(dwin, own=True)

    return _record(out, (x,), backward)


def nearest_upsample2d(x):
    if x.data.ndim != 4:
        raise ShapeError("upsample2d: shape %r vs (B,H,W,C)" % (x.shape,))
    B, H, W_, C = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                g.reshape(B, H, 2, W_, 2, C).sum(axis=(2, 4)), own=True)

    return _record(out, (x,), backward)


# ------------------------------------------------------------- dense

def linear(x, w, b=None):
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError("linear: shape %r vs %r" % (x.shape, w.shape))
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError("linear: shape %r vs %r" % (w.shape, b.shape))
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g, own=True)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0), own=True)
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T, own=True)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, backward)


def add_bias(x, b):
    """x [..., C] + b [C]."""
    if b.data.shape != x.data.shape[-1:]:
        raise ShapeError("add_bias: shape %r vs %r" % (x.shape, b.shape))
    out = x.data + b.data

    def backward(g):
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.data.shape[0]).sum(axis=0),
                              own=True)
        if x.requires_grad:
            x.accumulate_grad(g, own=True)  # g is dead after this record

    return _record(out, (x, b), backward)


# --------------------------------------------------------- elementwise

def relu(x):
    out = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            np.multiply(g, out > 0.0, out=g)  # g is dead after this record
            x.accumulate_grad(g, own=True)

    return _record(out, (x,), backward)


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        if x.requires_grad:
            d = out * (1.0 - out)
            d *= g
            x.accumulate_grad(d, own=True)

    return _record(out, (x,), backward)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _record(out, (x,), backward)


def abs_(x):
    out = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.sign(x.data))

    return _record(out, (x,), backward)


def clip(x, lo, hi):
    out = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * ((x.data > lo) & (x.data < hi)))

    return _record(out, (x,), backward)


def minimum(a, b):
    _same_shape(a.data, b.data, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * take_a)
        if b.requires_grad:
            b.accumulate_grad(g * ~take_a)

    return _record(out, (a, b), backward)


def add(a, b):
    _same_shape(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        # g may be adopted by at most one parent; the other gets a copy
        if b.requires_grad and b is not a:
            b.accumulate_grad(g)
        if a.requires_grad:
            a.accumulate_grad(g, own=True)
            if b is a:
                a.accumulate_grad(g)

    return _record(out, (a, b), backward)


def sub(a, b):
    _same_shape(a.data, b.data, "sub")
    out = a.data - b.data

    def backward(g):
        if b.requires_grad:
            b.accumulate_grad(np.negative(g), own=True)
        if a.requires_grad:
            a.accumulate_grad(g, own=True)  # g is dead after this record

    return _record(out, (a, b), backward)


def mul(a, b):
    _same_shape(a.data, b.data, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data, own=True)
        if b.requires_grad:
            b.accumulate_grad(g * a.data, own=True)

    return _record(out, (a, b), backward)


def scale(x, c):
    c = float(c)
    out = x.data * c

    def backward(g):
        if x.requires_grad:
            np.multiply(g, c, out=g)  # g is dead after this record
            x.accumulate_grad(g, own=True)

    return _record(out, (x,), backward)


def add_const(x, c):
    out = x.data + float(c)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g, own=True)  # g is dead after this record

    return _record(out, (x,), backward)


# ---------------------------------------------------------- reductions

def sum_all(x):
    out = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)), own=True)

    return _record(out, (x,), backward)


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.mean())

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g) / n), own=True)

    return _record(out, (x,), backward)


def sum_axis(x, axis):
    out = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            # accumulate_grad copies or adds; a broadcast view avoids one pass
            x.accumulate_grad(
                np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _record(out, (x,), backward)


def concat(tensors, axis):
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _record(out, tensors, backward)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            # view of the dead output grad when possible, else a fresh copy
            x.accumulate_grad(g.reshape(x.data.shape), own=True)

    return _record(out, (x,), backward)


def project_mean(x, axis):
    """Mean over one spatial axis of a volume [B,D,H,W,C] -> plane."""
    if x.data.ndim != 5 or axis not in (1, 2, 3):
        raise ShapeError("project_mean: shape %r vs 5-d volume" % (x.shape,))
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))

    return _record(out, (x,), backward)


def plane_sample(plane, uv):
    """Bilinear sample of plane [B,R,R,C] at uv [B,M,2] in [0,1]^2 -> [B,M,C].

    Half-pixel alignment: uv = (i+0.5)/R lands exactly on pixel (i, j).
    Differentiable in the plane values only; uv is a plain array.
    """
    if plane.data.ndim != 4 or plane.data.shape[1] != plane.data.shape[2]:
        raise ShapeError("plane_sample: shape %r vs (B,R,R,C)" % (plane.shape,))
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim != 3 or uv.shape[2] != 2 or uv.shape[0] != plane.data.shape[0]:
        raise ShapeError("plane_sample: shape %r vs %r" % (plane.shape, uv.shape))
    if uv.min() < 0.0 or uv.max() > 1.0:
        logger.warning("plane_sample: %d coordinates outside [0,1], clamped",
                       int(np.sum((uv < 0.0) | (uv > 1.0))))
        uv = np.clip(uv, 0.0, 1.0)
    B, R = plane.data.shape[:2]
    g = np.clip(uv * R - 0.5, 0.0, R - 1.0)
    i0 = np.minimum(g.astype(np.int64), R - 2)
    f = g - i0
    r0, c0 = i0[..., 0], i0[..., 1]
    fr, fc = f[..., 0], f[..., 1]
    b = np.arange(B)[:, None]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    pd = plane.data
    out = (pd[b, r0, c0] * w00[..., None] + pd[b, r0, c0 + 1] * w01[..., None]
           + pd[b, r0 + 1, c0] * w10[..., None]
           + pd[b, r0 + 1, c0 + 1] * w11[..., None])

    def backward(go):
        if plane.requires_grad:
            dp = np.zeros_like(plane.data)
            bb = np.broadcast_to(b, r0.shape)
            np.add.at(dp, (bb, r0, c0), go * w00[..., None])
            np.add.at(dp, (bb, r0, c0 + 1), go * w01[..., None])
            np.add.at(dp, (bb, r0 + 1, c0), go * w10[..., None])
            np.add.at(dp, (bb, r0 + 1, c0 + 1), go * w11[..., None])
            plane.accumulate_grad(dp)

    return _record(out, (plane,), backward)


def normalize_rows(x):
    """Rows of x [N,F] scaled to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError("normalize_rows: shape %r vs (N,F)" % (x.shape,))
    norms = np.maximum(np.linalg.norm(x.data, axis=1, keepdims=True), 1e-12)
    out = x.data / norms

    def backward(g):
        if x.requires_grad:
            proj = (out * g).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - out * proj) / norms)

    return _record(out, (x,), backward)


# --------------------------------------------------------------- adam

class Adam:
    """Adam with bias correction; consumes and clears grads on step()."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if not p.requires_grad:
                p.zero_grad()
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError("adam: shape %r vs %r" % (g.shape, p.data.shape))
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


# -------------------------------------------------------- checkpoints

def save_checkpoint(path, params, meta=None):
    """Write named float64 parameters with a JSON index.

    Layout: magic line, JSON index line, then little-endian float64
    payloads concatenated in index order (names sorted).
    """
    names = sorted(params)
    index = {"meta": meta or {}, "params": []}
    offset = 0
    for name in names:
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        index["params"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    blob = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.encode() + b"\n")
        f.write(struct.pack("<q", len(blob)))
        f.write(blob)
        for name in names:
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (params: name -> float64 array, meta dict)."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n").decode()
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation("bad checkpoint header %r" % magic)
        (blob_len,) = struct.unpack("<q", f.read(8))
        index = json.loads(f.read(blob_len).decode())
        payload = f.read()
    params = {}
    pos = 0
    for entry in index["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n,
                            offset=pos * 8).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        pos += n
    return params, index.get("meta", {})
