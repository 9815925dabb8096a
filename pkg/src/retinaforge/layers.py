"""Differentiable layer primitives on channels-last rank-4 tensors.

Convolutions run as im2col + sgemm. Two things matter a lot on
memory-bandwidth-starved CPUs and shape this file: the im2col gather
exploits that a (width, channel) window is contiguous in channels-last
layout, and every large intermediate (padded inputs, column matrices) is
gathered into a reused thread-local scratch buffer sized so the gemm
operands stay cache-resident.
"""

import ctypes
import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .engine import Tensor, record_op
from .errors import ConfigError, ShapeError

try:  # keep big numpy buffers on the heap instead of mmap/munmap cycles
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):
    pass

# cap on the per-gemm column-matrix size; few big operations beat many
# cache-sized ones on this class of hardware
_CHUNK_BYTES = 128 << 20

_scratch = threading.local()


def _buf(tag, shape, dtype):
    """Reused scratch array; contents are garbage until written."""
    slots = getattr(_scratch, "slots", None)
    if slots is None:
        slots = _scratch.slots = {}
    need = int(np.prod(shape))
    key = (tag, np.dtype(dtype).str)
    arr = slots.get(key)
    if arr is None or arr.size < need:
        arr = slots[key] = np.empty(need, dtype)
    return arr[:need].reshape(shape)


def _require_rank4(x, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 (n,h,w,c) tensor, got shape {x.shape}")


def _chunk_step(n, per_sample_bytes):
    return max(1, min(n, _CHUNK_BYTES // max(per_sample_bytes, 1)))


def _win3(xp, m, h, w):
    # overlapping 3x3 windows of padded NHWC input; innermost axis is a
    # contiguous (3*c) run: row layout (dh, dw*c)
    n, hp, wp, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (m, h, w, 3, 3 * c), (sn, sh, sw, sh, sc))


def _pad_into(src, tag):
    n, h, w, c = src.shape
    xp = _buf(tag, (n, h + 2, w + 2, c), src.dtype)
    xp[:, 0] = 0
    xp[:, -1] = 0
    xp[:, 1:-1, 0] = 0
    xp[:, 1:-1, -1] = 0
    xp[:, 1:-1, 1:-1] = src
    return xp


def _gather_cols(src_padded, m, h, w, c, tag):
    cols = _buf(tag, (m * h * w, 9 * c), src_padded.dtype)
    np.copyto(cols.reshape(m, h, w, 3, 3 * c), _win3(src_padded, m, h, w))
    return cols


def _conv3_forward(x, w):
    n, h, ww, c_in = x.shape
    c_out = w.shape[-1]
    xp = _pad_into(x, "conv.xp")
    y = np.empty((n, h, ww, c_out), x.dtype)
    wm = w.reshape(9 * c_in, c_out)
    step = _chunk_step(n, h * ww * 9 * c_in * x.itemsize)
    for i in range(0, n, step):
        j = min(n, i + step)
        cols = _gather_cols(xp[i:j], j - i, h, ww, c_in, "conv.cols")
        np.matmul(cols, wm, out=y[i:j].reshape(-1, c_out))
    return y


def _conv3_backward(g, x, wdata, need_gx):
    n, h, ww, c_in = x.shape
    c_out = wdata.shape[-1]
    xp = _pad_into(x, "conv.xp")
    gw = np.zeros((9 * c_in, c_out), x.dtype)
    gx = None
    if need_gx:
        # grad x is a full correlation with the rotated, channel-swapped kernel
        wt = np.ascontiguousarray(
            wdata[::-1, ::-1].transpose(0, 1, 3, 2)
        ).reshape(9 * c_out, c_in)
        gp = _pad_into(g, "conv.gp")
        gx = np.empty_like(x)
    step = _chunk_step(n, h * ww * 9 * max(c_in, c_out) * x.itemsize)
    for i in range(0, n, step):
        j = min(n, i + step)
        cols = _gather_cols(xp[i:j], j - i, h, ww, c_in, "conv.cols")
        gw += cols.T @ g[i:j].reshape(-1, c_out)
        if need_gx:
            gcols = _gather_cols(gp[i:j], j - i, h, ww, c_out, "conv.gcols")
            np.matmul(gcols, wt, out=gx[i:j].reshape(-1, c_in))
    gb = g.sum(axis=(0, 1, 2))
    return gx, gw.reshape(3, 3, c_in, c_out), gb


def conv2d(x, w, b):
    """Same-padding stride-1 convolution; kernels are 3x3 or 1x1.

    x: (n,h,w,c_in), w: (k,k,c_in,c_out), b: (c_out,). Output (n,h,w,c_out).
    """
    _require_rank4(x, "conv2d")
    kh, kw, c_in, c_out = w.data.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d supports 3x3 or 1x1 kernels, got {kh}x{kw}")
    if x.data.shape[3] != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} has "
            f"{x.data.shape[3]} channels, weights {w.shape} expect {c_in}"
        )
    xd, wd = x.data, w.data
    if kh == 1:
        wm = wd.reshape(c_in, c_out)
        y = xd.reshape(-1, c_in) @ wm
        y = y.reshape(xd.shape[:3] + (c_out,))
    else:
        y = _conv3_forward(xd, wd)
    y += b.data
    out = Tensor(y)

    def back(g):
        if kh == 1:
            gb = g.sum(axis=(0, 1, 2))
            gflat = g.reshape(-1, c_out)
            gw = (xd.reshape(-1, c_in).T @ gflat).reshape(wd.shape)
            gx = (gflat @ wm.T).reshape(xd.shape) if x.watched else None
            return gx, gw, gb
        return _conv3_backward(g, xd, wd, x.watched)

    return record_op(out, (x, w, b), back)


def transposed_conv2d(x, w, b):
    """2x2 stride-2 transposed convolution: (n,h,w,c_in) -> (n,2h,2w,c_out).

    w: (2,2,c_in,c_out). Adjoint of a stride-2 2x2 convolution; with this
    kernel/stride each output pixel receives exactly one tap.
    """
    _require_rank4(x, "transposed_conv2d")
    kh, kw, c_in, c_out = w.data.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed_conv2d uses 2x2 kernels, got {kh}x{kw}")
    if x.data.shape[3] != c_in:
        raise ShapeError(
            f"transposed_conv2d channel mismatch: input shape {x.shape} has "
            f"{x.data.shape[3]} channels, weights {w.shape} expect {c_in}"
        )
    xd, wd = x.data, w.data
    n, h, w_, _ = xd.shape
    wm = np.ascontiguousarray(wd.transpose(2, 0, 1, 3)).reshape(c_in, 4 * c_out)
    y = np.empty((n, 2 * h, 2 * w_, c_out), xd.dtype)
    step = _chunk_step(n, h * w_ * 4 * c_out * xd.itemsize)
    for i in range(0, n, step):
        j = min(n, i + step)
        t = _buf("up.t", ((j - i) * h * w_, 4 * c_out), xd.dtype)
        np.matmul(xd[i:j].reshape(-1, c_in), wm, out=t)
        t = t.reshape(j - i, h, w_, 2, 2, c_out)
        for di in range(2):
            for dj in range(2):
                y[i:j, di::2, dj::2, :] = t[:, :, :, di, dj, :]
    y += b.data
    out = Tensor(y)

    def back(g):
        gb = g.sum(axis=(0, 1, 2))
        gw = np.zeros((c_in, 4 * c_out), xd.dtype)
        gx = np.empty_like(xd) if x.watched else None
        for i in range(0, n, step):
            j = min(n, i + step)
            gt = _buf("up.gt", (j - i, h, w_, 2, 2, c_out), xd.dtype)
            for di in range(2):
                for dj in range(2):
                    gt[:, :, :, di, dj, :] = g[i:j, di::2, dj::2, :]
            gtf = gt.reshape(-1, 4 * c_out)
            gw += xd[i:j].reshape(-1, c_in).T @ gtf
            if gx is not None:
                np.matmul(gtf, wm.T, out=gx[i:j].reshape(-1, c_in))
        gwr = gw.reshape(c_in, 2, 2, c_out).transpose(1, 2, 0, 3)
        return gx, np.ascontiguousarray(gwr), gb

    return record_op(out, (x, w, b), back)


def max_pool2d(x):
    """2x2 stride-2 max pooling; gradients route to the first argmax in
    row-major window order."""
    _require_rank4(x, "max_pool2d")
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    xd = x.data
    # the four window corners as strided views; ties resolve to the earliest
    # corner because later corners win only on strict inequality
    v00 = xd[:, 0::2, 0::2, :]
    v01 = xd[:, 0::2, 1::2, :]
    v10 = xd[:, 1::2, 0::2, :]
    v11 = xd[:, 1::2, 1::2, :]
    m0 = np.maximum(v00, v01)
    m1 = np.maximum(v10, v11)
    y = np.maximum(m0, m1)
    i0 = (v01 > v00).view(np.uint8)
    i1 = (v11 > v10).view(np.uint8) + 2
    idx = np.where(m1 > m0, i1, i0)
    out = Tensor(y)

    def back(g):
        gx = np.empty_like(xd)
        gx[:, 0::2, 0::2, :] = g * (idx == 0)
        gx[:, 0::2, 1::2, :] = g * (idx == 1)
        gx[:, 1::2, 0::2, :] = g * (idx == 2)
        gx[:, 1::2, 1::2, :] = g * (idx == 3)
        return (gx,)

    return record_op(out, (x,), back)


def relu(x):
    y = np.maximum(x.data, 0)
    out = Tensor(y)

    def back(g):
        return (g * (x.data > 0),)

    return record_op(out, (x,), back)


def sigmoid(x):
    """Numerically stable logistic; output clipped to the open interval (0,1)
    representable in the working dtype."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0, z) / (1.0 + z)
    fi = np.finfo(xd.dtype)
    np.clip(y, fi.tiny, 1.0 - fi.epsneg, out=y)
    out = Tensor(y.astype(xd.dtype, copy=False))

    def back(g):
        return (g * out.data * (1.0 - out.data),)

    return record_op(out, (x,), back)


def dropout(x, p, training, rng):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode or at p == 0. The mask comes from ``rng``.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = rng.random(x.data.shape, dtype=np.float32) >= p
    scale = np.asarray(1.0 / (1.0 - p), x.data.dtype)
    y = np.where(keep, x.data, 0)
    y *= scale
    out = Tensor(y)

    def back(g):
        gx = np.where(keep, g, 0)
        gx *= scale
        return (gx,)

    return record_op(out, (x,), back)


def concat_channels(a, b):
    """Concatenate along the channel axis; a's channels come first."""
    _require_rank4(a, "concat_channels")
    _require_rank4(b, "concat_channels")
    if a.data.shape[:3] != b.data.shape[:3]:
        raise ShapeError(
            f"concat_channels needs matching (n,h,w), got {a.shape} and {b.shape}"
        )
    ca = a.data.shape[3]
    out = Tensor(np.concatenate([a.data, b.data], axis=3))

    def back(g):
        # views; engine accumulation is copy-on-write for borrowed grads
        return g[..., :ca], g[..., ca:]

    return record_op(out, (a, b), back)


def bce_loss(pred, target, eps=1e-7):
    """Mean binary cross-entropy; predictions are clamped to [eps, 1-eps]."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"bce_loss shape mismatch: pred {pred.shape} vs target {target.shape}"
        )
    p = np.clip(pred.data, eps, 1.0 - eps)
    t = target.data
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    out = Tensor(np.asarray(loss, pred.data.dtype))

    def back(g):
        inside = (pred.data > eps) & (pred.data < 1.0 - eps)
        gp = (p - t) / (p * (1.0 - p) * p.size)
        gp *= inside
        gp *= g
        return gp.astype(pred.data.dtype, copy=False), None

    return record_op(out, (pred, target), back)


def tensor_sum(x):
    """Sum of all elements as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), x.data.dtype))

    def back(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True),)

    return record_op(out, (x,), back)


def scalar_mean(tensors):
    """Mean of scalar tensors (used to pool per-output losses)."""
    if not tensors:
        raise ShapeError("scalar_mean needs at least one tensor")
    n = len(tensors)
    val = sum(float(t.data) for t in tensors) / n
    out = Tensor(np.asarray(val, tensors[0].data.dtype))

    def back(g):
        share = g / n
        return tuple(np.asarray(share, t.data.dtype) for t in tensors)

    return record_op(out, tuple(tensors), back)
