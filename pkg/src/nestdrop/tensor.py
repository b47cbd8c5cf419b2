"""Dense tensor primitives for the convolution stack.

Tensors are plain C-contiguous ``numpy.ndarray`` objects. The column layout
used by :func:`im2col` is row ``c*kh*kw + i*kw + j`` and column
``b*Ho*Wo + y*Wo + x`` so that ``weights.reshape(n_out, -1) @ cols`` is a
convolution. Padding is never materialised: out-of-range reads are simply
left at zero in the column buffer.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidShapeError

DEFAULT_DTYPE = np.float32


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise InvalidShapeError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def alloc(shape, fill=0.0, dtype=DEFAULT_DTYPE):
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {shape}")
    return np.full(shape, fill, dtype=dtype)


def gemm(a, b, transpose_a=False, transpose_b=False):
    """``op(a) @ op(b)`` for 2-D operands."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidShapeError(f"gemm needs 2-D operands, got {a.shape} and {b.shape}")
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size, kernel, stride, pad):
    span = size + 2 * pad - kernel
    if stride < 1 or span < 0 or span % stride:
        raise InvalidShapeError(
            f"input {size}, kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _valid_range(out_size, offset, stride, in_size):
    # output positions o with 0 <= o*stride + offset < in_size
    lo = max(0, -(offset // stride))
    last = in_size - 1 - offset
    hi = min(out_size, last // stride + 1) if last >= 0 else 0
    return lo, max(lo, hi)


def _geometry(shape, kernel, stride, pad):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if kh < 1 or kw < 1 or ph < 0 or pw < 0:
        raise InvalidShapeError(f"bad kernel {kernel} or pad {pad}")
    _, _, H, W = shape
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W, kw, sw, pw)
    return kh, kw, sh, sw, ph, pw, Ho, Wo


def _windows(kh, kw, sh, sw, ph, pw, H, W, Ho, Wo):
    """Yield (i, j, out-slices, in-slices) for every kernel offset."""
    for i in range(kh):
        y0, y1 = _valid_range(Ho, i - ph, sh, H)
        for j in range(kw):
            x0, x1 = _valid_range(Wo, j - pw, sw, W)
            if y0 >= y1 or x0 >= x1:
                continue
            iy = slice(y0 * sh + i - ph, (y1 - 1) * sh + i - ph + 1, sh)
            ix = slice(x0 * sw + j - pw, (x1 - 1) * sw + j - pw + 1, sw)
            yield i, j, (slice(y0, y1), slice(x0, x1)), (iy, ix)


def im2col_batch(x, kernel, stride=1, pad=0):
    """Lower a batch ``[B, C, H, W]`` to columns ``[C*kh*kw, B*Ho*Wo]``."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"expected [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    kh, kw, sh, sw, ph, pw, Ho, Wo = _geometry(x.shape, kernel, stride, pad)
    cols = np.zeros((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i, j, (oy, ox), (iy, ix) in _windows(kh, kw, sh, sw, ph, pw, H, W, Ho, Wo):
        cols[:, i, j, :, oy, ox] = xt[:, :, iy, ix]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def col2im_batch(cols, kernel, stride, pad, out_shape):
    """Adjoint of :func:`im2col_batch`; overlapping contributions are summed."""
    cols = np.asarray(cols)
    B, C, H, W = (int(d) for d in out_shape)
    kh, kw, sh, sw, ph, pw, Ho, Wo = _geometry((B, C, H, W), kernel, stride, pad)
    if cols.shape != (C * kh * kw, B * Ho * Wo):
        raise InvalidShapeError(
            f"cols shape {cols.shape} inconsistent with image shape {tuple(out_shape)}"
        )
    c6 = cols.reshape(C, kh, kw, B, Ho, Wo)
    xt = np.zeros((C, B, H, W), dtype=cols.dtype)
    for i, j, (oy, ox), (iy, ix) in _windows(kh, kw, sh, sw, ph, pw, H, W, Ho, Wo):
        xt[:, :, iy, ix] += c6[:, i, j, :, oy, ox]
    return np.ascontiguousarray(xt.transpose(1, 0, 2, 3))


def im2col(x, kernel, stride=1, pad=0):
    """Single image ``[C, H, W]`` to ``[C*kh*kw, Ho*Wo]``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidShapeError(f"expected [C,H,W], got {x.shape}")
    return im2col_batch(x[None], kernel, stride, pad)


def col2im(cols, kernel, stride, pad, out_shape):
    if len(out_shape) != 3:
        raise InvalidShapeError(f"expected (C,H,W), got {out_shape}")
    return col2im_batch(cols, kernel, stride, pad, (1, *out_shape))[0]
