"""Forward and backward passes for the layer types of the reference networks.

All functions are pure: caches needed by a backward pass are returned by the
matching forward pass and handed back explicitly. Arithmetic happens in the
dtype of the inputs, so float64 inputs give a float64 pipeline suitable for
finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidLabelError, InvalidParameterError, InvalidShapeError
from .tensor import _pair, col2im_batch, conv_output_size, gemm, im2col_batch


@dataclass
class ConvParams:
    weights: np.ndarray  # [n_out, n_in, kh, kw]
    bias: np.ndarray  # [n_out]
    stride: int | tuple = 1
    pad: int | tuple = 0

    @property
    def n_out(self):
        return self.weights.shape[0]

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2:]


@dataclass
class FcParams:
    weights: np.ndarray  # [n_out, n_in]
    bias: np.ndarray  # [n_out]


@dataclass
class LayerGrads:
    grad_input: np.ndarray
    grad_weights: np.ndarray | None = None
    grad_bias: np.ndarray | None = None


def _check_conv(x, p):
    if x.ndim != 4:
        raise InvalidShapeError(f"conv input must be [B,C,H,W], got {x.shape}")
    if p.weights.ndim != 4 or p.bias.shape != (p.n_out,):
        raise InvalidShapeError(
            f"bad conv params: weights {p.weights.shape}, bias {p.bias.shape}"
        )
    if x.shape[1] != p.n_in:
        raise InvalidShapeError(f"input has {x.shape[1]} channels, filters expect {p.n_in}")


def conv_forward(x, p: ConvParams, return_cols=False):
    x = np.asarray(x)
    _check_conv(x, p)
    B = x.shape[0]
    kh, kw = p.kernel
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.pad)
    Ho = conv_output_size(x.shape[2], kh, sh, ph)
    Wo = conv_output_size(x.shape[3], kw, sw, pw)
    cols = im2col_batch(x, (kh, kw), (sh, sw), (ph, pw))
    out = gemm(p.weights.reshape(p.n_out, -1), cols)
    out = out.reshape(p.n_out, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) + p.bias.reshape(1, -1, 1, 1)
    if return_cols:
        return out, cols
    return out


def conv_backward(x, p: ConvParams, grad_out, cols=None):
    x = np.asarray(x)
    _check_conv(x, p)
    B, n_out = x.shape[0], p.n_out
    kh, kw = p.kernel
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.pad)
    Ho = conv_output_size(x.shape[2], kh, sh, ph)
    Wo = conv_output_size(x.shape[3], kw, sw, pw)
    if grad_out.shape != (B, n_out, Ho, Wo):
        raise InvalidShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(B, n_out, Ho, Wo)}"
        )
    if cols is None:
        cols = im2col_batch(x, (kh, kw), (sh, sw), (ph, pw))
    g = grad_out.transpose(1, 0, 2, 3).reshape(n_out, -1)
    w_flat = p.weights.reshape(n_out, -1)
    grad_w = gemm(g, cols, transpose_b=True).reshape(p.weights.shape)
    grad_b = g.sum(axis=1)
    dcols = gemm(w_flat, g, transpose_a=True)
    grad_x = col2im_batch(dcols, (kh, kw), (sh, sw), (ph, pw), x.shape)
    return LayerGrads(grad_x, grad_w, grad_b)


def _check_fc(x, p):
    if x.ndim != 2 or p.weights.ndim != 2 or p.bias.shape != (p.weights.shape[0],):
        raise InvalidShapeError(
            f"bad fc shapes: input {x.shape}, weights {p.weights.shape}, bias {p.bias.shape}"
        )
    if x.shape[1] != p.weights.shape[1]:
        raise InvalidShapeError(
            f"input has {x.shape[1]} features, weights expect {p.weights.shape[1]}"
        )


def fc_forward(x, p: FcParams):
    x = np.asarray(x)
    _check_fc(x, p)
    return gemm(x, p.weights, transpose_b=True) + p.bias


def fc_backward(x, p: FcParams, grad_out):
    x = np.asarray(x)
    _check_fc(x, p)
    if grad_out.shape != (x.shape[0], p.weights.shape[0]):
        raise InvalidShapeError(f"grad_out shape {grad_out.shape} does not match fc output")
    return LayerGrads(
        gemm(grad_out, p.weights),
        gemm(grad_out, x, transpose_a=True),
        grad_out.sum(axis=0),
    )


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    if np.shape(x) != np.shape(grad_out):
        raise InvalidShapeError(f"relu shapes differ: {np.shape(x)} vs {np.shape(grad_out)}")
    return grad_out * (x > 0)


@lru_cache(maxsize=16)
def _pool_origins(B, C, H, W, Ho, Wo, sh, sw):
    """Flat input index of the top-left corner of every pooling window."""
    rows = np.arange(Ho).reshape(1, 1, Ho, 1) * (sh * W)
    cols = np.arange(Wo).reshape(1, 1, 1, Wo) * sw
    base = (np.arange(B).reshape(B, 1, 1, 1) * C + np.arange(C).reshape(1, C, 1, 1)) * (H * W)
    out = base + rows + cols
    out.flags.writeable = False
    return out


def maxpool_forward(x, window=2, stride=2):
    """Max over windows, floor mode. Returns ``(out, argmax)``.

    ``argmax`` holds, for each output element, the flat index into ``x`` of
    the winning input. Ties resolve to the lowest linear index.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"maxpool input must be [B,C,H,W], got {x.shape}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    B, C, H, W = x.shape
    if kh < 1 or kw < 1 or sh < 1 or sw < 1 or kh > H or kw > W:
        raise InvalidShapeError(f"invalid pool geometry window={window} stride={stride} on {H}x{W}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    best = best_pos = None
    # offsets scanned in row-major order; strict '>' keeps the earliest,
    # i.e. lowest linear index, among ties
    for q in range(kh * kw):
        i, j = divmod(q, kw)
        v = x[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]
        if best is None:
            best, best_pos = v.copy(), np.zeros(v.shape, dtype=np.int16)
            continue
        best_pos[v > best] = q
        np.maximum(best, v, out=best)
    offsets = np.array([(q // kw) * W + q % kw for q in range(kh * kw)], dtype=np.int64)
    argmax = _pool_origins(B, C, H, W, Ho, Wo, sh, sw) + offsets[best_pos]
    return best, argmax


def maxpool_backward(argmax, grad_out, input_shape):
    if argmax.shape != grad_out.shape:
        raise InvalidShapeError(f"argmax {argmax.shape} vs grad_out {grad_out.shape}")
    size = int(np.prod(input_shape))
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype, copy=False).reshape(input_shape)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidLabelError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(B)
    loss = float(np.mean(log_norm - z[idx, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[idx, labels] -= 1
    grad /= B
    return loss, grad


def standard_dropout(x, p_drop, rng, train=True):
    """Inverted dropout: survivors are scaled by ``1/(1-p_drop)`` at train time."""
    if not 0.0 <= p_drop < 1.0:
        raise InvalidParameterError(f"p_drop must be in [0, 1), got {p_drop}")
    x = np.asarray(x)
    if not train or p_drop == 0.0:
        return x.copy(), np.ones(x.shape, dtype=x.dtype)
    keep = (rng.random(x.shape) >= p_drop).astype(x.dtype)
    mask = keep / x.dtype.type(1.0 - p_drop)
    return x * mask, mask


def standard_dropout_backward(mask, grad_out):
    return grad_out * mask
