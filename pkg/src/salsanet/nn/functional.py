"""
Forward and backward kernels on NCHW numpy arrays.

Kernels preserve the input dtype: the engine runs in float32, gradient
checks run the very same code in float64.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _check_rank4(name: str, a: np.ndarray):
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {a.shape}")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"extent {size} with kernel {k}, stride {stride}, pad {pad} "
                         "does not give an integral output size")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patches as ``(N, C*kh*kw, H'*W')`` so that conv is one batched matmul."""
    n, c = x.shape[:2]
    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride]
        return xs.reshape(n, c, -1)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x (N,C,H,W)`` with ``w (K,C,kh,kw)`` plus bias."""
    _check_rank4("input", x)
    _check_rank4("weight", w)
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input {x.shape} and weight {w.shape} disagree on channels")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(k, -1), cols).reshape(n, k, ho, wo)
    if b is not None:
        if b.shape != (k,):
            raise ShapeError(f"bias {b.shape} does not match weight {w.shape}")
        out += b.reshape(1, k, 1, 1)
    return out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, pad: int = 0, bias: bool = True):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of :func:`conv2d`."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if grad_out.shape != (n, k, ho, wo):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output {(n, k, ho, wo)}")
    g = grad_out.reshape(n, k, ho * wo)
    cols = _im2col(x, kh, kw, stride, pad)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if bias else None

    dcols = np.matmul(w.reshape(k, -1).T, g).reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    grad_x = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def transposed_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Kernel-2, stride-2 transposed convolution; ``w`` is ``(C_in, C_out, 2, 2)``.

    Every input element scatters into its own 2x2 output block, so the
    output is exactly twice the input size.
    """
    _check_rank4("input", x)
    _check_rank4("weight", w)
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[2:] != (2, 2):
        raise ShapeError(f"input {x.shape} incompatible with 2x2 transposed weight {w.shape}")
    k = w.shape[1]
    y = np.matmul(w.reshape(c, k * 4).T, x.reshape(n, c, h * wd))
    out = y.reshape(n, k, 2, 2, h, wd).transpose(0, 1, 4, 2, 5, 3).reshape(n, k, 2 * h, 2 * wd)
    if b is not None:
        out += b.reshape(1, k, 1, 1)
    return out


def transposed_conv2d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, bias: bool = True):
    n, c, h, wd = x.shape
    k = w.shape[1]
    if grad_out.shape != (n, k, 2 * h, 2 * wd):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output {(n, k, 2 * h, 2 * wd)}")
    g = grad_out.reshape(n, k, h, 2, wd, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, k * 4, h * wd)
    grad_x = np.matmul(w.reshape(c, k * 4), g).reshape(x.shape)
    grad_w = np.matmul(x.reshape(n, c, h * wd), g.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if bias else None
    return grad_x, grad_w, grad_b


def batch_norm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalise with batch statistics; returns ``(out, cache, mean, var)``."""
    _check_rank4("input", x)
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise ShapeError(f"batch norm in train mode needs >= 2 values per channel, got shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, c, 1, 1)
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return out, (xhat, inv, gamma), mean, var


def batch_norm_train_backward(grad_out: np.ndarray, cache):
    xhat, inv, gamma = cache
    n, c, h, w = grad_out.shape
    m = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gx = (grad_out * gamma.reshape(1, c, 1, 1)
          - (grad_beta * gamma / m).reshape(1, c, 1, 1)
          - xhat * (grad_gamma * gamma / m).reshape(1, c, 1, 1))
    return gx * inv.reshape(1, c, 1, 1), grad_gamma, grad_beta


def batch_norm_infer(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    c = x.shape[1]
    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - running_mean * gamma * inv).astype(x.dtype)
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1), (x, inv, gamma)


def batch_norm_infer_backward(grad_out, cache):
    x, inv, gamma = cache
    c = x.shape[1]
    # running statistics are constants in infer mode
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match input {x.shape}")
    return grad_out * (gamma * inv).reshape(1, c, 1, 1), None, None


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, grad_out, grad_out * grad_out.dtype.type(slope))


def max_pool2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; returns ``(out, argmax)`` with argmax in ``0..3`` row-major."""
    _check_rank4("input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {x.shape}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2_backward(grad_out: np.ndarray, arg: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, arg[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def dropout(x: np.ndarray, p: float, rng: Optional[np.random.Generator], train: bool):
    """Inverted dropout; returns ``(out, mask)``.  ``mask`` is None when inactive."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_channels(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
