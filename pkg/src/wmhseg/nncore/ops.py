"""Dense NCHW tensor kernels and their analytic gradients.

Convolutions go through an im2col / col2im pair so the heavy lifting is a
single BLAS matmul per call.  Everything here is stateless; the layer
classes in :mod:`wmhseg.nncore.layers` own caching and parameters.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _check_nchw(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns are (c, ki, kj)."""
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window columns back to an image."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * ho
        for j in range(k):
            out[:, :, i:hi:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation. ``weight`` has shape (out_ch, in_ch, k, k).

    Returns ``(out, cols)``; ``cols`` is the im2col buffer needed by
    :func:`conv2d_backward`.
    """
    _check_nchw(x, "input")
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[1] != ci:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")
    cols = im2col(x, k, stride, padding)
    out = cols @ weight.reshape(co, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(grad_out, cols, x_shape, weight, stride: int, padding: int,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    co, ci, k, _ = weight.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (g.T @ cols).reshape(weight.shape)
    db = g.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = g @ weight.reshape(co, -1)
        dx = col2im(dcols, x_shape, k, stride, padding)
    return dx, dw, db


def conv2d_transpose(x, weight, bias=None, stride: int = 1, padding: int = 0,
                     output_size=None):
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``weight`` has shape (in_ch, out_ch, k, k): the same tensor used as a
    ``conv2d`` weight maps out_ch -> in_ch, and this op maps back.
    """
    _check_nchw(x, "input")
    ci, co, k, _ = weight.shape
    if x.shape[1] != ci:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {ci}")
    n, _, h, w = x.shape
    if output_size is None:
        ho = conv_transpose_output_size(h, k, stride, padding)
        wo = conv_transpose_output_size(w, k, stride, padding)
    else:
        ho, wo = output_size
        if conv_output_size(ho, k, stride, padding) != h or conv_output_size(wo, k, stride, padding) != w:
            raise ValueError(f"output_size {output_size} inconsistent with input {h}x{w}")
    xm = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    cols = xm @ weight.reshape(ci, -1)
    out = col2im(cols, (n, co, ho, wo), k, stride, padding)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_transpose_backward(grad_out, x, weight, stride: int, padding: int,
                              need_input_grad: bool = True):
    ci, co, k, _ = weight.shape
    gcols = im2col(grad_out, k, stride, padding)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    dw = (xm.T @ gcols).reshape(weight.shape)
    db = grad_out.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        n, _, h, w = x.shape
        dx = (gcols @ weight.reshape(ci, -1).T).reshape(n, h, w, ci).transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


# -- activations --------------------------------------------------------------

def leaky_relu(x, slope: float = 0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad, x, slope: float = 0.2):
    return np.where(x > 0, grad, slope * grad)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, x):
    return np.where(x > 0, grad, 0).astype(grad.dtype, copy=False)


def tanh01(x):
    return (np.tanh(x) + 1) / 2


def tanh01_backward(grad, y):
    # y = (tanh + 1) / 2  =>  dy/dx = (1 - tanh^2) / 2 = 2 y (1 - y)
    return grad * 2 * y * (1 - y)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_backward(grad, y):
    return grad * y * (1 - y)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout mask: kept units carry 1/(1 - rate), dropped ones 0."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1 - rate)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Return ``(out, mask)``; mask is None in eval mode (identity)."""
    if not train or rate == 0:
        return x, None
    mask = dropout_mask(x.shape, rate, rng, x.dtype)
    return x * mask, mask


def batch_norm(x, gamma, beta, running_mean, running_var, train: bool,
               momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalisation over (batch, height, width).

    In train mode the running statistics are updated in place (unbiased
    variance, as the usual momentum convention does).  Returns ``(out, cache)``.
    """
    if gamma.shape[0] != x.shape[1]:
        raise ValueError(f"batch_norm has {gamma.shape[0]} channels, input has {x.shape[1]}")
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, train)


def batch_norm_backward(grad, cache, gamma):
    xhat, inv_std, train = cache
    shape = (1, -1, 1, 1)
    dgamma = (grad * xhat).sum(axis=(0, 2, 3))
    dbeta = grad.sum(axis=(0, 2, 3))
    dxhat = grad * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = grad.size // grad.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx.astype(grad.dtype, copy=False), dgamma, dbeta
