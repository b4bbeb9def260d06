"""Dense NCHW tensor primitives with hand-written backward passes.

Tensors are plain :class:`numpy.ndarray` objects. Activations are laid out
NCHW, convolution weights OIHW where ``I`` is the per-group input width.
Every op preserves the dtype of its input, so the same code runs in float32
for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Layer configuration is invalid (e.g. channels not divisible by groups)."""


def conv_output_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, w, pad, stride, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"invalid stride={stride} / pad={pad}")
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ConfigError(
            f"in_channels={c} and out_channels={o} must both be divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(
            f"weight in-channel dim {cg} != input channels {c} / groups {groups}")
    ho = conv_output_size(h, kh, pad, stride)
    wo = conv_output_size(wd, kw, pad, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")
    return ho, wo


def _im2col(x, kh, kw, pad, stride, groups):
    """Return columns shaped (groups, N*Ho*Wo, Cg*kh*kw)."""
    n, c, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cg = c // groups
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cg * kh * kw)
    return cols


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           pad: int = 0, stride: int = 1, groups: int = 1) -> np.ndarray:
    """Grouped 2-d convolution (cross-correlation) via im2col + matmul."""
    ho, wo = _check_conv(x, weight, pad, stride, groups)
    n = x.shape[0]
    o, cg, kh, kw = weight.shape
    og = o // groups
    if kh == kw == 1 and stride == 1 and pad == 0:
        xg = x.reshape(n, groups, cg, ho * wo)
        wg = weight.reshape(groups, og, cg)
        out = np.matmul(wg, xg).reshape(n, o, ho, wo)
    else:
        cols = _im2col(x, kh, kw, pad, stride, groups)
        wmat = weight.reshape(groups, og, cg * kh * kw)
        out = np.matmul(cols, wmat.transpose(0, 2, 1))  # (G, NHW, Og)
        out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} != ({o},)")
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    pad: int = 0, stride: int = 1, groups: int = 1):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    ho, wo = _check_conv(x, weight, pad, stride, groups)
    n, c, h, wd = x.shape
    o, cg, kh, kw = weight.shape
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")
    og = o // groups
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    # (G, NHW, Og)
    go = grad_out.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(
        groups, n * ho * wo, og)
    wmat = weight.reshape(groups, og, cg * kh * kw)
    if kh == kw == 1 and stride == 1 and pad == 0:
        xg = x.reshape(n, groups, cg, ho * wo)
        gg = grad_out.reshape(n, groups, og, ho * wo)
        grad_w = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        grad_x = np.matmul(wmat.transpose(0, 2, 1), gg).reshape(x.shape)
        return grad_x.astype(x.dtype), grad_w.astype(weight.dtype), grad_bias
    cols = _im2col(x, kh, kw, pad, stride, groups)
    grad_w = np.matmul(go.transpose(0, 2, 1), cols).reshape(weight.shape)
    dcols = np.matmul(go, wmat)  # (G, NHW, Cg*kh*kw)
    dcols = dcols.reshape(groups, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    gpad = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    grad_x = gpad[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(grad_x), grad_w.astype(weight.dtype), grad_bias


def conv2d_direct(x, weight, bias=None, pad=0, stride=1, groups=1):
    """Reference convolution: explicit loops, dense block-diagonal weight.

    Slow by design. The grouped weight is first expanded to the equivalent
    dense (O, C, kh, kw) weight with zeros outside each group's block, so the
    grouping logic is checked independently of the im2col path.
    """
    ho, wo = _check_conv(x, weight, pad, stride, groups)
    n, c, h, wd = x.shape
    o, cg, kh, kw = weight.shape
    og = o // groups
    dense = np.zeros((o, c, kh, kw), dtype=np.float64)
    for oc in range(o):
        g = oc // og
        dense[oc, g * cg:(g + 1) * cg] = weight[oc]
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * dense[oc])
            if bias is not None:
                out[b, oc] += bias[oc]
    return out.astype(x.dtype)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def batchnorm2d(x, gamma, beta, running_mean, running_var, train=False,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is usual).
    Returns ``(out, cache)``; cache is ``None`` in eval mode.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    c = x.shape[1]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    cache = (xhat, inv_std) if train else None
    return out.astype(x.dtype, copy=False), cache


def batchnorm2d_backward(grad_out, cache, gamma):
    """Backward of train-mode batch norm. Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    c = gamma.shape[0]
    m = grad_out.size // c
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    grad_x = (inv_std.reshape(1, c, 1, 1) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def avgpool_global(x: np.ndarray) -> np.ndarray:
    """Average over H and W, keeping them as singleton dims."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool_global expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def avgpool_global_backward(grad_out: np.ndarray, in_shape) -> np.ndarray:
    h, w = in_shape[2], in_shape[3]
    return np.broadcast_to(grad_out / (h * w), in_shape).copy()


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Fully connected layer; inputs with more than 2 dims are flattened."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: {x2.shape[1]} input features vs weight {weight.shape}")
    out = x2 @ weight.T
    if bias is not None:
        out = out + bias
    return out.astype(x.dtype, copy=False)


def linear_backward(grad_out, x, weight):
    x2 = x.reshape(x.shape[0], -1)
    grad_w = grad_out.T @ x2
    grad_b = grad_out.sum(axis=0)
    grad_x = (grad_out @ weight).reshape(x.shape)
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


def downsample_pad(x: np.ndarray, stride: int, out_ch: int) -> np.ndarray:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    sub = x[:, :, ::stride, ::stride]
    extra = out_ch - x.shape[1]
    if extra < 0:
        raise ShapeError(f"downsample_pad cannot shrink {x.shape[1]} -> {out_ch} channels")
    lo = extra // 2
    return np.pad(sub, ((0, 0), (lo, extra - lo), (0, 0), (0, 0)))


def downsample_pad_backward(grad_out: np.ndarray, in_shape, stride: int) -> np.ndarray:
    c = in_shape[1]
    lo = (grad_out.shape[1] - c) // 2
    grad = np.zeros(in_shape, dtype=grad_out.dtype)
    grad[:, :, ::stride, ::stride] = grad_out[:, lo:lo + c]
    return grad
