"""Neural-net primitives recorded on the tape.

All backward rules are hand-written closures over the forward activations;
each one is covered by a finite-difference check in the test suite.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _nary

__all__ = [
    "conv2d", "batchnorm2d", "linear", "global_avg_pool",
    "softmax", "softmax_cross_entropy", "mix", "downsample_pad",
]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW input, [Cout, Cin, kh, kw] weight, no bias."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    def forward(xd, wd):
        cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
        wflat = wd.reshape(cout, -1)
        out = cols @ wflat.T
        return out.transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def backward(g, xd, wd):
        cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
        wflat = wd.reshape(cout, -1)
        gflat = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)
        dw = np.einsum("nqo,nqk->ok", gflat, cols).reshape(wd.shape)
        dcols = gflat @ wflat
        dx = _col2im(dcols, xd.shape, kh, kw, stride, padding)
        return dx, dw

    return _nary((x, weight), forward, backward)


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by biased batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.  eps keeps a
    zero-variance channel finite.
    """
    n, c, h, w = x.shape
    m = n * h * w
    if training and m < 2:
        raise ValueError(f"batchnorm needs at least 2 values per channel in train mode, got {m}")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)

    def forward(xd, sc, sh):
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
        return sc[None, :, None, None] * xhat + sh[None, :, None, None]

    def backward(g, xd, sc, sh):
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
        dscale = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        ghat = g * sc[None, :, None, None]
        if training:
            # biased-variance batchnorm backward
            sum_g = ghat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (ghat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] / m * (m * ghat - sum_g - xhat * sum_gx)
        else:
            dx = ghat * inv_std[None, :, None, None]
        return dx, dscale, dshift

    return _nary((x, scale, shift), forward, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: x [N, F] times weight [out, F], plus bias [out]."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear feature mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")

    if bias is None:
        def forward(xd, wd):
            return xd @ wd.T

        def backward(g, xd, wd):
            return g @ wd, g.T @ xd

        return _nary((x, weight), forward, backward)

    def forward_b(xd, wd, bd):
        return xd @ wd.T + bd

    def backward_b(g, xd, wd, bd):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _nary((x, weight, bias), forward_b, backward_b)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    n, c, h, w = x.shape

    def forward(xd):
        return xd.mean(axis=(2, 3))

    def backward(g, xd):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape).astype(xd.dtype),)

    return _nary((x,), forward, backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    def forward(xd):
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(g, xd):
        s = forward(xd)
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _nary((x,), forward, backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    def logp(xd):
        z = xd - xd.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def forward(xd):
        return np.asarray(-logp(xd)[np.arange(n), labels].mean())

    def backward(g, xd):
        p = np.exp(logp(xd))
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _nary((logits,), forward, backward)


def mix(masks: Tensor, outputs: Sequence[Tensor]) -> Tensor:
    """Weighted sum of candidate outputs: sum_k m_k * out_k.

    ``masks`` is either [K] (one mask per batch) or [N, K] (per example).
    Accumulation order is fixed at k = 0..K-1 so results are deterministic.
    Gradients flow to the masks and to every candidate output.
    """
    k = len(outputs)
    shape0 = outputs[0].shape
    for o in outputs[1:]:
        if o.shape != shape0:
            raise ValueError(f"candidate output shapes differ: {shape0} vs {o.shape}")
    per_example = masks.ndim == 2
    if masks.shape != ((shape0[0], k) if per_example else (k,)):
        raise ValueError(f"mask shape {masks.shape} does not fit {k} candidates")

    def expand(md, i):
        if not per_example:
            return md[i]
        return md[:, i].reshape((shape0[0],) + (1,) * (len(shape0) - 1))

    def forward(md, *outs):
        acc = expand(md, 0) * outs[0]
        for i in range(1, k):
            acc = acc + expand(md, i) * outs[i]
        return acc

    def backward(g, md, *outs):
        if per_example:
            axes = tuple(range(1, len(shape0)))
            dm = np.stack([(g * outs[i]).sum(axis=axes) for i in range(k)], axis=1)
        else:
            dm = np.array([(g * outs[i]).sum() for i in range(k)], dtype=md.dtype)
        douts = tuple(expand(md, i) * g for i in range(k))
        return (dm,) + douts

    return _nary((masks,) + tuple(outputs), forward, backward)


def downsample_pad(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free shortcut: spatial subsample plus zero-padded channels."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise ValueError(f"cannot pad {c} channels down to {out_channels}")

    def forward(xd):
        y = xd[:, :, ::stride, ::stride]
        if out_channels > c:
            y = np.pad(y, ((0, 0), (0, out_channels - c), (0, 0), (0, 0)))
        return np.ascontiguousarray(y)

    def backward(g, xd):
        dx = np.zeros_like(xd)
        dx[:, :, ::stride, ::stride] = g[:, :c]
        return (dx,)

    return _nary((x,), forward, backward)
