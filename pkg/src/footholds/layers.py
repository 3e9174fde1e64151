"""Dense NCHW layer kernels with explicit backward passes.

Convolutions are computed tap by tap: each kernel position contributes one
channel-mixing tensordot over a strided slice, which keeps the arithmetic in
large GEMMs without an im2col buffer.  All kernels preserve the input dtype,
so the same code runs the 32-bit training path and the 64-bit finite
difference checks.
"""

from __future__ import annotations

import numpy as np


def _pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, W, b, stride=1, dilation=(1, 1), pad=(0, 0)):
    """x (N,Ci,H,W), W (Co,Ci,kh,kw), b (Co,) -> y (N,Co,Ho,Wo) and cache."""
    n, ci, h, w = x.shape
    co, ci2, kh, kw = W.shape
    assert ci == ci2, (ci, ci2)
    dh, dw = dilation
    ph, pw = pad
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // stride + 1
    xp = _pad_hw(x, ph, pw)
    y = np.zeros((n, co, ho, wo), dtype=x.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, dh * i: dh * i + span_h: stride,
                    dw * j: dw * j + span_w: stride]
            y += np.tensordot(sl, W[:, :, i, j],
                              axes=([1], [1])).transpose(0, 3, 1, 2)
    y += b[None, :, None, None]
    return y, (x, W, stride, dilation, pad)


def conv2d_backward(dy, cache):
    x, W, stride, (dh, dw), (ph, pw) = cache
    n, ci, h, w = x.shape
    co, _, kh, kw = W.shape
    ho, wo = dy.shape[2], dy.shape[3]
    xp = _pad_hw(x, ph, pw)
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(dh * i, dh * i + span_h, stride),
                  slice(dw * j, dw * j + span_w, stride))
            dW[:, :, i, j] = np.tensordot(dy, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            dxp[sl] += np.tensordot(dy, W[:, :, i, j],
                                    axes=([1], [0])).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3))
    dx = dxp[:, :, ph: ph + h, pw: pw + w] if (ph or pw) else dxp
    return dx, dW, db


def convT2d_forward(x, W, b, stride, pad=0, out_pad=0):
    """Transposed conv; x (N,Ci,H,W), W (Ci,Co,k,k) -> (N,Co,Ho,Wo), cache.

    Ho = stride*(H-1) + k - 2*pad + out_pad.
    """
    n, ci, h, w = x.shape
    ci2, co, kh, kw = W.shape
    assert ci == ci2 and kh == kw
    k = kh
    ho = stride * (h - 1) + k - 2 * pad + out_pad
    wo = stride * (w - 1) + k - 2 * pad + out_pad
    full_h = stride * (h - 1) + k + out_pad
    full_w = stride * (w - 1) + k + out_pad
    yf = np.zeros((n, co, full_h, full_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(x, W[:, :, i, j],
                                   axes=([1], [0])).transpose(0, 3, 1, 2)
            yf[:, :, i: i + stride * (h - 1) + 1: stride,
               j: j + stride * (w - 1) + 1: stride] += contrib
    y = yf[:, :, pad: pad + ho, pad: pad + wo] + b[None, :, None, None]
    return y, (x, W, stride, pad, out_pad)


def convT2d_backward(dy, cache):
    x, W, stride, pad, out_pad = cache
    n, ci, h, w = x.shape
    _, co, k, _ = W.shape
    full_h = stride * (h - 1) + k + out_pad
    full_w = stride * (w - 1) + k + out_pad
    dyf = np.zeros((n, co, full_h, full_w), dtype=dy.dtype)
    dyf[:, :, pad: pad + dy.shape[2], pad: pad + dy.shape[3]] = dy
    dx = np.zeros_like(x)
    dW = np.zeros_like(W)
    for i in range(k):
        for j in range(k):
            sl = dyf[:, :, i: i + stride * (h - 1) + 1: stride,
                     j: j + stride * (w - 1) + 1: stride]
            dx += np.tensordot(sl, W[:, :, i, j],
                               axes=([1], [1])).transpose(0, 3, 1, 2)
            dW[:, :, i, j] = np.tensordot(x, sl, axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    return dx, dW, db


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; even spatial sizes only."""
    n, c, h, w = x.shape
    assert h % 2 == 0 and w % 2 == 0
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)           # first max wins on ties
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    idx, shape = cache
    n, c, h, w = shape
    dflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    return (dflat.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def softmax_channels(logits):
    """Softmax over axis 1, numerically shifted; preserves dtype."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce_forward(logits, labels, class_w):
    """Mean over pixels of w[y] * (-log softmax[y]).

    logits (N,C,H,W), labels (N,H,W) int, class_w (C,).
    Returns (loss, dlogits) since the backward reuses the softmax.
    """
    n, c, h, w = logits.shape
    p = softmax_channels(logits)
    np.clip(p, 1e-30, None, out=p)
    onehot_idx = labels[:, None, :, :]
    py = np.take_along_axis(p, onehot_idx, axis=1)[:, 0]
    wy = class_w.astype(logits.dtype)[labels]
    npix = n * h * w
    loss = float((wy * -np.log(py)).sum() / npix)
    dlogits = p.copy()
    np.put_along_axis(dlogits, onehot_idx,
                      np.take_along_axis(dlogits, onehot_idx, axis=1) - 1.0,
                      axis=1)
    dlogits *= (wy / npix)[:, None]
    return loss, dlogits


class Adam:
    """Standard Adam with bias correction; state per parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            mhat = m / corr1
            vhat = v / corr2
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
