"""Pure-numpy reference implementations of the hot kernels.

Same function surface as the compiled core (`_core`). All functions take and
return C-contiguous float32/float64 arrays; shape handling (padding, leading
axes, dtype policy) lives in the autodiff layer.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw):
    """Unfold valid (kh, kw) patches of x (n, H, W, C) to (n*Ho*Wo, kh*kw*C)."""
    n, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (n, Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(n * ho * wo, kh * kw * c)


def col2im(gcols, n, h, w, c, kh, kw):
    """Adjoint of im2col: scatter-add patch gradients back onto (n, H, W, C)."""
    ho, wo = h - kh + 1, w - kw + 1
    gc = gcols.reshape(n, ho, wo, kh, kw, c)
    gx = np.zeros((n, h, w, c), dtype=gcols.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, p:p + ho, q:q + wo, :] += gc[:, :, :, p, q, :]
    return gx


def softmax_forward(x):
    """Row-wise softmax of x (n, d) with max-subtraction for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(g, y):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layer_norm_forward(x, gamma, beta, eps):
    """Normalize rows of x (n, d) to mean 0 / variance 1, then affine rescale.

    Returns (y, xhat, inv_std); xhat and inv_std are reused by the backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma + beta
    return y, xhat, np.ascontiguousarray(inv_std[:, 0])


def layer_norm_backward(g, xhat, inv_std, gamma):
    dxhat = g * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    return gx, ggamma, gbeta
