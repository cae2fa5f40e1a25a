"""Pure-numpy depthwise 3x3 kernels (fallback when the compiled core is absent)."""

import numpy as np


def dwconv3x3_forward(x, kernel, bias):
    """Per-channel 3x3 cross-correlation, zero padding 1, stride 1."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros_like(x)
    for a in range(3):
        for e in range(3):
            out += kernel[None, :, a, e, None, None] * xp[:, :, a:a + H, e:e + W]
    out += bias[None, :, None, None]
    return out


def dwconv3x3_backward(x, kernel, grad_out):
    """Return (grad_x, grad_kernel, grad_bias) for :func:`dwconv3x3_forward`."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    gp = np.zeros_like(xp)
    gk = np.empty_like(kernel)
    for a in range(3):
        for e in range(3):
            gk[:, a, e] = np.einsum("bchw,bchw->c", grad_out, xp[:, :, a:a + H, e:e + W])
            gp[:, :, a:a + H, e:e + W] += kernel[None, :, a, e, None, None] * grad_out
    gb = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gp[:, :, 1:-1, 1:-1]), gk, gb
