"""Pure-numpy kernels. Always importable; the reference path for the numba twins."""
import numpy as np


def im2col(x, k, stride, pad):
    """Unfold ``x`` (N, C, H, W) into a (N*Ho*Wo, k*k*C) matrix.

    Rows run over output pixels (n, oy, ox); columns over (i, j, c), so the
    matching weight matrix is ``weight.transpose(2, 3, 1, 0).reshape(k*k*C, C_out)``.
    """
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def col2im(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an (N, C, H, W) image."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, ho, wo, k, k, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))


def bn_forward_train(x, gamma, beta, eps):
    """Returns (out, xhat, mean, biased var, inv_std) using batch statistics."""
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, xhat, mean, var, inv_std.astype(x.dtype)


def bn_backward(g, xhat, gamma, inv_std):
    """Full batch-statistics chain rule. Returns (dx, dgamma, dbeta)."""
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std / m)[None, :, None, None]
    dx = scale * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx, dgamma, dbeta


def _reflect_index(n, pad):
    # index map for reflect padding that excludes the boundary sample
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def crop_flip(images, origins, flips, pad):
    """Reflect-pad by ``pad``, crop back to the input size at ``origins``, mirror where ``flips``."""
    n, c, h, w = images.shape
    rows = _reflect_index(h, pad)
    colsi = _reflect_index(w, pad)
    out = np.empty_like(images)
    for b in range(n):
        oy, ox = int(origins[b, 0]), int(origins[b, 1])
        r = rows[oy:oy + h]
        q = colsi[ox:ox + w]
        if flips[b]:
            q = q[::-1]
        out[b] = images[b][:, r[:, None], q[None, :]]
    return out
