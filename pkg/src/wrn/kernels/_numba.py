"""numba twins of the kernels in ``_numpy``. Same signatures, same results up to rounding."""
import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(x, k, stride, pad, ho, wo):
    # padded image kept as (H, W*C) so each kernel row is one contiguous run of k*C values
    n, c, h, w = x.shape
    xp = np.zeros((h + 2 * pad, (w + 2 * pad) * c), dtype=x.dtype)
    cols = np.empty((n * ho * wo, k * k * c), dtype=x.dtype)
    kc = k * c
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    xp[y + pad, (xx + pad) * c + ch] = x[b, ch, y, xx]
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                base = ox * stride * c
                for i in range(k):
                    src = xp[oy * stride + i]
                    off = i * kc
                    for t in range(kc):
                        cols[row, off + t] = src[base + t]
    return cols


@njit(cache=True)
def _col2im(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.empty((n, c, h, w), dtype=cols.dtype)
    xp = np.empty((h + 2 * pad, (w + 2 * pad) * c), dtype=cols.dtype)
    kc = k * c
    for b in range(n):
        xp[:] = 0
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                base = ox * stride * c
                for i in range(k):
                    dst = xp[oy * stride + i]
                    off = i * kc
                    for t in range(kc):
                        dst[base + t] += cols[row, off + t]
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    out[b, ch, y, xx] = xp[y + pad, (xx + pad) * c + ch]
    return out


def _out_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    ho, wo = _out_hw(x.shape[2], x.shape[3], k, stride, pad)
    return _im2col(np.ascontiguousarray(x), int(k), int(stride), int(pad), ho, wo)


def col2im(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho, wo = _out_hw(h, w, k, stride, pad)
    return _col2im(np.ascontiguousarray(cols), n, c, h, w, int(k), int(stride), int(pad), ho, wo)


@njit(cache=True)
def _bn_forward_train(x, gamma, beta, eps):
    n, c, h, w = x.shape
    m = n * h * w
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(c, dtype=x.dtype)
    var = np.empty(c, dtype=x.dtype)
    inv_std = np.empty(c, dtype=x.dtype)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    s += x[b, ch, y, xx]
        mu = s / m
        ss = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    d = x[b, ch, y, xx] - mu
                    ss += d * d
        v = ss / m
        istd = 1.0 / np.sqrt(v + eps)
        mean[ch] = mu
        var[ch] = v
        inv_std[ch] = istd
        gm = gamma[ch]
        bt = beta[ch]
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    xh = (x[b, ch, y, xx] - mu) * istd
                    xhat[b, ch, y, xx] = xh
                    out[b, ch, y, xx] = xh * gm + bt
    return out, xhat, mean, var, inv_std


@njit(cache=True)
def _bn_backward(g, xhat, gamma, inv_std):
    n, c, h, w = g.shape
    m = n * h * w
    dx = np.empty_like(g)
    dgamma = np.empty(c, dtype=g.dtype)
    dbeta = np.empty(c, dtype=g.dtype)
    for ch in range(c):
        sb = 0.0
        sg = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    gv = g[b, ch, y, xx]
                    sb += gv
                    sg += gv * xhat[b, ch, y, xx]
        dbeta[ch] = sb
        dgamma[ch] = sg
        scale = gamma[ch] * inv_std[ch] / m
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    dx[b, ch, y, xx] = scale * (m * g[b, ch, y, xx] - sb - xhat[b, ch, y, xx] * sg)
    return dx, dgamma, dbeta


def bn_forward_train(x, gamma, beta, eps):
    return _bn_forward_train(np.ascontiguousarray(x), gamma, beta, float(eps))


def bn_backward(g, xhat, gamma, inv_std):
    return _bn_backward(np.ascontiguousarray(g), xhat, gamma, inv_std)


@njit(cache=True)
def _reflect(i, n):
    if i < 0:
        i = -i
    if i > n - 1:
        i = 2 * (n - 1) - i
    return i


@njit(cache=True)
def _crop_flip(images, origins, flips, pad):
    n, c, h, w = images.shape
    out = np.empty_like(images)
    for b in range(n):
        oy = origins[b, 0] - pad
        ox = origins[b, 1] - pad
        flip = flips[b]
        for ch in range(c):
            for y in range(h):
                sy = _reflect(y + oy, h)
                for xx in range(w):
                    dx = w - 1 - xx if flip else xx
                    out[b, ch, y, xx] = images[b, ch, sy, _reflect(dx + ox, w)]
    return out


def crop_flip(images, origins, flips, pad):
    return _crop_flip(np.ascontiguousarray(images), np.asarray(origins, dtype=np.int64),
                      np.asarray(flips, dtype=np.bool_), int(pad))
