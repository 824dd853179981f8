"""Layer primitives with forward and backward rules.

Each op takes tensors plus a parameter record and returns a tensor whose
tape node carries the backward rule. Convolution is im2col + matmul;
the naive sliding-window loop lives in :mod:`wrn.verify` as its oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, DegenerateError, ShapeError
from .tensor import Tensor, as_dtype, grad_enabled, record

# target size of one unfolded chunk; small enough to stay cache-resident
CHUNK_BYTES = 768 << 10
# per-layer limit on unfolded input kept alive between forward and backward
SAVE_COLS_BYTES = 96 << 20


def _chunk(per_sample: int) -> int:
    return max(1, int(round(CHUNK_BYTES / max(per_sample, 1))))


@dataclass
class Conv2dParams:
    weight: Tensor
    stride: int = 1
    padding: int = 0
    bias: Optional[Tensor] = None

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be C_out x C_in x k x k, got {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"only square kernels are supported, got {w.shape[2]}x{w.shape[3]}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride/padding {self.stride}/{self.padding}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match C_out={w.shape[0]}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def out_hw(self, h: int, w: int) -> tuple:
        k = self.kernel
        return ((h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)

    def parameters(self) -> list:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def create(cls, channels: int, precision="single", **kw) -> "BatchNormParams":
        dt = as_dtype(precision)
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dt), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dt), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
            **kw,
        )

    def parameters(self) -> list:
        return [self.gamma, self.beta]


@dataclass
class DropoutState:
    """Inverted dropout. The mask stream is a numpy Generator seeded by ``rng_seed``."""

    p: float
    rng_seed: int = 0
    training: bool = True
    rng: np.random.Generator = field(init=False, repr=False)
    calls: int = field(default=0, init=False)
    dropped: int = field(default=0, init=False)
    seen: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")
        self.rng = np.random.default_rng(self.rng_seed)

    def reseed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    @property
    def drop_fraction(self) -> float:
        return self.dropped / self.seen if self.seen else 0.0


def conv_init(c_out: int, c_in: int, k: int, rng: np.random.Generator, precision="single") -> np.ndarray:
    std = np.sqrt(2.0 / (k * k * c_out))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(as_dtype(precision))


def linear_init(d_in: int, d_out: int, rng: np.random.Generator, precision="single") -> np.ndarray:
    std = np.sqrt(2.0 / d_in)
    return (rng.standard_normal((d_in, d_out)) * std).astype(as_dtype(precision))


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    w = p.weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects N x C x H x W input, got {x.shape}")
    c_out, c_in, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    s, pad = p.stride, p.padding
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho, wo = p.out_hw(h, wd)
    xd = x.data
    hw = ho * wo
    kkc = k * k * c_in
    # (i, j, c)-ordered weight matrix matching the row layout of kernels.im2col
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kkc, c_out))
    step = _chunk(hw * kkc * xd.itemsize)
    out = np.empty((n, c_out, ho, wo), dtype=xd.dtype)
    # keep the unfolded chunks for backward unless they would be too large
    keep = (grad_enabled() and (x.requires_grad or w.requires_grad)
            and n * hw * kkc * xd.itemsize <= SAVE_COLS_BYTES)
    saved = []
    for a in range(0, n, step):
        b = min(n, a + step)
        cols = kernels.im2col(xd[a:b], k, s, pad)
        if keep:
            saved.append(cols)
        rows = cols @ wt
        out[a:b] = rows.reshape(b - a, ho, wo, c_out).transpose(0, 3, 1, 2)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    def bw(g):
        gwt = np.zeros((kkc, c_out), dtype=g.dtype)
        gx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        for q, a in enumerate(range(0, n, step)):
            b = min(n, a + step)
            gt = np.ascontiguousarray(g[a:b].transpose(0, 2, 3, 1)).reshape((b - a) * hw, c_out)
            cols = saved[q] if saved else kernels.im2col(xd[a:b], k, s, pad)
            gwt += cols.T @ gt
            if gx is not None:
                gx[a:b] = kernels.col2im(gt @ wt.T, (b - a, c_in, h, wd), k, s, pad)
        gw = np.ascontiguousarray(gwt.reshape(k, k, c_in, c_out).transpose(3, 2, 0, 1))
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if p.bias is None else (x, w, p.bias)
    return record("conv2d", out, inputs, bw)


def batchnorm(x: Tensor, p: BatchNormParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects N x {p.gamma.shape[0]} x H x W, got {x.shape}")
    gamma, beta = p.gamma, p.beta
    n, c, h, w = x.shape
    if p.training:
        if n * h * w < 2:
            raise DegenerateError(
                f"batchnorm in train mode needs at least 2 values per channel, got N*H*W={n * h * w}")
        out, xhat, mean, var, inv_std = kernels.bn_forward_train(x.data, gamma.data, beta.data, p.epsilon)
        mom = p.momentum
        p.running_mean *= 1.0 - mom
        p.running_mean += mom * mean.astype(p.running_mean.dtype)
        p.running_var *= 1.0 - mom
        p.running_var += mom * var.astype(p.running_var.dtype)

        def bw(g):
            dx, dgamma, dbeta = kernels.bn_backward(g, xhat, gamma.data, inv_std)
            return (dx if x.requires_grad else None), dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon)).astype(x.dtype)
        xhat = (x.data - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def bw(g):
            dx = g * (gamma.data * inv_std)[None, :, None, None]
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("batchnorm", out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def dropout(x: Tensor, s: DropoutState) -> Tensor:
    if not 0.0 <= s.p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {s.p}")
    if not s.training or s.p == 0.0:
        return x
    keep = s.rng.random(x.shape, dtype=x.dtype) >= x.dtype.type(s.p)
    s.calls += 1
    s.seen += keep.size
    s.dropped += int(keep.size - np.count_nonzero(keep))
    m = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - s.p))
    return record("dropout", x.data * m, (x,), lambda g: (g * m,))


def avgpool(x: Tensor, window: int) -> Tensor:
    """Global average pooling; ``window`` must equal the (square) spatial size."""
    if x.ndim != 4 or x.shape[2] != window or x.shape[3] != window:
        raise ShapeError(f"avgpool window {window} does not cover spatial size {x.shape[2:]}")
    shape = x.shape
    inv = 1.0 / (window * window)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record("avgpool", out, (x,), lambda g: (np.broadcast_to(g * g.dtype.type(inv), shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as D x K."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return record("linear", out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    out += bias.data[None, :]
    return record("linear", out, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1)
    rows = np.arange(n)
    loss = np.array([(np.log(se) - z[rows, labels]).mean()], dtype=logits.dtype)

    def bw(g):
        d = ez / se[:, None]
        d[rows, labels] -= 1.0
        return (d * (g[0] / n),)

    return record("softmax_cross_entropy", loss, (logits,), bw)
