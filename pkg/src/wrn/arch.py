"""WRN-n-k architecture grammar, graph construction and analytic accounting.

A network is ``conv1`` (3->16, 3x3), three groups of N residual blocks at
widths 16k/32k/64k (the first block of groups 3 and 4 downsamples by
stride 2), a final BN-ReLU, global 8x8 average pooling and a linear
classifier. Blocks are pre-activation: each convolution is preceded by
BN -> ReLU, and dropout sits after every in-block ReLU except the first.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNormParams, Conv2dParams, DropoutState, avgpool, batchnorm, conv2d,
                     conv_init, dropout, linear, linear_init, relu)
from .tensor import Tensor, add, as_dtype, reshape

BASE_WIDTHS = (16, 16, 32, 64)
DEPTH_CONVENTIONS = ("layers", "blocks")

# stage block counts of the standard bottleneck ResNets
BOTTLENECK_LAYOUTS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}

_NOTATION = re.compile(
    r"^\s*WRN-(?P<n>\d+)-(?P<k>\d+(?:\.\d+)?)"
    r"(?:-B\((?P<m>\s*\d+(?:\s*,\s*\d+)*\s*)\))?"
    r"(?P<bott>-bottleneck)?\s*$",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class BlockSpec:
    kernels: tuple = (3, 3)
    family: str = "basic"
    dropout_p: float = 0.0
    pre_activation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(m) for m in self.kernels))
        if not self.kernels:
            raise ConfigError("block kernel list M must be non-empty")
        bad = [m for m in self.kernels if m not in (1, 3)]
        if bad:
            raise ConfigError(
                f"kernel sizes must be 1 or 3 (no filters larger than 3x3), got {bad}")
        if self.family not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block family {self.family!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")
        if self.family == "basic" and not self.pre_activation:
            raise ConfigError("basic blocks are always pre-activation")

    @property
    def l(self) -> int:  # noqa: E743 - deepening factor
        return len(self.kernels)


def blocks_per_group(n: int, l: int) -> int:
    """N = (n - 4) / (3 l)."""
    if l < 1:
        raise ConfigError(f"deepening factor must be >= 1, got {l}")
    if n < 4 or (n - 4) % (3 * l) != 0 or n - 4 < 3 * l:
        raise ConfigError(
            f"depth {n} is invalid for l={l}: (n - 4) mod 3l must be 0 with N >= 1, "
            f"but ({n} - 4) mod {3 * l} = {(n - 4) % (3 * l)}")
    return (n - 4) // (3 * l)


@dataclass(frozen=True)
class NetConfig:
    depth: int
    widen: float
    block: BlockSpec = field(default_factory=BlockSpec)
    num_classes: int = 10
    base_widths: tuple = BASE_WIDTHS
    # "layers": n = 3*l*N + 4. "blocks": n = 6*N + 4 whatever l is, i.e. depth
    # names the number of blocks as if they were B(3,3)
    depth_convention: str = "layers"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.depth_convention not in DEPTH_CONVENTIONS:
            raise ConfigError(f"depth_convention must be one of {DEPTH_CONVENTIONS}")
        if self.block.family == "bottleneck":
            if self.depth not in BOTTLENECK_LAYOUTS:
                raise ConfigError(
                    f"unsupported bottleneck depth {self.depth}; supported: {sorted(BOTTLENECK_LAYOUTS)}")
            if self.widen <= 0:
                raise ConfigError(f"inner widening must be positive, got {self.widen}")
            return
        if self.widen < 1 or int(self.widen) != self.widen:
            raise ConfigError(f"widening factor k must be a positive integer, got {self.widen}")
        object.__setattr__(self, "widen", int(self.widen))
        self.blocks_per_group  # validates depth

    @property
    def l(self) -> int:  # noqa: E743
        return self.block.l

    def to_dict(self) -> dict:
        b = self.block
        return {"depth": self.depth, "widen": self.widen, "num_classes": self.num_classes,
                "base_widths": list(self.base_widths), "depth_convention": self.depth_convention,
                "block": {"kernels": list(b.kernels), "family": b.family, "dropout_p": b.dropout_p,
                          "pre_activation": b.pre_activation}}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        try:
            return cls(int(d["depth"]), d["widen"], BlockSpec(**d["block"]), int(d["num_classes"]),
                       tuple(d["base_widths"]), d.get("depth_convention", "layers"))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed network config: {e}") from None

    @property
    def blocks_per_group(self) -> int:
        if self.depth_convention == "blocks":
            return blocks_per_group(self.depth, 2)
        return blocks_per_group(self.depth, self.l)

    @property
    def group_widths(self) -> tuple:
        return tuple(int(b * self.widen) for b in self.base_widths[1:])

    @property
    def notation(self) -> str:
        return render_notation(self)


def _fmt_k(k) -> str:
    return str(int(k)) if float(k) == int(k) else str(k)


def render_notation(cfg: NetConfig) -> str:
    if cfg.block.family == "bottleneck":
        return f"WRN-{cfg.depth}-{_fmt_k(cfg.widen)}-bottleneck"
    base = f"WRN-{cfg.depth}-{_fmt_k(cfg.widen)}"
    if cfg.block.kernels == (3, 3):
        return base
    return f"{base}-B({','.join(map(str, cfg.block.kernels))})"


def parse_notation(text: str, *, num_classes: Optional[int] = None, dropout_p: float = 0.0,
                   bottleneck: bool = False, depth_convention: str = "layers") -> NetConfig:
    """Parse ``WRN-<n>-<k>[-B(m1,m2,...)]``; the block defaults to B(3,3).

    A ``-bottleneck`` suffix (or ``bottleneck=True``) selects the ImageNet
    bottleneck family, where ``k`` is the inner 3x3 widening and may be
    fractional, and the class count defaults to 1000 instead of 10.
    """
    m = _NOTATION.match(text or "")
    if not m:
        raise ConfigError(f"cannot parse {text!r}; expected WRN-<n>-<k>[-B(<m1>,<m2>,...)]")
    n = int(m["n"])
    k = float(m["k"])
    if bottleneck or m["bott"]:
        if m["m"]:
            raise ConfigError("bottleneck networks take no B(M) descriptor")
        block = BlockSpec(kernels=(1, 3, 1), family="bottleneck", pre_activation=False)
        return NetConfig(depth=n, widen=k, block=block, num_classes=num_classes or 1000)
    if k != int(k):
        raise ConfigError(f"widening factor k must be an integer for basic blocks, got {m['k']}")
    kernels = (3, 3) if m["m"] is None else tuple(int(v) for v in m["m"].split(","))
    block = BlockSpec(kernels=kernels, dropout_p=dropout_p)
    return NetConfig(depth=n, widen=int(k), block=block, num_classes=num_classes or 10,
                     depth_convention=depth_convention)


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int = 0
    macs: int = 0


@dataclass(frozen=True)
class ResidualAdd:
    name: str
    residual: tuple
    shortcut: tuple


class _BasicBlock:
    def __init__(self, convs, bns, drops, proj, kernels):
        self.convs = convs
        self.bns = bns
        self.drops = drops
        self.proj = proj
        self.kernels = kernels

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        preact = None
        for i, (bn, cv) in enumerate(zip(self.bns, self.convs)):
            h = relu(batchnorm(h, bn))
            if i == 0:
                preact = h
            elif self.drops[i] is not None:
                h = dropout(h, self.drops[i])
            h = conv2d(h, cv)
        shortcut = x if self.proj is None else conv2d(preact, self.proj)
        return add(h, shortcut)


class _Net:
    def __init__(self, conv1, blocks, bn_final, fc_w, fc_b, pool):
        self.conv1 = conv1
        self.blocks = blocks
        self.bn_final = bn_final
        self.fc_w = fc_w
        self.fc_b = fc_b
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        h = conv2d(x, self.conv1)
        for b in self.blocks:
            h = b(h)
        h = relu(batchnorm(h, self.bn_final))
        h = avgpool(h, self.pool)
        h = reshape(h, (h.shape[0], h.shape[1]))
        return linear(h, self.fc_w, self.fc_b)


class Graph:
    """Shape-inferred layer list, residual joins and (optionally) executable parameters."""

    def __init__(self, config: NetConfig, input_shape: tuple, layers: list, adds: list,
                 net: Optional[_Net] = None, params: Optional[dict] = None,
                 bns: Optional[dict] = None, drops: Optional[list] = None, precision="single"):
        self.config = config
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.adds = list(adds)
        self.net = net
        self.params = params or {}
        self.bns = bns or {}
        self.drops = drops or []
        self.precision = precision
        self.training = True

    @property
    def materialized(self) -> bool:
        return self.net is not None

    def forward(self, x: Tensor) -> Tensor:
        if self.net is None:
            raise ConfigError(f"{self.config.notation} was built for analysis only (materialize=False)")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects inputs of shape N x {self.input_shape}, got {x.shape}")
        return self.net(x)

    __call__ = forward

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> dict:
        return dict(self.params)

    def buffers(self) -> dict:
        out = {}
        for name, bn in self.bns.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def is_bn_param(self, name: str) -> bool:
        return name.endswith(".gamma") or name.endswith(".beta")

    def set_mode(self, training: bool) -> "Graph":
        self.training = training
        for bn in self.bns.values():
            bn.training = training
        for d in self.drops:
            d.training = training
        return self

    def train(self) -> "Graph":
        return self.set_mode(True)

    def eval(self) -> "Graph":
        return self.set_mode(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class _Builder:
    def __init__(self, materialize: bool, rng, precision):
        self.materialize = materialize
        self.rng = rng
        self.precision = precision
        self.layers = []
        self.adds = []
        self.params = {}
        self.bns = {}
        self.drops = []

    def conv(self, name, shape, c_out, k, stride, pad):
        c, h, w = shape
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{name}: input {shape} too small for kernel {k} stride {stride}")
        out = (c_out, ho, wo)
        self.layers.append(LayerRecord(name, "conv", shape, out, c_out * c * k * k,
                                       ho * wo * c * c_out * k * k))
        p = None
        if self.materialize:
            wt = Tensor(conv_init(c_out, c, k, self.rng, self.precision), requires_grad=True,
                        name=f"{name}.weight")
            self.params[f"{name}.weight"] = wt
            p = Conv2dParams(wt, stride=stride, padding=pad)
        return p, out

    def bn(self, name, shape):
        self.layers.append(LayerRecord(name, "bn", shape, shape, 2 * shape[0], 0))
        if not self.materialize:
            return None
        bn = BatchNormParams.create(shape[0], self.precision)
        bn.gamma.name, bn.beta.name = f"{name}.gamma", f"{name}.beta"
        self.params[f"{name}.gamma"] = bn.gamma
        self.params[f"{name}.beta"] = bn.beta
        self.bns[name] = bn
        return bn

    def simple(self, name, kind, shape, out=None):
        self.layers.append(LayerRecord(name, kind, shape, out or shape, 0, 0))

    def dropout(self, name, shape, p):
        self.simple(name, "dropout", shape)
        if not self.materialize:
            return None
        d = DropoutState(p, rng_seed=len(self.drops))
        self.drops.append(d)
        return d

    def join(self, name, residual, shortcut):
        if residual != shortcut:
            raise ShapeError(f"{name}: residual {residual} and shortcut {shortcut} differ")
        self.adds.append(ResidualAdd(name, residual, shortcut))
        self.simple(name, "add", residual)

    def linear(self, name, d_in, d_out):
        self.layers.append(LayerRecord(name, "linear", (d_in,), (d_out,), d_in * d_out + d_out, d_in * d_out))
        if not self.materialize:
            return None, None
        w = Tensor(linear_init(d_in, d_out, self.rng, self.precision), requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(d_out, dtype=as_dtype(self.precision)), requires_grad=True, name=f"{name}.bias")
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b
        return w, b


def build(cfg: NetConfig, *, materialize: bool = True, seed: int = 0, precision="single",
          input_hw: int = 32) -> Graph:
    """Compile ``cfg`` into a :class:`Graph`.

    With ``materialize=False`` only the shape-inferred records are produced;
    that is what counting and ``describe`` use, and it costs no allocation.
    """
    if cfg.block.family == "bottleneck":
        return build_bottleneck(cfg, cfg.widen, input_hw=224 if input_hw == 32 else input_hw)
    as_dtype(precision)
    rng = np.random.default_rng(seed)
    b = _Builder(materialize, rng, precision)
    shape = (3, input_hw, input_hw)
    conv1, shape = b.conv("conv1", shape, cfg.base_widths[0], 3, 1, 1)
    blocks = []
    N = cfg.blocks_per_group
    for gi, width in enumerate(cfg.group_widths):
        group = f"g{gi + 2}"
        for bi in range(N):
            name = f"{group}.b{bi + 1}"
            stride = 2 if (gi > 0 and bi == 0) else 1
            x_shape = shape
            convs, bns, drops = [], [], []
            h = shape
            preact_shape = None
            for i, m in enumerate(cfg.block.kernels):
                bns.append(b.bn(f"{name}.bn{i + 1}", h))
                b.simple(f"{name}.relu{i + 1}", "relu", h)
                if i == 0:
                    preact_shape = h
                if i > 0 and cfg.block.dropout_p > 0:
                    drops.append(b.dropout(f"{name}.drop{i + 1}", h, cfg.block.dropout_p))
                else:
                    drops.append(None)
                cv, h = b.conv(f"{name}.conv{i + 1}", h, width, m, stride if i == 0 else 1, m // 2)
                convs.append(cv)
            proj = None
            shortcut = x_shape
            if x_shape != h:
                proj, shortcut = b.conv(f"{name}.proj", preact_shape, width, 1, stride, 0)
            b.join(f"{name}.add", h, shortcut)
            blocks.append(_BasicBlock(convs, bns, drops, proj, cfg.block.kernels))
            shape = h
    bn_final = b.bn("bn_final", shape)
    b.simple("relu_final", "relu", shape)
    pool = shape[1]
    if shape[1] != shape[2]:
        raise ShapeError(f"global pooling needs a square map, got {shape}")
    b.simple("avgpool", "avgpool", shape, (shape[0], 1, 1))
    fc_w, fc_b = b.linear("fc", shape[0], cfg.num_classes)
    net = _Net(conv1, blocks, bn_final, fc_w, fc_b, pool) if materialize else None
    return Graph(cfg, (3, input_hw, input_hw), b.layers, b.adds, net, b.params, b.bns, b.drops, precision)


def build_bottleneck(cfg: NetConfig, inner_widen=None, *, input_hw: int = 224) -> Graph:
    """Analysis-only graph of a post-activation bottleneck ResNet with widened inner layers.

    Each block is 1x1 (reduce) -> 3x3 -> 1x1 (expand to 4x planes) with
    BN after every convolution; the two inner convolutions have
    ``planes * inner_widen`` channels. Downsampling sits on the 3x3.
    """
    if inner_widen is None:
        inner_widen = cfg.widen
    if cfg.block.family != "bottleneck":
        cfg = replace(cfg, block=BlockSpec(kernels=(1, 3, 1), family="bottleneck", pre_activation=False),
                      widen=inner_widen)
    if cfg.depth not in BOTTLENECK_LAYOUTS:
        raise ConfigError(f"unsupported bottleneck depth {cfg.depth}; supported: {sorted(BOTTLENECK_LAYOUTS)}")
    widen = Fraction(str(inner_widen))
    b = _Builder(False, None, "single")
    shape = (3, input_hw, input_hw)
    _, shape = b.conv("conv1", shape, 64, 7, 2, 3)
    b.bn("bn1", shape)
    b.simple("relu1", "relu", shape)
    c, h, w = shape
    pooled = (c, (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1)
    b.simple("maxpool", "maxpool", shape, pooled)
    shape = pooled
    for si, (nblocks, planes) in enumerate(zip(BOTTLENECK_LAYOUTS[cfg.depth], (64, 128, 256, 512))):
        inner = int(planes * widen)
        out_c = planes * 4
        for bi in range(nblocks):
            name = f"s{si + 1}.b{bi + 1}"
            stride = 2 if (si > 0 and bi == 0) else 1
            x_shape = shape
            _, h1 = b.conv(f"{name}.conv1", shape, inner, 1, 1, 0)
            b.bn(f"{name}.bn1", h1)
            b.simple(f"{name}.relu1", "relu", h1)
            _, h2 = b.conv(f"{name}.conv2", h1, inner, 3, stride, 1)
            b.bn(f"{name}.bn2", h2)
            b.simple(f"{name}.relu2", "relu", h2)
            _, h3 = b.conv(f"{name}.conv3", h2, out_c, 1, 1, 0)
            b.bn(f"{name}.bn3", h3)
            shortcut = x_shape
            if x_shape != h3:
                _, shortcut = b.conv(f"{name}.proj", x_shape, out_c, 1, stride, 0)
                b.bn(f"{name}.proj_bn", shortcut)
            b.join(f"{name}.add", h3, shortcut)
            b.simple(f"{name}.relu3", "relu", h3)
            shape = h3
    b.simple("avgpool", "avgpool", shape, (shape[0], 1, 1))
    b.linear("fc", shape[0], cfg.num_classes)
    return Graph(cfg, (3, input_hw, input_hw), b.layers, b.adds)


def param_count(g: Graph) -> int:
    return sum(r.params for r in g.layers)


def mac_count(g: Graph, input_hw: Optional[int] = None) -> int:
    if input_hw is not None and input_hw != g.input_shape[1]:
        if g.config.block.family == "bottleneck":
            g = build_bottleneck(g.config, input_hw=input_hw)
        else:
            g = build(g.config, materialize=False, input_hw=input_hw)
    return sum(r.macs for r in g.layers)


def group_param_counts(g: Graph) -> list:
    """Parameters inside each of the three residual groups (g2, g3, g4)."""
    out = []
    for gi in (2, 3, 4):
        out.append(sum(r.params for r in g.layers if r.name.startswith(f"g{gi}.")))
    return out


def check_shapes(g: Graph) -> bool:
    return all(a.residual == a.shortcut for a in g.adds)


# ---------------------------------------------------------------------------
# reporting

CSV_HEADER = ("layer", "kind", "in_shape", "out_shape", "params", "macs")


def _shape_str(s) -> str:
    return "x".join(str(d) for d in s)


@dataclass
class Report:
    notation: str
    rows: list
    total_params: int
    total_macs: int

    def csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in self.rows:
            wr.writerow([r.name, r.kind, _shape_str(r.in_shape), _shape_str(r.out_shape), r.params, r.macs])
        wr.writerow(["total", "", "", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def text(self) -> str:
        name_w = max([len(r.name) for r in self.rows] + [5])
        lines = [self.notation,
                 f"{'layer':<{name_w}}  {'kind':<8} {'in':>12} {'out':>12} {'params':>12} {'MACs':>15}"]
        for r in self.rows:
            lines.append(f"{r.name:<{name_w}}  {r.kind:<8} {_shape_str(r.in_shape):>12} "
                         f"{_shape_str(r.out_shape):>12} {r.params:>12,} {r.macs:>15,}")
        lines.append(f"{'total':<{name_w}}  {'':<8} {'':>12} {'':>12} {self.total_params:>12,} "
                     f"{self.total_macs:>15,}")
        lines.append(f"params: {self.total_params / 1e6:.1f}M  MACs: {self.total_macs / 1e9:.3f}G")
        return "\n".join(lines)


def describe(g: Graph) -> Report:
    return Report(g.config.notation, list(g.layers), param_count(g), mac_count(g))
