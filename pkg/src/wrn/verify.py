"""Finite-difference gradient checks and independent oracles.

Every check builds a small double-precision problem, reduces the output to a
scalar with a fixed random projection ``sum(out * R)``, and compares the tape
gradient against central differences on a random sample of entries. The
error reported per tensor is ``|a - n| / (|a| + |n|)`` in the 2-norm over the
sampled entries, which stays meaningful when individual entries are near zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import arch, kernels
from . import layers as L
from . import tensor as T
from .tensor import Tensor, backward, no_grad

LAYER_TOL = 1e-5
NET_TOL = 1e-4
ORACLE_TOL = 1e-10


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0,
                 bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Direct sliding-window convolution (cross-correlation) in float64."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    assert ci == c
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ch, y * stride + i, z * stride + j] * w[o, ch, i, j]
                    out[b, o, y, z] = acc
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    den = np.linalg.norm(a) + np.linalg.norm(n)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / den)


def gradcheck(fn: Callable[[dict], Tensor], inputs: dict, rng: np.random.Generator, samples: int = 12,
              eps: float = 1e-6, before: Optional[Callable[[], None]] = None) -> dict:
    """Tape gradient vs central differences for every tensor in ``inputs``.

    ``fn(inputs)`` must be a pure function of the input data (``before`` runs
    ahead of every evaluation, e.g. to reseed dropout masks). Returns
    {name: relative error}.
    """
    if before:
        before()
    out = fn(inputs)
    proj = rng.standard_normal(out.shape)
    for t in inputs.values():
        t.grad = None
    backward(T.sum(T.mul(out, Tensor(proj))))

    def value() -> float:
        if before:
            before()
        with no_grad():
            return float((fn(inputs).data * proj).sum())

    errs = {}
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        num = np.empty(len(picks))
        for q, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num[q] = (up - down) / (2 * eps)
        ana = t.grad.reshape(-1)[picks]
        errs[name] = rel_error(ana, num)
    return errs


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# each case: name -> builder(rng) -> (fn, inputs, before)

def _op_cases():
    def binop(f):
        def make(rng):
            return (lambda d: f(d["a"], d["b"])), {"a": _t(rng, 3, 4), "b": _t(rng, 3, 4)}, None
        return make

    def unop(f, shape=(3, 4)):
        def make(rng):
            return (lambda d: f(d["a"])), {"a": _t(rng, *shape)}, None
        return make

    def mm(rng):
        return (lambda d: T.matmul(d["a"], d["b"])), {"a": _t(rng, 3, 5), "b": _t(rng, 5, 2)}, None

    return {
        "add": binop(T.add),
        "mul": binop(T.mul),
        "scale": unop(lambda a: T.scale(a, -1.7)),
        "matmul": mm,
        "sum": unop(T.sum),
        "mean_over": unop(lambda a: T.mean_over(a, (0, 2)), (2, 3, 4)),
        "reshape": unop(lambda a: T.reshape(a, (4, 3))),
    }


def _layer_cases():
    def conv(k, stride, pad, bias):
        def make(rng):
            d = {"x": _t(rng, 2, 3, 6, 6), "w": _t(rng, 4, 3, k, k, scale=0.5)}
            if bias:
                d["b"] = _t(rng, 4)
            return (lambda d: L.conv2d(d["x"], L.Conv2dParams(d["w"], stride, pad, d.get("b")))), d, None
        return make

    def bn(training):
        def make(rng):
            p = L.BatchNormParams.create(3, "double", training=training)
            p.running_mean[:] = rng.standard_normal(3)
            p.running_var[:] = rng.random(3) + 0.5
            d = {"x": _t(rng, 4, 3, 3, 3), "gamma": _t(rng, 3), "beta": _t(rng, 3)}

            def fn(d):
                p.gamma, p.beta = d["gamma"], d["beta"]
                return L.batchnorm(d["x"], p)
            return fn, d, None
        return make

    def drop(rng):
        s = L.DropoutState(0.3, training=True)
        return (lambda d: L.dropout(d["x"], s)), {"x": _t(rng, 4, 5)}, (lambda: s.reseed(1234))

    def lin(rng):
        d = {"x": _t(rng, 3, 5), "w": _t(rng, 5, 4), "b": _t(rng, 4)}
        return (lambda d: L.linear(d["x"], d["w"], d["b"])), d, None

    def ce(rng):
        labels = rng.integers(0, 5, 4)
        return (lambda d: L.softmax_cross_entropy(d["z"], labels)), {"z": _t(rng, 4, 5, scale=3.0)}, None

    return {
        "conv2d 3x3 s1 p1": conv(3, 1, 1, False),
        "conv2d 3x3 s2 p1 +bias": conv(3, 2, 1, True),
        "conv2d 1x1 s2": conv(1, 2, 0, False),
        "conv2d 3x3 s1 p0": conv(3, 1, 0, True),
        "batchnorm train": bn(True),
        "batchnorm eval": bn(False),
        "relu": lambda rng: ((lambda d: L.relu(d["x"])), {"x": _t(rng, 3, 7)}, None),
        "dropout": drop,
        "avgpool": lambda rng: ((lambda d: L.avgpool(d["x"], 4)), {"x": _t(rng, 2, 3, 4, 4)}, None),
        "linear": lin,
        "softmax_cross_entropy": ce,
    }


def _net_case(notation: str = "WRN-10-1", batch: int = 4, input_hw: int = 16, dropout_p: float = 0.3,
              samples_per_param: int = 2):
    def make(rng):
        seed = int(rng.integers(2 ** 31))
        g = arch.build(arch.parse_notation(notation, dropout_p=dropout_p), seed=seed, precision="double",
                       input_hw=input_hw).train()
        x = rng.standard_normal((batch, 3, input_hw, input_hw))
        y = rng.integers(0, g.config.num_classes, batch)
        d = dict(g.named_parameters())

        def reseed():
            for i, s in enumerate(g.drops):
                s.reseed([seed, i])

        return (lambda d: L.softmax_cross_entropy(g(Tensor(x)), y)), d, reseed
    return make


@dataclass
class CheckResult:
    group: str
    name: str
    error: float
    tol: float
    seeds: int
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


@dataclass
class Report:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def groups(self) -> dict:
        out: dict = {}
        for r in self.results:
            out.setdefault(r.group, []).append(r)
        return out

    def table(self) -> str:
        lines = [f"{'group':<12}{'check':<28}{'max err':>12}{'tol':>10}{'seeds':>7}  result"]
        for r in self.results:
            lines.append(f"{r.group:<12}{r.name:<28}{r.error:>12.3e}{r.tol:>10.0e}{r.seeds:>7}  "
                         f"{'pass' if r.ok else 'FAIL'}")
        lines.append("")
        for gname, rs in self.groups().items():
            lines.append(f"{gname}: {'pass' if all(r.ok for r in rs) else 'FAIL'} ({len(rs)} checks)")
        return "\n".join(lines)


def _run_cases(group: str, cases: dict, seeds: int, tol: float, samples: int, rep: Report) -> None:
    for name, make in cases.items():
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 7])
            fn, inputs, before = make(rng)
            errs = gradcheck(fn, inputs, rng, samples=samples, before=before)
            worst = max([worst] + list(errs.values()))
        rep.results.append(CheckResult(group, name, worst, tol, seeds, time.perf_counter() - t0))


def check_conv_oracle(seeds: int = 5) -> float:
    """Max |im2col conv - naive conv| over random shapes, strides and paddings."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 11])
        k = int(rng.choice([1, 3]))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2)) if k == 3 else 0
        x = rng.standard_normal((2, int(rng.integers(1, 4)), int(rng.integers(4, 8)), int(rng.integers(4, 8))))
        w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k))
        b = rng.standard_normal(w.shape[0])
        got = L.conv2d(Tensor(x), L.Conv2dParams(Tensor(w), s, p, Tensor(b))).data
        worst = max(worst, float(np.abs(got - naive_conv2d(x, w, s, p, b)).max()))
    return worst


def check_backends(seeds: int = 3) -> float:
    """Max relative disagreement between the kernel backends on identical inputs."""
    bk = kernels.backends()
    if len(bk) < 2:
        return 0.0
    ref = bk["numpy"]
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 13])
        x = rng.standard_normal((3, 4, 7, 7))
        gam = rng.standard_normal(4)
        bet = rng.standard_normal(4)
        org = rng.integers(0, 9, (3, 2))
        flp = rng.random(3) < 0.5
        for name, m in bk.items():
            if m is ref:
                continue
            pairs = [(m.im2col(x, 3, 2, 1), ref.im2col(x, 3, 2, 1)),
                     (m.col2im(ref.im2col(x, 3, 1, 1), x.shape, 3, 1, 1),
                      ref.col2im(ref.im2col(x, 3, 1, 1), x.shape, 3, 1, 1)),
                     (m.crop_flip(x, org, flp, 4), ref.crop_flip(x, org, flp, 4))]
            a = m.bn_forward_train(x, gam, bet, 1e-5)
            r = ref.bn_forward_train(x, gam, bet, 1e-5)
            pairs += list(zip(a, r))
            pairs += list(zip(m.bn_backward(x, r[1], gam, r[4]), ref.bn_backward(x, r[1], gam, r[4])))
            for u, v in pairs:
                worst = max(worst, rel_error(u, v))
    return worst


def check_depth_grammar() -> float:
    """Count of (l, N) combinations that fail to round-trip or shape-check (0 is a pass)."""
    bad = 0
    for l in range(1, 5):  # noqa: E741
        for n_blocks in range(1, 7):
            n = 3 * l * n_blocks + 4
            text = f"WRN-{n}-1-B({','.join(['3'] * l)})"
            cfg = arch.parse_notation(text)
            g = arch.build(cfg, materialize=False)
            again = arch.parse_notation(arch.render_notation(cfg))
            if again != cfg or again.blocks_per_group != n_blocks or not arch.check_shapes(g):
                bad += 1
    return float(bad)


def run(quick: bool = False) -> Report:
    """All suites; ``quick`` uses fewer seeds but keeps every double-precision check."""
    seeds = 3 if quick else 20
    net_seeds = 2 if quick else 20
    rep = Report()
    _run_cases("ops", _op_cases(), seeds, LAYER_TOL, 12, rep)
    _run_cases("layers", _layer_cases(), seeds, LAYER_TOL, 12, rep)
    _run_cases("network", {"WRN-10-1 end-to-end": _net_case()}, net_seeds, NET_TOL, 2, rep)
    t0 = time.perf_counter()
    rep.results.append(CheckResult("oracles", "conv2d vs naive loop", check_conv_oracle(3 if quick else 10),
                                   ORACLE_TOL, 3 if quick else 10, time.perf_counter() - t0))
    t0 = time.perf_counter()
    rep.results.append(CheckResult("oracles", "kernel backends agree", check_backends(), 1e-6, 3,
                                   time.perf_counter() - t0))
    t0 = time.perf_counter()
    rep.results.append(CheckResult("arch", "depth grammar round-trip", check_depth_grammar(), 0.5, 1,
                                   time.perf_counter() - t0))
    return rep
