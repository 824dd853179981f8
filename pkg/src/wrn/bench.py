"""Forward and forward+backward timing per minibatch, with analytic counts alongside."""
from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import arch, kernels
from .errors import ConfigError, WRNError
from .layers import softmax_cross_entropy
from .tensor import Tensor, backward, no_grad
from .train import OptimState, sgd_step

CSV_COLUMNS = ("notation", "params", "macs", "fwd_ms", "fwd_bwd_ms", "host")


@dataclass
class BenchSpec:
    configs: list  # NetConfig objects or notation strings
    batch_size: int = 32
    warmup_iters: int = 3
    timed_iters: int = 10
    input_shape: tuple = (3, 32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.timed_iters < 3:
            raise ConfigError(f"timed_iters must be at least 3, got {self.timed_iters}")
        if self.warmup_iters < 0 or self.batch_size < 1:
            raise ConfigError("warmup_iters must be >= 0 and batch_size >= 1")
        if len(self.input_shape) != 3 or self.input_shape[1] != self.input_shape[2]:
            raise ConfigError(f"input shape must be C x H x H, got {self.input_shape}")


@dataclass
class BenchRow:
    notation: str
    params: Optional[int] = None
    macs: Optional[int] = None
    fwd_ms: Optional[float] = None
    fwd_bwd_ms: Optional[float] = None
    host: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def time_median(fn: Callable[[], object], warmup: int, iters: int, *, clock=time.perf_counter,
                hook: Optional[Callable[[int], None]] = None) -> tuple:
    """Run ``fn`` ``warmup`` times untimed, then ``iters`` timed runs.

    Returns (median ms, list of per-iteration ms). ``hook(i)`` runs inside the
    timed window of iteration ``i``; tests use it to inject delays.
    """
    for _ in range(warmup):
        fn()
    times = []
    for i in range(iters):
        t0 = clock()
        fn()
        if hook is not None:
            hook(i)
        times.append((clock() - t0) * 1e3)
    return statistics.median(times), times


_fingerprint_cache: dict = {}


def host_fingerprint(probe_n: int = 512) -> str:
    """Logical cores, thread cap, kernel backend and an sgemm throughput probe."""
    if probe_n in _fingerprint_cache:
        return _fingerprint_cache[probe_n]
    rng = np.random.default_rng(0)
    a = rng.standard_normal((probe_n, probe_n)).astype(np.float32)
    b = rng.standard_normal((probe_n, probe_n)).astype(np.float32)
    ms, _ = time_median(lambda: a @ b, 2, 5)
    gflops = 2.0 * probe_n ** 3 / (ms * 1e6)
    threads = os.environ.get("WRN_THREADS", "default")
    fp = f"cores={os.cpu_count()};threads={threads};backend={kernels.BACKEND};sgemm{probe_n}={gflops:.1f}GF"
    _fingerprint_cache[probe_n] = fp
    return fp


def _bench_one(cfg, spec: BenchSpec, host: str) -> BenchRow:
    label = cfg if isinstance(cfg, str) else cfg.notation
    try:
        if isinstance(cfg, str):
            cfg = arch.parse_notation(cfg)
        c, hw, _ = spec.input_shape
        if c != 3:
            raise ConfigError(f"networks take 3-channel input, got {c}")
        g = arch.build(cfg, seed=spec.seed, input_hw=hw)
        params = arch.param_count(g)
        macs = arch.mac_count(g, hw)
        rng = np.random.default_rng(spec.seed)
        x = rng.standard_normal((spec.batch_size,) + tuple(spec.input_shape)).astype(np.float32)
        y = rng.integers(0, cfg.num_classes, spec.batch_size)
        plist = g.parameters()
        state = OptimState.zeros_like(plist)
        g.train()

        def fwd():
            with no_grad():
                g(Tensor(x))

        def fwd_bwd():
            g.zero_grad()
            loss = softmax_cross_entropy(g(Tensor(x)), y)
            backward(loss)
            sgd_step(plist, [p.grad for p in plist], state, 1e-3, 0.9, 5e-4)

        f_ms, _ = time_median(fwd, spec.warmup_iters, spec.timed_iters)
        fb_ms, _ = time_median(fwd_bwd, spec.warmup_iters, spec.timed_iters)
        return BenchRow(cfg.notation, params, macs, f_ms, fb_ms, host)
    except (WRNError, MemoryError, ValueError) as e:
        return BenchRow(label, host=host, error=f"{type(e).__name__}: {e}")


def run_bench(spec: BenchSpec, host: Optional[str] = None) -> list:
    """One row per config in order; a config that fails becomes an error row."""
    host = host if host is not None else host_fingerprint()
    return [_bench_one(cfg, spec, host) for cfg in spec.configs]


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.3f}"


def emit_csv(rows: Sequence[BenchRow], path) -> None:
    if not rows:
        raise ConfigError("emit_csv needs at least one row")
    with_err = any(r.error for r in rows)
    cols = CSV_COLUMNS + (("error",) if with_err else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            line = [r.notation, "" if r.params is None else r.params, "" if r.macs is None else r.macs,
                    _fmt(r.fwd_ms), _fmt(r.fwd_bwd_ms), r.host]
            if with_err:
                line.append(r.error)
            wr.writerow(line)


def read_rows(path) -> list:
    """Any header-first CSV (bench output, describe --csv) as a list of dicts."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_csv(path) -> list:
    rows = []
    for d in read_rows(path):
        num = lambda k, f: f(d[k]) if d.get(k) else None  # noqa: E731
        rows.append(BenchRow(d["notation"], num("params", int), num("macs", int), num("fwd_ms", float),
                             num("fwd_bwd_ms", float), d.get("host", ""), d.get("error") or ""))
    return rows


# ---------------------------------------------------------------------------
# kernel backends side by side

KERNEL_CASES = {
    "im2col": [(32, 16, 32, 3, 1, 1), (32, 32, 16, 3, 1, 1), (32, 64, 8, 3, 1, 1), (32, 32, 32, 3, 2, 1)],
    "col2im": [(32, 16, 32, 3, 1, 1), (32, 64, 8, 3, 1, 1)],
    "bn_forward_train": [(32, 16, 32), (32, 64, 8)],
    "bn_backward": [(32, 16, 32), (32, 64, 8)],
    "crop_flip": [(128, 3, 32)],
}


@dataclass
class KernelRow:
    kernel: str
    shape: str
    times: dict = field(default_factory=dict)  # backend -> median ms


def compare_backends(warmup: int = 2, iters: int = 5, backends: Optional[dict] = None) -> list:
    """Median time of every hot kernel under each available backend, on the same inputs."""
    backends = backends or kernels.backends()
    rng = np.random.default_rng(0)
    out = []
    for name, cases in KERNEL_CASES.items():
        for case in cases:
            if name in ("im2col", "col2im"):
                n, c, h, k, s, p = case
                x = rng.standard_normal((n, c, h, h)).astype(np.float32)
                cols = kernels.numpy_backend.im2col(x, k, s, p)
                calls = {b: (lambda m=m: m.im2col(x, k, s, p)) if name == "im2col"
                         else (lambda m=m: m.col2im(cols, x.shape, k, s, p)) for b, m in backends.items()}
                label = f"{n}x{c}x{h}x{h} k{k} s{s}"
            elif name.startswith("bn"):
                n, c, h = case
                x = rng.standard_normal((n, c, h, h)).astype(np.float32)
                gam = np.ones(c, np.float32)
                bet = np.zeros(c, np.float32)
                _, xhat, _, _, istd = kernels.numpy_backend.bn_forward_train(x, gam, bet, 1e-5)
                if name == "bn_forward_train":
                    calls = {b: (lambda m=m: m.bn_forward_train(x, gam, bet, 1e-5)) for b, m in backends.items()}
                else:
                    calls = {b: (lambda m=m: m.bn_backward(x, xhat, gam, istd)) for b, m in backends.items()}
                label = f"{n}x{c}x{h}x{h}"
            else:
                n, c, h = case
                x = rng.standard_normal((n, c, h, h)).astype(np.float32)
                org = rng.integers(0, 9, (n, 2))
                flp = rng.random(n) < 0.5
                calls = {b: (lambda m=m: m.crop_flip(x, org, flp, 4)) for b, m in backends.items()}
                label = f"{n}x{c}x{h}x{h}"
            row = KernelRow(name, label)
            for b, fn in calls.items():
                row.times[b], _ = time_median(fn, warmup, iters)
            out.append(row)
    return out


def format_backend_table(rows: Sequence[KernelRow]) -> str:
    names = sorted({b for r in rows for b in r.times})
    lines = [f"{'kernel':<18}{'shape':<24}" + "".join(f"{b + ' ms':>12}" for b in names)]
    for r in rows:
        lines.append(f"{r.kernel:<18}{r.shape:<24}" + "".join(f"{r.times.get(b, float('nan')):>12.3f}" for b in names))
    return "\n".join(lines)
