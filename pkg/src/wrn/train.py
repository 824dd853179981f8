"""Optimiser, schedules, the training loop, evaluation and run aggregation."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from .arch import Graph
from .errors import ConfigError, DivergenceError, ShapeError
from .layers import softmax_cross_entropy
from .tensor import Tensor, as_dtype, backward, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_err", "test_err", "seconds")


@dataclass
class TrainConfig:
    lr0: float = 0.1
    schedule: tuple = ((60, 0.2), (120, 0.2), (160, 0.2))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 200
    dropout_p: float = 0.0
    seed: int = 0
    nesterov: bool = True
    decay_bn: bool = True
    augment: bool = True
    preprocess: str = "zca"
    zca_epsilon: float = 0.1
    zca_samples: Optional[int] = 10_000
    deterministic: bool = False
    precision: str = "single"

    def __post_init__(self):
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"schedule epochs must be strictly increasing, got {epochs}")
        if epochs and (epochs[0] < 0 or epochs[-1] >= self.epochs):
            raise ConfigError(f"schedule epochs must lie in [0, {self.epochs}), got {epochs}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout_p}")
        if self.preprocess not in ("meanstd", "zca", "none"):
            raise ConfigError(f"unknown preprocessing {self.preprocess!r}")
        as_dtype(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(x) for x in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# published recipes; "synth" is the desk-scale stand-in (constant lr)
PRESETS = {
    "cifar10": dict(lr0=0.1, schedule=((60, 0.2), (120, 0.2), (160, 0.2)), epochs=200, batch_size=128,
                    weight_decay=5e-4, momentum=0.9, preprocess="zca", augment=True),
    "cifar100": dict(lr0=0.1, schedule=((60, 0.2), (120, 0.2), (160, 0.2)), epochs=200, batch_size=128,
                     weight_decay=5e-4, momentum=0.9, preprocess="zca", augment=True),
    "svhn": dict(lr0=0.01, schedule=((80, 0.1), (120, 0.1)), epochs=160, batch_size=128,
                 weight_decay=5e-4, momentum=0.9, preprocess="none", augment=False),
    "synth": dict(lr0=0.1, schedule=(), epochs=30, batch_size=128, weight_decay=5e-4, momentum=0.9,
                  preprocess="meanstd", augment=True, deterministic=True),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """lr0 times every multiplier whose drop epoch is <= ``epoch``.

    The product is formed in decimal so that e.g. 0.1 * 0.2 gives the double
    nearest 0.02 rather than 0.020000000000000004.
    """
    lr = Decimal(repr(float(cfg.lr0)))
    for e, m in cfg.schedule:
        if e <= epoch:
            lr *= Decimal(repr(float(m)))
    return float(lr)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    velocity: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float,
             momentum: float, wd: float, nesterov: bool = True, decay: Optional[Sequence[bool]] = None) -> None:
    """In-place SGD with (Nesterov) momentum, dampening 0, L2 decay folded into the gradient."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.velocity)} velocity buffers")
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if g is None:
            raise ShapeError(f"missing gradient for parameter {p.name or i}")
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"parameter {p.name or i}: shape {p.shape}, grad {g.shape}, velocity {v.shape}")
        t = p.dtype.type
        d = g
        if wd and (decay is None or decay[i]):
            d = g + t(wd) * p.data
        v *= t(momentum)
        v += d
        if nesterov:
            p.data -= t(lr) * (d + t(momentum) * v)
        else:
            p.data -= t(lr) * v


# ---------------------------------------------------------------------------
# evaluation


def error_rate(logits: np.ndarray, labels) -> float:
    """Percent misclassified under argmax; ties go to the smallest class index."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    pred = np.argmax(logits, axis=1)
    return 100.0 * float(np.count_nonzero(pred != labels)) / labels.size


def predict(graph: Graph, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    was_training = graph.training
    graph.eval()
    out = []
    try:
        with no_grad():
            for s in range(0, images.shape[0], batch_size):
                x = Tensor(images[s:s + batch_size], dtype=graph.precision)
                out.append(graph(x).data)
    finally:
        graph.set_mode(was_training)
    return np.concatenate(out) if out else np.zeros((0, graph.config.num_classes))


def evaluate(graph: Graph, ds: D.Dataset, batch_size: int = 500) -> float:
    return error_rate(predict(graph, ds.images, batch_size), ds.labels)


# ---------------------------------------------------------------------------
# run logs


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    seconds: float

    def row(self) -> list:
        return [str(self.epoch), repr(self.lr), f"{self.train_loss:.6f}", f"{self.train_err:.4f}",
                f"{self.test_err:.4f}", f"{self.seconds:.3f}"]


@dataclass
class RunLog:
    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    dropout_activity: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in self.records:
            wr.writerow(r.row())
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        header = {}
        body = []
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                header[k] = v
            elif line:
                body.append(line)
        recs = []
        for row in list(csv.reader(body))[1:]:
            recs.append(EpochRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                    float(row[4]), float(row[5])))
        return cls(header, recs)

    def final(self) -> EpochRecord:
        return self.records[-1]


def median_of_runs(logs: Sequence) -> dict:
    """Per-metric median of final-epoch values (mean of the middle two for even counts).

    Accepts :class:`RunLog` objects or plain numbers (one final value per run).
    """
    if not logs:
        raise ConfigError("median_of_runs needs at least one run")
    if all(isinstance(x, (int, float)) for x in logs):
        return {"value": float(statistics.median(logs))}
    lengths = {len(r.records) for r in logs}
    if len(lengths) != 1:
        raise ConfigError(f"runs have different epoch counts: {sorted(lengths)}")
    out = {}
    for name in ("train_loss", "train_err", "test_err"):
        out[name] = float(statistics.median(getattr(r.final(), name) for r in logs))
    return out


# ---------------------------------------------------------------------------
# loop


def train_step(graph: Graph, x: np.ndarray, y: np.ndarray, state: OptimState, lr: float,
               cfg: TrainConfig, params: list, decay: list) -> float:
    graph.zero_grad()
    logits = graph(Tensor(x, dtype=cfg.precision))
    loss = softmax_cross_entropy(logits, y)
    lv = loss.item()
    if not math.isfinite(lv):
        return lv
    backward(loss)
    sgd_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay,
             cfg.nesterov, decay)
    return lv


def train_loop(graph: Graph, train: D.Dataset, test: Optional[D.Dataset], cfg: TrainConfig, *,
               run_log: Optional[RunLog] = None, state: Optional[OptimState] = None, start_epoch: int = 0,
               on_epoch: Optional[Callable] = None, stop_epoch: Optional[int] = None) -> RunLog:
    """Train ``graph`` in place from ``start_epoch`` up to ``cfg.epochs`` (or ``stop_epoch``).

    Per batch the generator keys are (seed, stream, epoch, batch), so a run
    resumed from an epoch-boundary checkpoint replays the same draws as an
    uninterrupted one. ``on_epoch(epoch, graph, state, run_log)`` fires
    after each epoch's evaluation.
    """
    if tuple(train.images.shape[1:]) != graph.input_shape:
        raise ShapeError(f"data shape {train.images.shape[1:]} does not match network input {graph.input_shape}")
    params = graph.parameters()
    names = list(graph.named_parameters())
    decay = [cfg.decay_bn or not graph.is_bn_param(n) for n in names]
    state = state or OptimState.zeros_like(params)
    run_log = run_log or RunLog()
    policy = D.AugmentPolicy(enabled=cfg.augment)
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        graph.train()
        order = D.epoch_order(len(train), cfg.seed, epoch)
        total, seen = 0.0, 0
        for d in graph.drops:
            d.seen = d.dropped = 0
        for b, idx in D.batches(order, cfg.batch_size):
            x = train.images[idx]
            if cfg.augment:
                x = D.augment(x, policy, D.rng_for(cfg.seed, D.AUGMENT, epoch, b))
            for i, d in enumerate(graph.drops):
                d.reseed([cfg.seed, D.DROPOUT, epoch, b, i])
            lv = train_step(graph, x, train.labels[idx], state, lr, cfg, params, decay)
            if not math.isfinite(lv):
                raise DivergenceError(epoch, b, lv)
            total += lv * len(idx)
            seen += len(idx)
        if graph.drops:
            dropped = sum(d.dropped for d in graph.drops)
            seen_el = sum(d.seen for d in graph.drops)
            run_log.dropout_activity.append(dropped / seen_el if seen_el else 0.0)
        train_err = evaluate(graph, train)
        test_err = evaluate(graph, test) if test is not None and len(test) else float("nan")
        secs = 0.0 if cfg.deterministic else time.perf_counter() - t0
        rec = EpochRecord(epoch, lr, total / max(seen, 1), train_err, test_err, secs)
        run_log.records.append(rec)
        log.info("epoch %d lr %g loss %.4f train_err %.2f test_err %.2f (%.1fs)", epoch, lr,
                 rec.train_loss, train_err, test_err, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, graph, state, run_log)
    graph.eval()
    return run_log
