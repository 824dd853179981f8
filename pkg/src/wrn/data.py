"""Datasets, preprocessing and augmentation.

Images are kept as float32 numpy arrays of shape (n, 3, 32, 32) with
values in [0, 1] until a :class:`PreprocState` is applied. Every random
draw in the input pipeline comes from a generator keyed on
``(seed, epoch, batch, stream)`` so batch order and augmentation do not
depend on how batches are scheduled.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import DataError, DegenerateError, NumericError

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
IMAGE_BYTES = 3 * 32 * 32

# generator stream tags
SHUFFLE, AUGMENT, DROPOUT, SUBSAMPLE = 0, 1, 2, 3

CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
CIFAR100_TRAIN = ("train.bin",)
CIFAR100_TEST = ("test.bin",)

RAW_MAGIC = b"WRNT"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    class_count: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.class_count)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])


# ---------------------------------------------------------------------------
# ingestion


def _find_dir(root: Path, names) -> Path:
    for cand in (root, *sorted(p for p in root.iterdir() if p.is_dir())) if root.is_dir() else ():
        if all((cand / n).exists() for n in names):
            return cand
    raise DataError(f"{root}: missing CIFAR batch files {list(names)}")


def read_cifar_file(path, variant: str = "c10"):
    """Decode one CIFAR binary batch file into (images, labels)."""
    path = Path(path)
    head = 1 if variant == "c10" else 2
    rec = head + IMAGE_BYTES
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if len(raw) == 0 or len(raw) % rec:
        whole = len(raw) // rec * rec
        raise DataError(f"{path}: truncated record at byte offset {whole} "
                        f"(file has {len(raw)} bytes, records are {rec} bytes)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = buf[:, head - 1].astype(np.int64)  # fine label for CIFAR-100
    images = buf[:, head:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar(directory, variant: str = "c10"):
    """Load (train, test) from the standard binary distribution."""
    if variant not in ("c10", "c100"):
        raise DataError(f"unknown CIFAR variant {variant!r}")
    root = Path(directory)
    train_names, test_names = ((CIFAR10_TRAIN, CIFAR10_TEST) if variant == "c10"
                               else (CIFAR100_TRAIN, CIFAR100_TEST))
    d = _find_dir(root, train_names + test_names)
    classes = 10 if variant == "c10" else 100

    def read(names, split):
        parts = [read_cifar_file(d / n, variant) for n in names]
        return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                       split, classes)

    return read(train_names, "train"), read(test_names, "test")


def save_raw(path, ds: Dataset) -> None:
    """Write the WRNT raw-tensor format (header, u16 labels, f32 images, little-endian)."""
    n = len(ds)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", n, ds.class_count, 0))
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())


def load_raw(path, split: str = "train") -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 16 or raw[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad raw-tensor header at byte offset 0")
    n, classes, _ = struct.unpack_from("<III", raw, 4)
    need = 16 + 2 * n + 4 * n * IMAGE_BYTES
    if len(raw) < need:
        raise DataError(f"{path}: file ends at byte offset {len(raw)}, expected {need} bytes")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=16).astype(np.int64)
    images = np.frombuffer(raw, dtype="<f4", count=n * IMAGE_BYTES, offset=16 + 2 * n)
    return Dataset(images.reshape(n, *IMAGE_SHAPE).astype(np.float32), labels, split, classes)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocState:
    kind: str  # "meanstd", "zca" or "none"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))  # std vector or whitening matrix
    epsilon: float = 0.0

    def arrays(self) -> dict:
        return {"preproc.mean": self.mean, "preproc.scale": self.scale}

    def meta(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon}

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict) -> "PreprocState":
        return cls(meta["kind"], np.asarray(arrays.get("preproc.mean", np.zeros(0)), dtype=np.float64),
                   np.asarray(arrays.get("preproc.scale", np.zeros(0)), dtype=np.float64),
                   float(meta.get("epsilon", 0.0)))


def fit_meanstd(train: Dataset) -> PreprocState:
    x = train.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        raise DegenerateError(f"zero standard deviation in channel(s) {np.flatnonzero(std <= 0).tolist()}")
    return PreprocState("meanstd", mean, std)


def fit_zca(train: Dataset, epsilon: float = 0.1, max_samples: Optional[int] = 10_000,
            seed: int = 0) -> PreprocState:
    """Fit W = U diag((lambda + eps)^-1/2) U^T on flattened, mean-centred training images."""
    x = train.images.reshape(len(train), -1)
    if max_samples is not None and len(train) > max_samples:
        idx = np.sort(rng_for(seed, SUBSAMPLE).choice(len(train), max_samples, replace=False))
        x = x[idx]
    x = x.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    n, d = xc.shape
    try:
        if n < d:
            # fewer samples than dimensions: the covariance has rank < n, so take
            # its eigenvectors from a thin SVD and give the null space eps^-1/2
            if epsilon <= 0:
                raise DegenerateError(f"singular covariance ({n} samples in {d} dimensions); ZCA needs epsilon > 0")
            u, sv, _ = np.linalg.svd(xc.T, full_matrices=False)
            lam = sv ** 2 / n
            w = (u * ((lam + epsilon) ** -0.5 - epsilon ** -0.5)) @ u.T
            w[np.diag_indices(d)] += epsilon ** -0.5
            return PreprocState("zca", mean, w, float(epsilon))
        lam, u = np.linalg.eigh(xc.T @ xc / n)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance eigendecomposition did not converge: {exc}") from exc
    lam = np.clip(lam, 0.0, None)
    if epsilon <= 0 and lam.min() <= 0:
        raise DegenerateError("singular covariance; ZCA needs epsilon > 0")
    w = (u * (lam + epsilon) ** -0.5) @ u.T
    return PreprocState("zca", mean, w, float(epsilon))


def transform(state: PreprocState, images: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Apply a fitted state to an image array; output keeps the input dtype."""
    if state.kind == "none":
        return images.copy()
    if state.kind == "meanstd":
        m = state.mean[None, :, None, None]
        s = state.scale[None, :, None, None]
        return ((images.astype(np.float64) - m) / s).astype(images.dtype)
    if state.kind == "zca":
        n = images.shape[0]
        flat = images.reshape(n, -1)
        out = np.empty_like(flat)
        for i in range(0, n, chunk):
            out[i:i + chunk] = (flat[i:i + chunk].astype(np.float64) - state.mean) @ state.scale
        return out.reshape(images.shape)
    raise DataError(f"unknown preprocessing kind {state.kind!r}")


def apply(state: PreprocState, ds: Dataset) -> Dataset:
    return Dataset(transform(state, ds.images), ds.labels, ds.split, ds.class_count)


def fit(kind: str, train: Dataset, **kw) -> PreprocState:
    if kind == "meanstd":
        return fit_meanstd(train)
    if kind == "zca":
        return fit_zca(train, **kw)
    if kind == "none":
        return PreprocState("none")
    raise DataError(f"unknown preprocessing kind {kind!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5
    fill: str = "reflect"
    enabled: bool = True


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, take a uniformly placed crop of the original size, mirror with ``flip_prob``."""
    if not policy.enabled:
        return images
    n, _, h, w = images.shape
    if policy.crop != h or h != w:
        raise DataError(f"crop {policy.crop} must equal the square input size, got {h}x{w}")
    if policy.fill != "reflect":
        raise DataError(f"unsupported fill {policy.fill!r}")
    origins = rng.integers(0, 2 * policy.pad + 1, size=(n, 2))
    flips = rng.random(n) < policy.flip_prob
    return kernels.crop_flip(images, origins, flips, policy.pad)


# ---------------------------------------------------------------------------
# batching


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return rng_for(seed, SHUFFLE, epoch).permutation(n)


def batches(order: np.ndarray, batch_size: int):
    for b, start in enumerate(range(0, len(order), batch_size)):
        yield b, order[start:start + batch_size]


# ---------------------------------------------------------------------------
# synthetic data


def class_colors(classes: int, radius: float = 0.25) -> np.ndarray:
    """Per-class mean colours on a circle in the plane orthogonal to grey."""
    e1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    e2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
    theta = 2 * np.pi * np.arange(classes) / classes
    return 0.5 + radius * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)


def synth_dataset(n: int, classes: int = 10, seed: int = 0, split: str = "train",
                  noise: float = 0.1, jitter: float = 0.02) -> Dataset:
    """Class-conditional images: a class colour plus a class-placed Gaussian blob plus noise.

    Class geometry depends only on ``classes``; ``seed`` and ``split`` only
    drive the noise and label order. Labels are balanced (counts differ by
    at most one).
    """
    if n < classes:
        raise DataError(f"need n >= classes, got n={n}, classes={classes}")
    split_key = {"train": 0, "test": 1}.get(split, 2)
    rng = rng_for(seed, 100 + split_key)
    labels = rng.permutation(np.arange(n) % classes)
    colors = class_colors(classes)
    yy, xx = np.mgrid[0:32, 0:32]
    grid = int(np.ceil(np.sqrt(classes)))
    centers = [(6 + 20 * (c // grid) / max(grid - 1, 1), 6 + 20 * (c % grid) / max(grid - 1, 1))
               for c in range(classes)]
    blobs = np.stack([np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 4.0 ** 2)) for cy, cx in centers])
    blobs -= blobs.mean(axis=(1, 2), keepdims=True)  # zero-mean so channel means carry only colour
    img = colors[labels][:, :, None, None] + 0.15 * blobs[labels][:, None, :, :]
    img = img + jitter * rng.standard_normal((n, 3, 1, 1))
    img = img + noise * rng.standard_normal((n, 3, 32, 32))
    return Dataset(np.clip(img, 0.0, 1.0).astype(np.float32), labels, split, classes)


def nearest_mean_probe(train: Dataset, test: Optional[Dataset] = None) -> float:
    """Accuracy of the closed-form nearest-class-mean classifier on per-channel image means.

    Nearest-centroid is linear: score_c(x) = mu_c . x - |mu_c|^2 / 2.
    """
    feats = train.images.mean(axis=(2, 3)).astype(np.float64)
    mu = np.stack([feats[train.labels == c].mean(axis=0) for c in range(train.class_count)])
    ev = test or train
    f = ev.images.mean(axis=(2, 3)).astype(np.float64)
    scores = f @ mu.T - 0.5 * (mu * mu).sum(axis=1)
    return float((scores.argmax(axis=1) == ev.labels).mean())
