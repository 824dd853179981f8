"""Single-file checkpoints: magic, JSON manifest, raw little-endian tensors.

Layout::

    b"WRNC\\x01"  | u64 manifest length | manifest (UTF-8 JSON) | tensor bytes

The manifest lists every tensor as name, dtype ("f32"/"f64"), shape and byte
offset relative to the start of the tensor section. All random draws during
training are keyed on (seed, stream, epoch, batch), so the seed plus the next
epoch index is enough to resume the exact same stream.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import arch
from .data import PreprocState
from .errors import CheckpointError, ConfigError
from .train import EpochRecord, OptimState, RunLog, TrainConfig

MAGIC = b"WRNC"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _code(dt: np.dtype) -> str:
    for k, v in _DTYPES.items():
        if np.dtype(dt).newbyteorder("<") == v:
            return k
    raise CheckpointError(f"cannot store tensors of dtype {dt}")


@dataclass
class Checkpoint:
    net: arch.NetConfig
    train: TrainConfig
    epoch: int  # number of completed epochs; training resumes at this index
    params: dict
    buffers: dict
    velocity: list
    preproc: Optional[PreprocState] = None
    input_hw: int = 32
    precision: str = "single"
    run_log: RunLog = field(default_factory=RunLog)
    rng: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, graph: arch.Graph, cfg: TrainConfig, epoch: int, state: OptimState,
                preproc: Optional[PreprocState] = None, run_log: Optional[RunLog] = None) -> "Checkpoint":
        rng = {"seed": cfg.seed, "next_epoch": epoch,
               "dropout": [d.rng.bit_generator.state for d in graph.drops]}
        return cls(graph.config, cfg, epoch,
                   {k: p.data.copy() for k, p in graph.named_parameters().items()},
                   {k: v.copy() for k, v in graph.buffers().items()},
                   [v.copy() for v in state.velocity], preproc, graph.input_shape[1], graph.precision,
                   run_log or RunLog(), rng)

    def restore(self) -> tuple:
        """Rebuild ``(graph, optimiser state)`` exactly as captured."""
        g = arch.build(self.net, seed=self.train.seed, precision=self.precision, input_hw=self.input_hw)
        named = g.named_parameters()
        if set(named) != set(self.params):
            raise CheckpointError("checkpoint parameters do not match the rebuilt network")
        for k, p in named.items():
            if p.data.shape != self.params[k].shape:
                raise CheckpointError(f"parameter {k}: shape {self.params[k].shape}, network has {p.data.shape}")
            p.data[...] = self.params[k]
        bufs = g.buffers()
        if set(bufs) != set(self.buffers):
            raise CheckpointError("checkpoint running statistics do not match the rebuilt network")
        for k, b in bufs.items():
            b[...] = self.buffers[k]
        for d, st in zip(g.drops, self.rng.get("dropout", [])):
            d.rng.bit_generator.state = st
        state = OptimState([v.copy() for v in self.velocity])
        if [v.shape for v in state.velocity] != [p.data.shape for p in g.parameters()]:
            raise CheckpointError("optimiser state does not match the network parameters")
        return g, state


def save(ck: Checkpoint, path) -> None:
    tensors = []
    for k, v in ck.params.items():
        tensors.append((f"param/{k}", v))
    for k, v in ck.buffers.items():
        tensors.append((f"buffer/{k}", v))
    for i, v in enumerate(ck.velocity):
        tensors.append((f"velocity/{i}", v))
    if ck.preproc is not None:
        for k, v in ck.preproc.arrays().items():
            tensors.append((f"preproc/{k}", np.asarray(v, dtype=np.float64)))
    entries, blobs, off = [], [], 0
    for name, arr in tensors:
        code = _code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": off})
        blobs.append(raw)
        off += len(raw)
    manifest = {
        "version": VERSION,
        "net": ck.net.to_dict(),
        "train": ck.train.to_dict(),
        "epoch": ck.epoch,
        "input_hw": ck.input_hw,
        "precision": ck.precision,
        "preproc": ck.preproc.meta() if ck.preproc is not None else None,
        "rng": ck.rng,
        # header as ordered pairs; sort_keys below would otherwise reorder it
        "run_log": {"header": [list(kv) for kv in ck.run_log.header.items()],
                    "records": [r.__dict__ for r in ck.run_log.records],
                    "dropout_activity": list(ck.run_log.dropout_activity)},
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {blob[4]}, this build reads version {VERSION}")
    (mlen,) = struct.unpack_from("<Q", blob, 5)
    start = 13 + mlen
    if start > len(blob):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        m = json.loads(blob[13:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from None
    arrays = {}
    for e in m["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown tensor dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        hi = lo + count * dt.itemsize
        if hi > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=lo).reshape(e["shape"]).copy()
    try:
        net = arch.NetConfig.from_dict(m["net"])
        cfg = TrainConfig.from_dict(m["train"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: {e}") from None
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}  # noqa: E731
    vel = pick("velocity/")
    preproc = None
    if m.get("preproc") is not None:
        preproc = PreprocState.from_parts(m["preproc"], pick("preproc/"))
    rl = m.get("run_log") or {}
    log = RunLog({k: v for k, v in rl.get("header", [])}, [EpochRecord(**r) for r in rl.get("records", [])],
                 list(rl.get("dropout_activity", [])))
    return Checkpoint(net, cfg, int(m["epoch"]), pick("param/"), pick("buffer/"),
                      [vel[str(i)] for i in range(len(vel))], preproc, int(m["input_hw"]),
                      m["precision"], log, m.get("rng", {}))
