"""wrn command line: describe, train, eval, bench, verify.

Exit codes: 0 ok, 1 verification failure, 2 configuration error,
3 training divergence, 4 data error, 5 checkpoint error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

from . import arch, bench, kernels, verify
from . import checkpoint as ckpt
from . import data as D
from .errors import ConfigError, DataError, WRNError
from .train import TrainConfig, PRESETS, RunLog, evaluate, train_loop

log = logging.getLogger("wrn")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
OVERRIDDEN = " (overridden)"

# train options that can come from a config file, with their parsers
TRAIN_KEYS = {
    "net": str, "preset": str, "data": str, "test_data": str, "synth_n": int, "synth_test_n": int,
    "limit_train": int, "epochs": int, "lr": float, "batch_size": int, "momentum": float,
    "weight_decay": float, "decay_bn": "bool", "dropout": float, "seed": int, "deterministic": "bool",
    "precision": str, "augment": "bool", "preprocess": str, "zca_epsilon": float, "log": str,
    "checkpoint": str, "resume": str,
}
# cli key -> TrainConfig field
TO_TRAIN = {"lr": "lr0", "dropout": "dropout_p", "epochs": "epochs", "batch_size": "batch_size",
            "momentum": "momentum", "weight_decay": "weight_decay", "decay_bn": "decay_bn", "seed": "seed",
            "deterministic": "deterministic", "precision": "precision", "augment": "augment",
            "preprocess": "preprocess", "zca_epsilon": "zca_epsilon"}
CLI_DEFAULTS = {"preset": "cifar10", "synth_n": 2000, "synth_test_n": 500, "log": "run_log.csv",
                "checkpoint": "checkpoint.wrnc"}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _coerce(key: str, value):
    kind = TRAIN_KEYS[key]
    try:
        if kind == "bool":
            return value if isinstance(value, bool) else _parse_bool(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{no}: expected key=value, got {raw.strip()!r}")
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{path}:{no}: unknown config key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def _add_describe(sub):
    p = sub.add_parser("describe", help="per-layer table with parameter and MAC totals")
    p.add_argument("notation", help="e.g. WRN-28-10 or WRN-22-2-B(3,1,3)")
    p.add_argument("--csv", metavar="PATH", help="also write the table as CSV ('-' for stdout)")
    p.add_argument("--bottleneck", action="store_true", help="count a bottleneck ResNet (depth 50/101/152)")
    p.add_argument("--inner-widen", type=float, default=None, metavar="F",
                   help="bottleneck inner widening factor (default: the notation's k)")
    p.add_argument("--num-classes", type=int, default=None, metavar="K",
                   help="classifier outputs (default 10, or 1000 for bottleneck)")
    p.add_argument("--input-hw", type=int, default=None, metavar="PX",
                   help="square input size (default 32, or 224 for bottleneck)")


def _add_train(sub):
    p = sub.add_parser("train", help="train a network and write a run log and checkpoint")
    p.add_argument("net", nargs="?", default=None, help="network notation, e.g. WRN-16-2")
    p.add_argument("--config", metavar="FILE", help="flat key=value file; command-line flags win")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="optimiser/data recipe (default cifar10)")
    p.add_argument("--data", default=None, metavar="PATH",
                   help="CIFAR binary directory, or a WRNT raw-tensor file for the training split")
    p.add_argument("--test-data", default=None, metavar="FILE", help="WRNT raw-tensor file for the test split")
    p.add_argument("--synth-n", type=int, default=None, metavar="N", help="synthetic training images (default 2000)")
    p.add_argument("--synth-test-n", type=int, default=None, metavar="N",
                   help="synthetic test images (default 500)")
    p.add_argument("--limit-train", type=int, default=None, metavar="N",
                   help="keep only the first N training examples after a seeded shuffle")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="initial learning rate")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--no-decay-bn", dest="decay_bn", action="store_const", const=False, default=None,
                   help="exclude batch-norm gamma/beta from weight decay")
    p.add_argument("--dropout", type=float, default=None, help="dropout probability between block convolutions")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_const", const=True, default=None,
                   help="one thread, wall-clock column logged as 0, bit-reproducible logs")
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None,
                   help="disable crop/flip augmentation")
    p.add_argument("--preprocess", choices=("zca", "meanstd", "none"), default=None)
    p.add_argument("--zca-epsilon", type=float, default=None, help="ZCA eigenvalue regulariser")
    p.add_argument("--log", default=None, metavar="PATH", help="run-log CSV (default run_log.csv)")
    p.add_argument("--checkpoint", default=None, metavar="PATH",
                   help="checkpoint written after every epoch (default checkpoint.wrnc)")
    p.add_argument("--resume", default=None, metavar="PATH", help="continue from a checkpoint")


def _add_eval(sub):
    p = sub.add_parser("eval", help="error %% of a checkpoint on a dataset")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("--data", default=None, metavar="PATH",
                   help="dataset to score (default: the one recorded in the checkpoint)")
    p.add_argument("--split", choices=("train", "test"), default="test")


def _add_bench(sub):
    p = sub.add_parser("bench", help="forward and forward+backward timing per minibatch")
    p.add_argument("--sweep", default="WRN-16-1,WRN-16-2", help="comma-separated notations")
    p.add_argument("--csv", metavar="PATH", help="write rows here instead of stdout")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--kernels", action="store_true", help="also compare the numba and numpy kernel backends")


def _add_verify(sub):
    p = sub.add_parser("verify", help="gradient checks and oracle suites")
    p.add_argument("--quick", action="store_true", help="fewer random seeds, same checks")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="wrn", description=__doc__.split("\n\n")[0],
        epilog="exit codes: 0 ok, 1 verify failure, 2 config, 3 divergence, 4 data, 5 checkpoint. "
               "WRN_THREADS caps kernel threads; WRN_NUMBA=0 selects the numpy kernels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for add in (_add_describe, _add_train, _add_eval, _add_bench, _add_verify):
        add(sub)
    return p


# ---------------------------------------------------------------------------
# describe


def cmd_describe(a) -> int:
    if a.bottleneck:
        cfg = arch.parse_notation(a.notation, bottleneck=True, num_classes=a.num_classes)
        g = arch.build_bottleneck(cfg, a.inner_widen if a.inner_widen is not None else cfg.widen,
                                  input_hw=a.input_hw or 224)
    else:
        cfg = arch.parse_notation(a.notation, num_classes=a.num_classes)
        g = arch.build(cfg, materialize=False, input_hw=a.input_hw or 32)
    rep = arch.describe(g)
    print(rep.text())
    if a.csv == "-":
        sys.stdout.write(rep.csv())
    elif a.csv:
        Path(a.csv).write_text(rep.csv(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


def resolve_train(a) -> tuple:
    """Merge defaults < preset < config file < flags. Returns (settings, TrainConfig, user-set keys)."""
    user = read_config_file(a.config) if getattr(a, "config", None) else {}
    for key in TRAIN_KEYS:
        v = getattr(a, key, None)
        if v is not None:
            user[key] = _coerce(key, v)
    s = dict(CLI_DEFAULTS)
    s.update(user)
    if not s.get("net"):
        raise ConfigError("no network given (positional NET or net= in the config file)")
    if s["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {s['preset']!r}; choose from {sorted(PRESETS)}")
    base = TrainConfig(**PRESETS[s["preset"]])
    over = {TO_TRAIN[k]: v for k, v in user.items() if k in TO_TRAIN}
    schedule = base.schedule
    if "epochs" in over:
        # a shortened run keeps only the drops that still fall inside it
        schedule = tuple((e, m) for e, m in schedule if e < over["epochs"])
    cfg = TrainConfig(**{**base.to_dict(), "schedule": schedule, **over})
    return s, cfg, set(user)


def _header(s: dict, cfg: TrainConfig, user: set, net: arch.NetConfig) -> dict:
    base = TrainConfig(**PRESETS[s["preset"]])
    inv = {v: k for k, v in TO_TRAIN.items()}
    h = {"net": net.notation, "preset": s["preset"]}
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        key = inv.get(f.name, f.name)
        text = ";".join(f"{e}:{m}" for e, m in v) if f.name == "schedule" else str(v)
        if v != getattr(base, f.name) and (key in user or f.name == "schedule"):
            text += OVERRIDDEN
        h[key] = text
    for k in ("data", "test_data", "synth_n", "synth_test_n", "limit_train", "resume"):
        if s.get(k) is not None:
            h[k] = str(s[k]) + (OVERRIDDEN if k in user and k in CLI_DEFAULTS and s[k] != CLI_DEFAULTS[k] else "")
    h["backend"] = kernels.BACKEND
    h["threads"] = "1" if cfg.deterministic else os.environ.get("WRN_THREADS", "default")
    return h


def header_value(text: str) -> str:
    """Strip the override marker from a run-log header value."""
    return text[:-len(OVERRIDDEN)] if text.endswith(OVERRIDDEN) else text


def load_datasets(s: dict, seed: int) -> tuple:
    """(train, test) per the settings; test may be None."""
    if s["preset"] == "synth" and not s.get("data"):
        n, nt = int(s.get("synth_n", 2000)), int(s.get("synth_test_n", 500))
        train = D.synth_dataset(n, 10, seed, "train")
        test = D.synth_dataset(nt, 10, seed, "test") if nt > 0 else None
    else:
        if not s.get("data"):
            raise DataError(f"preset {s['preset']} needs --data (CIFAR directory or WRNT file)")
        path = Path(s["data"])
        if path.is_dir():
            train, test = D.load_cifar(path, "c100" if s["preset"] == "cifar100" else "c10")
        elif path.exists():
            train = D.load_raw(path, "train")
            test = D.load_raw(s["test_data"], "test") if s.get("test_data") else None
        else:
            raise DataError(f"{path}: no such file or directory")
    lim = s.get("limit_train")
    if lim is not None:
        if lim < 1:
            raise ConfigError(f"--limit-train must be positive, got {lim}")
        order = D.rng_for(seed, D.SUBSAMPLE, 1).permutation(len(train))
        train = train.subset(order[:lim])
    return train, test


def data_settings(header: dict) -> dict:
    """Dataset settings recorded in a run-log header, enough for load_datasets."""
    h = {k: header_value(v) for k, v in header.items()}
    s = {"preset": h.get("preset", "synth")}
    for k in ("data", "test_data", "synth_n", "synth_test_n", "limit_train"):
        if k in h:
            s[k] = _coerce(k, h[k])
    return s


def _fit_preproc(cfg: TrainConfig, train: D.Dataset) -> D.PreprocState:
    if cfg.preprocess == "zca":
        return D.fit_zca(train, cfg.zca_epsilon, cfg.zca_samples, cfg.seed)
    return D.fit(cfg.preprocess, train)


def cmd_train(a) -> int:
    s, cfg, user = resolve_train(a)
    ck = ckpt.load(s["resume"]) if s.get("resume") else None
    if ck is not None:
        # data and training settings come from the checkpoint; --data still wins
        cfg = ck.train
        s.update({k: v for k, v in data_settings(ck.run_log.header).items() if k not in user})
    if cfg.deterministic:
        kernels.set_threads(1)
    train, test = load_datasets(s, cfg.seed)
    if ck is not None:
        graph, state = ck.restore()
        preproc, run_log, start = ck.preproc, ck.run_log, ck.epoch
    else:
        net = arch.parse_notation(s["net"], num_classes=train.class_count, dropout_p=cfg.dropout_p)
        graph = arch.build(net, seed=cfg.seed, precision=cfg.precision, input_hw=train.images.shape[2])
        preproc = _fit_preproc(cfg, train)
        run_log = RunLog(_header(s, cfg, user, net))
        state, start = None, 0
    train = D.apply(preproc, train)
    test = D.apply(preproc, test) if test is not None else None
    for k, v in run_log.header.items():
        log.info("%s=%s", k, v)
    log_path = s["log"]
    ck_path = s["checkpoint"]

    def on_epoch(epoch, g, st, rl):
        rl.write(log_path)
        ckpt.save(ckpt.Checkpoint.capture(g, cfg, epoch + 1, st, preproc, rl), ck_path)

    run_log = train_loop(graph, train, test, cfg, run_log=run_log, state=state, start_epoch=start,
                         on_epoch=on_epoch)
    run_log.write(log_path)
    if run_log.records:
        r = run_log.final()
        print(f"final epoch {r.epoch}: train_err={r.train_err:.4f}% test_err={r.test_err:.4f}% "
              f"loss={r.train_loss:.6f}")
    return EXIT_OK


def cmd_eval(a) -> int:
    ck = ckpt.load(a.checkpoint)
    graph, _ = ck.restore()
    s = data_settings(ck.run_log.header)
    if a.data:
        s = {"preset": "cifar10" if Path(a.data).is_dir() else "svhn", "data": a.data}
        if a.split == "test" and not Path(a.data).is_dir():
            s["test_data"] = a.data
    train, test = load_datasets(s, ck.train.seed)
    ds = train if a.split == "train" else test
    if ds is None:
        raise DataError("no test split available; pass --split train or --data")
    if ck.preproc is not None:
        ds = D.apply(ck.preproc, ds)
    err = evaluate(graph, ds)
    print(f"{a.split} error: {err:.4f}% ({len(ds)} examples)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / verify


def cmd_bench(a) -> int:
    configs = [c.strip() for c in a.sweep.split(",") if c.strip()]
    if not configs:
        raise ConfigError("--sweep needs at least one notation")
    spec = bench.BenchSpec(configs, batch_size=a.batch_size, warmup_iters=a.warmup, timed_iters=a.iters)
    rows = bench.run_bench(spec)
    path = a.csv or "/dev/stdout"
    bench.emit_csv(rows, path)
    if a.kernels:
        print(bench.format_backend_table(bench.compare_backends()))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_CONFIG


def cmd_verify(a) -> int:
    rep = verify.run(quick=a.quick)
    print(rep.table())
    return EXIT_OK if rep.ok else EXIT_VERIFY


COMMANDS = {"describe": cmd_describe, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "verify": cmd_verify}


def main(argv: Optional[list] = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    threads = os.environ.get("WRN_THREADS")
    try:
        if threads:
            try:
                n = int(threads)
            except ValueError:
                raise ConfigError(f"WRN_THREADS must be an integer, got {threads!r}") from None
            if n < 1:
                raise ConfigError(f"WRN_THREADS must be positive, got {n}")
            kernels.set_threads(n)
        return COMMANDS[a.command](a)
    except WRNError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
