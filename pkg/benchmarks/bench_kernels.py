"""Numba kernels vs the pure-numpy fallback.

Times every hot kernel under both backends in-process, then one
WRN-10-1 forward+backward step end to end in two subprocesses (one with
WRN_NUMBA=0) so the backend selection happens exactly as in real use.

    python3 benchmarks/bench_kernels.py [--iters 10] [--batch-size 32]
"""
import argparse
import json
import os
import subprocess
import sys

from wrn import bench, kernels

STEP = """
import json, sys
from wrn import bench, kernels
spec = bench.BenchSpec(["WRN-10-1"], batch_size={bs}, warmup_iters=2, timed_iters={iters})
r = bench.run_bench(spec, host="")[0]
print(json.dumps({{"backend": kernels.BACKEND, "fwd_ms": r.fwd_ms, "fwd_bwd_ms": r.fwd_bwd_ms}}))
"""


def end_to_end(batch_size, iters):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, WRN_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP.format(bs=batch_size, iters=iters)], env=env,
                             capture_output=True, text=True, check=True)
        row = json.loads(res.stdout.strip().splitlines()[-1])
        out[row["backend"]] = row
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=32)
    a = ap.parse_args()
    if kernels.numba_backend is None:
        print("numba is not importable; only the numpy backend is available")
    print(bench.host_fingerprint())
    rows = bench.compare_backends(warmup=2, iters=a.iters)
    print(bench.format_backend_table(rows))
    if "numba" in rows[0].times:
        for r in rows:
            print(f"  {r.kernel:<18}{r.shape:<24}speedup x{r.times['numpy'] / r.times['numba']:.2f}")
    print()
    print(f"WRN-10-1 step, batch {a.batch_size}")
    for name, row in end_to_end(a.batch_size, max(3, a.iters // 2)).items():
        print(f"  {name:<6} fwd {row['fwd_ms']:9.2f} ms   fwd+bwd {row['fwd_bwd_ms']:9.2f} ms")


if __name__ == "__main__":
    main()
