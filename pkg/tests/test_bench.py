import numpy as np
import pytest

from wrn import arch, bench
from wrn.bench import BenchRow, BenchSpec
from wrn.errors import ConfigError


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_spec_requires_three_timed_iters():
    with pytest.raises(ConfigError):
        BenchSpec(["WRN-10-1"], timed_iters=2)
    assert BenchSpec(["WRN-10-1"]).batch_size == 32


def test_median_ignores_single_outlier():
    clock = FakeClock()

    def step():
        clock.t += 0.010

    def delay(i):
        if i == 4:
            clock.t += 5.0

    med, times = bench.time_median(step, 2, 9, clock=clock, hook=delay)
    assert max(times) == pytest.approx(5010.0)
    assert med == pytest.approx(10.0)


def test_warmup_never_timed():
    clock = FakeClock()
    calls = []

    def step():
        calls.append(1)
        clock.t += 100.0 if len(calls) <= 3 else 0.001  # warmup iterations are slow

    med, times = bench.time_median(step, 3, 5, clock=clock)
    assert len(calls) == 8 and len(times) == 5
    assert med == pytest.approx(1.0) and max(times) == pytest.approx(1.0)


def test_sweep_liveness_and_counts():
    spec = BenchSpec(["WRN-40-4", "WRN-16-10", "WRN-28-10"], batch_size=2, warmup_iters=0, timed_iters=3)
    rows = bench.run_bench(spec, host="test")
    assert [r.notation for r in rows] == ["WRN-40-4", "WRN-16-10", "WRN-28-10"]
    for r in rows:
        assert r.ok and r.fwd_bwd_ms >= r.fwd_ms > 0
        g = arch.build(arch.parse_notation(r.notation), materialize=False)
        assert r.params == arch.param_count(g) and r.macs == arch.mac_count(g)


def test_error_row_does_not_stop_sweep(tmp_path):
    spec = BenchSpec(["WRN-39-2", "WRN-10-1"], batch_size=2, warmup_iters=0, timed_iters=3)
    rows = bench.run_bench(spec, host="h")
    assert not rows[0].ok and "mod" in rows[0].error
    assert rows[1].ok
    path = tmp_path / "b.csv"
    bench.emit_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "notation,params,macs,fwd_ms,fwd_bwd_ms,host,error"
    assert lines[1].startswith("WRN-39-2,,,,,h,")
    back = bench.read_csv(path)
    assert back[0].fwd_ms is None and back[0].error == rows[0].error


def test_csv_round_trip(tmp_path):
    rows = [BenchRow("WRN-16-1", 175066, 26657408, 12.3456, 40.5, "h1"),
            BenchRow("WRN-16-2", 691674, 101106688, 30.0, 95.25, "h1"),
            BenchRow("WRN-16-4", 2748890, 397172736, 90.125, 280.0, "h1")]
    path = tmp_path / "b.csv"
    bench.emit_csv(rows, path)
    assert len(path.read_text().splitlines()) == 4
    back = bench.read_csv(path)
    for a, b in zip(rows, back):
        assert (a.notation, a.params, a.macs, a.host) == (b.notation, b.params, b.macs, b.host)
        assert b.fwd_ms == round(a.fwd_ms, 3) and b.fwd_bwd_ms == round(a.fwd_bwd_ms, 3)
    with pytest.raises(ConfigError):
        bench.emit_csv([], path)


def test_mac_ratio_k2_vs_k1():
    m = [arch.mac_count(arch.build(arch.parse_notation(f"WRN-16-{k}"), materialize=False)) for k in (1, 2)]
    assert 3.5 <= m[1] / m[0] <= 4.0


def test_batch_doubling_time_ratio():
    # interleave the two batch sizes over several rounds so a slow spell on a shared core hits both
    t = {32: [], 64: []}
    for _ in range(4):
        for bs in t:
            spec = BenchSpec(["WRN-16-1"], batch_size=bs, warmup_iters=1, timed_iters=3)
            t[bs].append(bench.run_bench(spec, host="h")[0].fwd_bwd_ms)
    ratio = np.median(t[64]) / np.median(t[32])
    assert 1.2 <= ratio <= 2.5, t


def test_host_fingerprint_fields():
    fp = bench.host_fingerprint()
    keys = [kv.split("=")[0] for kv in fp.split(";")]
    assert keys == ["cores", "threads", "backend", "sgemm512"]
    assert bench.host_fingerprint() is fp


def test_compare_backends_covers_every_kernel():
    rows = bench.compare_backends(warmup=0, iters=1)
    assert {r.kernel for r in rows} == set(bench.KERNEL_CASES)
    assert all(v > 0 for r in rows for v in r.times.values())
    table = bench.format_backend_table(rows)
    assert "numpy ms" in table
