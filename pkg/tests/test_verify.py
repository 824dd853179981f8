import numpy as np
import pytest

from wrn import tensor as T
from wrn import verify
from wrn.tensor import Tensor


def test_naive_conv_hand_example():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    np.testing.assert_array_equal(verify.naive_conv2d(x, w)[0, 0], [[8, 12], [20, 24]])
    np.testing.assert_array_equal(verify.naive_conv2d(x, w, stride=2, pad=1)[0, 0], [[0, 3], [9, 24]])


@pytest.mark.parametrize("a,n,expected", [([1.0, 2.0], [1.0, 2.0], 0.0), ([1.0], [-1.0], 1.0),
                                          ([0.0], [0.0], 0.0), ([3.0, 0.0], [0.0, 4.0], 5.0 / 7.0)])
def test_rel_error_examples(a, n, expected):
    assert verify.rel_error(np.array(a), np.array(n)) == pytest.approx(expected)


def test_gradcheck_accepts_correct_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    errs = verify.gradcheck(lambda d: T.mul(d["x"], d["x"]), {"x": x}, rng)
    assert errs["x"] < 1e-8


def test_gradcheck_flags_wrong_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    # the second factor is a constant copy, so the tape sees half of the true derivative
    errs = verify.gradcheck(lambda d: T.mul(d["x"], Tensor(d["x"].data.copy())), {"x": x}, rng)
    assert errs["x"] == pytest.approx(1 / 3, abs=1e-6)


def test_gradcheck_skips_constants(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    c = Tensor(rng.standard_normal(3))
    assert set(verify.gradcheck(lambda d: T.mul(d["x"], d["c"]), {"x": x, "c": c}, rng)) == {"x"}


def test_conv_oracle_and_backends():
    assert verify.check_conv_oracle(3) < verify.ORACLE_TOL
    assert verify.check_backends(2) < 1e-6


def test_depth_grammar_has_no_failures():
    assert verify.check_depth_grammar() == 0.0


def test_report_table_and_status():
    rep = verify.Report([verify.CheckResult("ops", "add", 1e-9, 1e-5, 3),
                         verify.CheckResult("ops", "mul", 2e-5, 1e-5, 3)])
    assert not rep.ok
    text = rep.table()
    assert "FAIL" in text and "ops: FAIL (2 checks)" in text
    assert not verify.CheckResult("x", "nan", float("nan"), 1.0, 1).ok


def test_quick_run_passes():
    rep = verify.run(quick=True)
    assert rep.ok, rep.table()
    assert {"ops", "layers", "network", "oracles", "arch"} == set(rep.groups())
