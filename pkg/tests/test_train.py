import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wrn import arch, data, train
from wrn.errors import ConfigError, DivergenceError, ShapeError
from wrn.tensor import Tensor
from wrn.train import OptimState, TrainConfig, lr_at, sgd_step


def _scalar(p, g, v, **kw):
    t = Tensor(np.array([p], np.float64), dtype="double", requires_grad=True)
    s = OptimState([np.array([v], np.float64)])
    sgd_step([t], [np.array([g], np.float64)], s, **kw)
    return float(t.data[0]), float(s.velocity[0][0])


def test_sgd_scalar_nesterov_oracle():
    p, v = _scalar(1.0, 1.0, 0.0, lr=0.1, momentum=0.9, wd=0.0)
    assert v == 1.0
    assert p == pytest.approx(0.81, abs=1e-15)


def test_sgd_plain_reduction():
    p, _ = _scalar(2.0, 0.5, 0.0, lr=0.1, momentum=0.0, wd=0.0)
    assert p == 2.0 - 0.1 * 0.5


def test_sgd_pure_decay():
    p, _ = _scalar(3.0, 0.0, 0.0, lr=0.1, momentum=0.0, wd=0.0005)
    assert p == pytest.approx(3.0 * (1 - 0.1 * 0.0005), abs=1e-15)


def test_sgd_classic_momentum_variant():
    p, v = _scalar(1.0, 1.0, 0.5, lr=0.1, momentum=0.9, wd=0.0, nesterov=False)
    assert v == pytest.approx(1.45) and p == pytest.approx(1 - 0.145)


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-4, 1.0), seed=st.integers(0, 2**16))
def test_quadratic_step_moves_by_minus_lr_p(lr, seed):
    p0 = np.random.default_rng(seed).standard_normal(7)
    t = Tensor(p0.copy(), dtype="double", requires_grad=True)
    sgd_step([t], [p0.copy()], OptimState.zeros_like([t]), lr, 0.0, 0.0)  # grad of |p|^2/2 is p
    np.testing.assert_allclose(t.data - p0, -lr * p0, rtol=1e-12, atol=1e-15)


def test_sgd_shape_mismatch():
    t = Tensor(np.zeros(3), dtype="double", requires_grad=True)
    with pytest.raises(ShapeError):
        sgd_step([t], [np.zeros(4)], OptimState([np.zeros(3)]), 0.1, 0.9, 0.0)
    with pytest.raises(ShapeError):
        sgd_step([t], [np.zeros(3)], OptimState([]), 0.1, 0.9, 0.0)


def test_decay_mask_skips_masked_params():
    a = Tensor(np.ones(2), dtype="double", requires_grad=True)
    b = Tensor(np.ones(2), dtype="double", requires_grad=True)
    sgd_step([a, b], [np.zeros(2), np.zeros(2)], OptimState.zeros_like([a, b]), 0.1, 0.0, 0.5,
             decay=[True, False])
    assert a.data.tolist() == [0.95, 0.95] and b.data.tolist() == [1.0, 1.0]


def test_cifar_lr_sequence_exact():
    cfg = train.preset("cifar10")
    assert [lr_at(cfg, e) for e in (0, 59, 60, 119, 120, 160, 199)] == [0.1, 0.1, 0.02, 0.02, 0.004, 0.0008, 0.0008]


def test_svhn_lr_sequence_exact():
    cfg = train.preset("svhn")
    assert [lr_at(cfg, e) for e in (0, 80, 120, 159)] == [0.01, 0.001, 0.0001, 0.0001]
    assert cfg.epochs == 160


def test_empty_schedule_constant():
    cfg = TrainConfig(lr0=0.05, schedule=(), epochs=10)
    assert {lr_at(cfg, e) for e in range(10)} == {0.05}


@pytest.mark.parametrize("name", ["cifar10", "cifar100", "svhn"])
def test_lr_non_increasing(name):
    cfg = train.preset(name)
    seq = [lr_at(cfg, e) for e in range(cfg.epochs)]
    assert all(b <= a for a, b in zip(seq, seq[1:]))


def test_preset_recipe():
    c = train.preset("cifar10")
    assert (c.lr0, c.momentum, c.weight_decay, c.batch_size, c.epochs) == (0.1, 0.9, 5e-4, 128, 200)
    assert c.schedule == ((60, 0.2), (120, 0.2), (160, 0.2)) and c.nesterov


@pytest.mark.parametrize("kw", [dict(schedule=((60, 0.2), (60, 0.2))), dict(schedule=((200, 0.2),)),
                                dict(dropout_p=1.0), dict(batch_size=0), dict(preprocess="pca")])
def test_bad_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    c = train.preset("svhn", dropout_p=0.4, seed=9)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_error_rate_examples():
    labels = np.repeat(np.arange(10), 5)
    assert train.error_rate(np.eye(10)[labels] * 3, labels) == 0.0
    assert train.error_rate(np.zeros((50, 10)), labels) == 90.0


def test_error_rate_matches_confusion_matrix(rng):
    labels = rng.integers(0, 10, 1000)
    logits = rng.standard_normal((1000, 10))
    pred = logits.argmax(axis=1)
    conf = np.zeros((10, 10), int)
    for t, p in zip(labels, pred):
        conf[t, p] += 1
    assert train.error_rate(logits, labels) == pytest.approx(100 * (1 - np.trace(conf) / conf.sum()))


@pytest.mark.parametrize("runs,expected", [([4.9, 5.1, 5.0, 5.3, 4.8], 5.0), ([3.7], 3.7), ([4, 6], 5.0)])
def test_median_of_runs_numbers(runs, expected):
    assert train.median_of_runs(runs)["value"] == expected


def test_median_of_runs_logs():
    logs = []
    for err in (5.0, 3.0, 4.0):
        lg = train.RunLog()
        lg.records.append(train.EpochRecord(0, 0.1, 1.0, err, err + 1, 0.0))
        logs.append(lg)
    assert train.median_of_runs(logs) == {"train_loss": 1.0, "train_err": 4.0, "test_err": 5.0}
    logs[0].records.append(logs[0].records[0])
    with pytest.raises(ConfigError):
        train.median_of_runs(logs)


def test_run_log_csv_round_trip(tmp_path):
    lg = train.RunLog({"net": "WRN-10-1", "dropout": "0.3"})
    lg.records.append(train.EpochRecord(0, 0.02, 1.25, 50.0, float("nan"), 1.5))
    lg.write(tmp_path / "log.csv")
    text = (tmp_path / "log.csv").read_text()
    assert text.splitlines()[:3] == ["# net=WRN-10-1", "# dropout=0.3", ",".join(train.LOG_COLUMNS)]
    back = train.RunLog.read(tmp_path / "log.csv")
    assert back.header == lg.header and back.records[0].lr == 0.02


def _small_setup(seed=0, n=256, dropout=0.0):
    tr = data.synth_dataset(n, 10, seed)
    tr = data.apply(data.fit_meanstd(tr), tr)
    g = arch.build(arch.parse_notation("WRN-10-1", dropout_p=dropout), seed=seed)
    return tr, g


def test_train_loop_deterministic():
    cfg = train.preset("synth", epochs=2)
    logs = []
    for _ in range(2):
        tr, g = _small_setup()
        logs.append(train.train_loop(g, tr, None, cfg).to_csv())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 3


def test_divergence_reports_epoch_and_batch():
    tr, g = _small_setup(n=64)
    tr.images[40] = np.nan
    cfg = train.preset("synth", epochs=1, batch_size=32, augment=False)
    with pytest.raises(DivergenceError) as ei:
        train.train_loop(g, tr, None, cfg)
    order = data.epoch_order(64, cfg.seed, 0)
    assert ei.value.epoch == 0 and ei.value.batch == int(np.flatnonzero(order == 40)[0]) // 32


def test_shape_mismatch_rejected():
    g = arch.build(arch.parse_notation("WRN-10-1"), input_hw=16)
    with pytest.raises(ShapeError):
        train.train_loop(g, data.synth_dataset(20, 10), None, train.preset("synth", epochs=1))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_batch_loss_strictly_decreases(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((32, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 10, 32)
    g = arch.build(arch.parse_notation("WRN-10-1"), seed=seed, input_hw=16).train()
    cfg = TrainConfig(lr0=0.01, schedule=(), momentum=0.0, weight_decay=0.0, epochs=1, augment=False)
    params = g.parameters()
    state = OptimState.zeros_like(params)
    losses = [train.train_step(g, x, y, state, 0.01, cfg, params, [True] * len(params)) for _ in range(51)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_mode_switch_leaves_state_untouched():
    tr, g = _small_setup(n=64, dropout=0.3)
    train.train_loop(g, tr, None, train.preset("synth", epochs=1, dropout_p=0.3))
    snap = {k: v.data.copy() for k, v in g.named_parameters().items()}
    bufs = {k: v.copy() for k, v in g.buffers().items()}
    before = train.predict(g, tr.images[:8])
    g.train()
    g.eval()
    g.train()
    assert all(np.array_equal(snap[k], v.data) for k, v in g.named_parameters().items())
    assert all(np.array_equal(bufs[k], v) for k, v in g.buffers().items())
    np.testing.assert_array_equal(train.predict(g, tr.images[:8]), before)
    assert g.training  # predict restores the mode it found


def test_dropout_activity_logged():
    tr, g = _small_setup(n=128, dropout=0.3)
    lg = train.train_loop(g, tr, None, train.preset("synth", epochs=1, dropout_p=0.3))
    assert len(lg.dropout_activity) == 1
    assert abs(lg.dropout_activity[0] - 0.3) < 0.01
    _, g0 = _small_setup(n=128)
    assert train.train_loop(g0, tr, None, train.preset("synth", epochs=1)).dropout_activity == []
