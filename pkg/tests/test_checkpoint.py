import struct

import numpy as np
import pytest

from wrn import arch, checkpoint as C, data, train
from wrn.errors import CheckpointError


@pytest.fixture(scope="module")
def setup():
    tr = data.synth_dataset(256, 10, 0)
    st = data.fit_meanstd(tr)
    cfg = train.preset("synth", epochs=4, dropout_p=0.3, batch_size=64)
    net = arch.parse_notation("WRN-10-1", dropout_p=0.3)
    return data.apply(st, tr), st, cfg, net


def test_resume_matches_uninterrupted_run(setup, tmp_path):
    tr, st, cfg, net = setup
    g_full = arch.build(net, seed=0)
    full = train.train_loop(g_full, tr, None, cfg)

    path = tmp_path / "ck.wrnc"

    def save_at_two(epoch, graph, state, log):
        if epoch == 1:
            C.save(C.Checkpoint.capture(graph, cfg, epoch + 1, state, st, log), path)

    train.train_loop(arch.build(net, seed=0), tr, None, cfg, on_epoch=save_at_two, stop_epoch=2)
    ck = C.load(path)
    g, state = ck.restore()
    resumed = train.train_loop(g, tr, None, ck.train, run_log=ck.run_log, state=state, start_epoch=ck.epoch)

    assert resumed.to_csv() == full.to_csv()
    assert resumed.dropout_activity == full.dropout_activity
    for p, q in zip(g_full.parameters(), g.parameters()):
        assert np.array_equal(p.data, q.data)
    for k, v in g_full.buffers().items():
        assert np.array_equal(v, g.buffers()[k])


def test_round_trip_fields(setup, tmp_path):
    tr, st, cfg, net = setup
    g = arch.build(net, seed=3)
    state = train.OptimState.zeros_like(g.parameters())
    state.velocity[0][...] = 1.5
    ck = C.Checkpoint.capture(g, cfg, 7, state, st)
    C.save(ck, tmp_path / "a.wrnc")
    back = C.load(tmp_path / "a.wrnc")
    assert back.net == net and back.train == cfg and back.epoch == 7
    assert back.preproc.kind == "meanstd"
    np.testing.assert_array_equal(back.preproc.mean, st.mean)
    assert all(np.array_equal(ck.params[k], back.params[k]) for k in ck.params)
    assert back.params[next(iter(back.params))].dtype == np.float32
    np.testing.assert_array_equal(back.velocity[0], state.velocity[0])


def test_double_precision_tensors_stored_as_f64(tmp_path):
    net = arch.parse_notation("WRN-10-1")
    g = arch.build(net, precision="double", input_hw=8)
    cfg = train.TrainConfig(precision="double", epochs=1, schedule=())
    C.save(C.Checkpoint.capture(g, cfg, 0, train.OptimState.zeros_like(g.parameters())), tmp_path / "d.wrnc")
    back = C.load(tmp_path / "d.wrnc")
    assert all(v.dtype == np.float64 for v in back.params.values())
    g2, _ = back.restore()
    assert g2.input_shape == (3, 8, 8)


def _saved(tmp_path):
    g = arch.build(arch.parse_notation("WRN-10-1"), input_hw=8)
    cfg = train.TrainConfig(epochs=1, schedule=())
    path = tmp_path / "c.wrnc"
    C.save(C.Checkpoint.capture(g, cfg, 1, train.OptimState.zeros_like(g.parameters())), path)
    return path


def test_header_layout(tmp_path):
    raw = _saved(tmp_path).read_bytes()
    assert raw[:5] == b"WRNC\x01"
    (n,) = struct.unpack_from("<Q", raw, 5)
    assert raw[13:13 + n].decode("utf-8").startswith("{")


def test_version_mismatch(tmp_path):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        C.load(path)


@pytest.mark.parametrize("damage", ["magic", "truncate", "manifest"])
def test_corrupt_files(tmp_path, damage):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"NOPE"
    elif damage == "truncate":
        raw = raw[:-100]
    else:
        raw[14:20] = b"\xff" * 6
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        C.load(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        C.load(tmp_path / "nope.wrnc")


def test_restore_rejects_mismatched_params(tmp_path):
    ck = C.load(_saved(tmp_path))
    ck.params.pop(next(iter(ck.params)))
    with pytest.raises(CheckpointError):
        ck.restore()
