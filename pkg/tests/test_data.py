import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wrn import data
from wrn.data import AugmentPolicy, Dataset
from wrn.errors import DataError, DegenerateError

CHI2_80_P01 = 112.329  # upper 1% point of chi-square with 80 degrees of freedom


def _c10_records(labels, rng):
    pix = rng.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], pix], axis=1)
    return rec.tobytes(), pix


def test_cifar10_record_layout(tmp_path, rng):
    raw, pix = _c10_records([3, 7], rng)
    (tmp_path / "b.bin").write_bytes(raw)
    images, labels = data.read_cifar_file(tmp_path / "b.bin")
    assert labels.tolist() == [3, 7]
    # bytes 1..1024 of the first record are the red plane, row-major
    np.testing.assert_array_equal(images[0, 0], pix[0, :1024].reshape(32, 32) / np.float32(255))
    np.testing.assert_array_equal(images[1, 2], pix[1, 2048:].reshape(32, 32) / np.float32(255))
    assert images.dtype == np.float32 and images.min() >= 0 and images.max() <= 1


def test_cifar100_fine_label(tmp_path, rng):
    pix = rng.integers(0, 256, (1, 3072), dtype=np.uint8)
    (tmp_path / "train.bin").write_bytes(bytes([4, 87]) + pix.tobytes())
    (tmp_path / "test.bin").write_bytes(bytes([1, 99]) + pix.tobytes())
    tr, te = data.load_cifar(tmp_path, "c100")
    assert tr.labels.tolist() == [87] and te.labels.tolist() == [99]
    assert tr.class_count == 100


def test_load_cifar10_directory(tmp_path, rng):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    for name in data.CIFAR10_TRAIN + data.CIFAR10_TEST:
        (sub / name).write_bytes(_c10_records(rng.integers(0, 10, 4), rng)[0])
    tr, te = data.load_cifar(tmp_path)
    assert (len(tr), len(te)) == (20, 4)
    assert tr.split == "train" and te.split == "test"
    assert tr.labels.max() < 10


def test_truncated_file_reports_offset(tmp_path, rng):
    raw, _ = _c10_records([1, 2], rng)
    (tmp_path / "b.bin").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="byte offset 3073"):
        data.read_cifar_file(tmp_path / "b.bin")


def test_missing_directory(tmp_path):
    with pytest.raises(DataError, match="missing"):
        data.load_cifar(tmp_path)


def test_raw_round_trip(tmp_path):
    ds = data.synth_dataset(30, 10, 3)
    data.save_raw(tmp_path / "x.raw", ds)
    raw = (tmp_path / "x.raw").read_bytes()
    assert raw[:4] == b"WRNT" and len(raw) == 16 + 2 * 30 + 4 * 30 * 3072
    back = data.load_raw(tmp_path / "x.raw")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    (tmp_path / "short.raw").write_bytes(raw[:100])
    with pytest.raises(DataError):
        data.load_raw(tmp_path / "short.raw")


def test_labels_out_of_range():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 32, 32), np.float32), [0, 10], class_count=10)


def test_meanstd_constant_is_degenerate():
    with pytest.raises(DegenerateError):
        data.fit_meanstd(Dataset(np.full((4, 3, 32, 32), 0.5, np.float32), [0, 1, 2, 3]))


def test_meanstd_normalises_train_with_train_statistics():
    tr = data.synth_dataset(200, 10, 0)
    te = data.synth_dataset(100, 10, 0, split="test")
    s = data.fit_meanstd(tr)
    x = data.apply(s, tr).images.astype(np.float64)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(x.std(axis=(0, 2, 3)) - 1).max() < 1e-4
    # test split uses the training statistics, not its own
    own = data.fit_meanstd(te)
    expect = (te.images.astype(np.float64) - s.mean[None, :, None, None]) / s.scale[None, :, None, None]
    np.testing.assert_allclose(data.apply(s, te).images, expect, rtol=1e-6, atol=1e-6)
    assert not np.allclose(own.mean, s.mean)


def test_zca_toy_whitens_exactly(rng):
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    z = rng.standard_normal((4000, 2))
    x = z @ np.linalg.cholesky(cov).T
    ds = Dataset(x.reshape(4000, 2, 1, 1), np.zeros(4000), class_count=1)
    s = data.fit_zca(ds, epsilon=0.0, max_samples=None)
    w = s.scale
    xc = x - x.mean(axis=0)
    emp = xc.T @ xc / len(x)
    np.testing.assert_allclose(w @ emp @ w.T, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(w, w.T, atol=1e-12)  # ZCA keeps the symmetric root


def test_zca_few_samples_matches_full_eigendecomposition(rng):
    x = rng.standard_normal((5, 12))
    ds = Dataset(x.reshape(5, 12, 1, 1), np.zeros(5), class_count=1)
    w = data.fit_zca(ds, epsilon=0.1, max_samples=None).scale
    xc = x - x.mean(axis=0)
    lam, u = np.linalg.eigh(xc.T @ xc / 5)
    ref = (u * (np.clip(lam, 0, None) + 0.1) ** -0.5) @ u.T
    np.testing.assert_allclose(w, ref, atol=1e-10)
    with pytest.raises(DegenerateError):
        data.fit_zca(ds, epsilon=0.0)


def test_zca_whitened_covariance_500_images():
    tr = data.synth_dataset(500, 10, 0)
    s = data.fit_zca(tr, epsilon=0.1)
    z = data.transform(s, tr.images).reshape(500, -1).astype(np.float64)
    z -= z.mean(axis=0)
    c = z.T @ z / 500
    off = c - np.diag(np.diag(c))
    assert np.abs(off).max() < 1e-3


def test_zca_not_idempotent():
    tr = data.synth_dataset(200, 10, 0)
    s = data.fit_zca(tr, epsilon=0.1)
    once = data.transform(s, tr.images)
    twice = data.transform(s, once)
    assert not np.allclose(once, twice, atol=1e-3)


def test_preproc_state_round_trip_bit_exact():
    tr = data.synth_dataset(100, 10, 0)
    for s in (data.fit_meanstd(tr), data.fit_zca(tr, epsilon=0.1)):
        back = data.PreprocState.from_parts(s.meta(), {k: v.copy() for k, v in s.arrays().items()})
        np.testing.assert_array_equal(data.transform(back, tr.images), data.transform(s, tr.images))


def test_augment_disabled_is_identity(rng):
    x = rng.random((5, 3, 32, 32)).astype(np.float32)
    assert data.augment(x, AugmentPolicy(enabled=False), rng) is x


def test_augment_shape_and_determinism(rng):
    x = rng.random((8, 3, 32, 32)).astype(np.float32)
    a = data.augment(x, AugmentPolicy(), np.random.default_rng(5))
    b = data.augment(x, AugmentPolicy(), np.random.default_rng(5))
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)


def _decode(out):
    # pixel (i, j) holds 32*i + j, so two neighbours on the centre row recover origin and flip
    left, right = out[:, 0, 16, 15], out[:, 0, 16, 16]
    flipped = right < left
    oy = (np.where(flipped, right, left) // 32).astype(int) - 12
    ox = (np.where(flipped, right, left) % 32).astype(int) - 11
    return oy, ox, flipped


def test_augment_statistics():
    n = 10_000
    img = (32 * np.arange(32)[:, None] + np.arange(32)[None, :]).astype(np.float32)
    x = np.broadcast_to(img, (n, 1, 32, 32)).copy()
    oy, ox, flipped = _decode(data.augment(x, AugmentPolicy(), np.random.default_rng(11)))
    assert oy.min() >= 0 and oy.max() <= 8 and ox.min() >= 0 and ox.max() <= 8
    assert abs(flipped.mean() - 0.5) <= 0.02
    counts = np.bincount(oy * 9 + ox, minlength=81)
    expected = n / 81
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < CHI2_80_P01


def test_epoch_order_is_keyed_permutation():
    a = data.epoch_order(100, 7, 3)
    assert sorted(a.tolist()) == list(range(100))
    np.testing.assert_array_equal(a, data.epoch_order(100, 7, 3))
    assert not np.array_equal(a, data.epoch_order(100, 7, 4))
    sizes = [len(b) for _, b in data.batches(a, 32)]
    assert sizes == [32, 32, 32, 4]


def test_synth_balance_and_determinism():
    ds = data.synth_dataset(100, 10, 4)
    assert np.bincount(ds.labels).tolist() == [10] * 10
    again = data.synth_dataset(100, 10, 4)
    assert ds.images.tobytes() == again.images.tobytes()
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    with pytest.raises(DataError):
        data.synth_dataset(5, 10)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(10, 200), classes=st.integers(2, 10))
def test_synth_balance_property(n, classes):
    c = np.bincount(data.synth_dataset(n, classes, 0).labels, minlength=classes)
    assert c.max() - c.min() <= 1


def test_synth_linear_probe():
    tr = data.synth_dataset(2000, 10, 0)
    assert data.nearest_mean_probe(tr) > 0.95
    assert data.nearest_mean_probe(tr, data.synth_dataset(500, 10, 0, split="test")) > 0.95
