import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tforge import data
from tforge.errors import DatasetError, ParameterError, SamplingError, UsageError


def test_synthetic_is_deterministic():
    a = data.load_dataset("synthetic", seed=4, n_train=50, n_test=20)
    b = data.load_dataset("synthetic", seed=4, n_train=50, n_test=20)
    assert torch.equal(a[0].pixels, b[0].pixels) and torch.equal(a[1].labels, b[1].labels)


def test_synthetic_shapes_and_range(blobs):
    train, test = blobs
    assert train.pixels.shape == (2000, 3, 32, 32) and len(test) == 600
    assert train.pixels.min() >= 0 and train.pixels.max() <= 1
    assert set(train.labels.tolist()) == set(range(10))


def test_unknown_dataset_is_usage_error():
    with pytest.raises(UsageError):
        data.load_dataset("mnist")


def test_cifar_requires_root(monkeypatch):
    monkeypatch.delenv("TF_DATA_ROOT", raising=False)
    with pytest.raises(UsageError):
        data.load_dataset("cifar10")


def _fake_cifar(root, n=20):
    rng = np.random.default_rng(0)
    px = torch.from_numpy(rng.integers(0, 256, (n, 3, 32, 32)).astype(np.float32) / 255)
    batch = data.ImageBatch(px, torch.arange(n) % 10, 10)
    for name in data.CIFAR_TRAIN_FILES + data.CIFAR_TEST_FILES:
        data.write_cifar_bin(batch, root / name)
    return batch


def test_cifar_binary_roundtrip(tmp_path):
    batch = _fake_cifar(tmp_path)
    train, test = data.load_dataset("cifar10", tmp_path)
    assert len(train) == 100 and len(test) == 20 and test.num_classes == 10
    assert torch.equal(test.pixels, batch.pixels) and torch.equal(test.labels, batch.labels)
    assert 0 <= float(train.pixels.min()) and float(train.pixels.max()) <= 1


def test_cifar_root_from_env_and_subdir(tmp_path, monkeypatch):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    _fake_cifar(sub)
    monkeypatch.setenv("TF_DATA_ROOT", str(tmp_path))
    assert len(data.load_dataset("cifar10")[1]) == 20


def test_cifar_missing_file_is_named(tmp_path):
    _fake_cifar(tmp_path)
    (tmp_path / "data_batch_3.bin").unlink()
    with pytest.raises(DatasetError, match="data_batch_3.bin"):
        data.load_dataset("cifar10", tmp_path)


def test_cifar_corrupt_file_is_named(tmp_path):
    _fake_cifar(tmp_path)
    with open(tmp_path / "test_batch.bin", "ab") as fh:
        fh.write(b"\x00\x01")
    with pytest.raises(DatasetError, match="test_batch.bin"):
        data.load_dataset("cifar10", tmp_path)


def test_image_batch_validation():
    with pytest.raises(ParameterError):
        data.ImageBatch(torch.full((2, 3, 4, 4), 1.5), torch.zeros(2))
    with pytest.raises(ParameterError):
        data.ImageBatch(torch.zeros(2, 3, 4, 4), torch.zeros(3))
    with pytest.raises(ParameterError):
        data.ImageBatch(torch.zeros(0, 3, 4, 4), torch.zeros(0))


def test_defense_set_ten_per_class(blobs):
    d = data.sample_defense_set(blobs[1], 10, seed=7)
    assert len(d) == 100
    assert torch.bincount(d.samples.labels, minlength=10).tolist() == [10] * 10
    # labels are the true labels of the drawn test images
    assert torch.equal(d.samples.labels, blobs[1].labels[d.indices])


def test_defense_set_deterministic(blobs):
    a = data.sample_defense_set(blobs[1], 5, seed=7)
    b = data.sample_defense_set(blobs[1], 5, seed=7)
    assert len(a) == 50 and torch.equal(a.indices, b.indices)


def test_defense_set_rejects_zero(blobs):
    with pytest.raises(UsageError):
        data.sample_defense_set(blobs[1], 0, seed=0)


def test_defense_set_short_class_named():
    x = torch.zeros(12, 3, 4, 4)
    y = torch.tensor([0] * 10 + [1] * 2)
    with pytest.raises(SamplingError, match="class 1"):
        data.sample_defense_set(data.ImageBatch(x, y, 2), 3, seed=0)


@settings(max_examples=15, deadline=None)
@given(per_class=st.integers(1, 20), seed=st.integers(0, 10_000))
def test_stratified_and_disjoint_from_heldout(blobs, per_class, seed):
    test = blobs[1]
    d = data.sample_defense_set(test, per_class, seed)
    assert torch.bincount(d.samples.labels, minlength=10).tolist() == [per_class] * 10
    rest = data.heldout(test, d)
    assert len(rest) + len(d) == len(test)
    assert int(d.indices.max()) < len(test)
    assert len(set(d.indices.tolist())) == len(d)


def test_render_extremes(tmp_path):
    z = torch.zeros(1, 3, 5, 5)
    o = torch.ones(1, 3, 5, 5)
    pz = data.render_png(z, tmp_path / "z")[0]
    po = data.render_png(o, tmp_path / "o")[0]
    assert pz.name == "00000.png"
    assert data.read_png(pz).max() == 0 and data.read_png(po).min() == 1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_render_roundtrip_within_quantization(tmp_path_factory, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 3, 9, 7, generator=g)
    paths = data.render_png(data.ImageBatch(x, torch.zeros(3)), tmp_path_factory.mktemp("png"))
    back = torch.stack([data.read_png(p) for p in paths])
    assert (back - x).abs().max() <= 1 / 255 + 1e-6


def test_render_grid_and_empty(tmp_path):
    out = data.render_png(torch.rand(5, 3, 4, 4), tmp_path / "g.png", grid=True, nrow=3)
    assert out[0].is_file() and data.read_png(out[0]).shape == (3, 2 * 5 + 1, 3 * 5 + 1)
    with pytest.raises(UsageError):
        data.render_png(torch.rand(0, 3, 4, 4), tmp_path / "e")


def test_render_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        data.render_png(torch.rand(1, 3, 4, 4), blocker / "sub")
