import os

import numpy as np
import pytest
import torch

from sgad.config import CIFAR10_MEAN, CIFAR10_STD, DatasetSpec, NetworkConfig
from sgad.data import load_cifar, load_dataset, parse_cifar_records, synth_dataset
from sgad.errors import IngestionError


def write_records(path, labels, images, label_bytes=1):
    """Independent writer: label byte(s) then 3072 channel-major pixel bytes per record."""
    with open(path, "wb") as fh:
        for lab, img in zip(labels, images):
            if label_bytes == 2:
                fh.write(bytes([lab % 20, lab]))
            else:
                fh.write(bytes([lab]))
            fh.write(bytes(img.reshape(-1).tolist()))


@pytest.fixture
def fixture_images():
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)


def test_first_record_round_trip(tmp_path, fixture_images):
    path = tmp_path / "test_batch.bin"
    write_records(path, [3, 1, 4, 1, 5], fixture_images)
    images, labels = parse_cifar_records(path.read_bytes(), 1, 10)
    assert labels.tolist() == [3, 1, 4, 1, 5]
    assert np.array_equal(images[0], fixture_images[0])
    # pixel (c=1, y=2, x=3) sits at byte 1 + 1*1024 + 2*32 + 3 of the first record
    raw = path.read_bytes()
    assert images[0, 1, 2, 3] == raw[1 + 1024 + 64 + 3]

    ds = load_cifar(DatasetSpec(source="cifar10-binary", path=str(path), n_test=0), "test")
    expected = (fixture_images[0, 0, 0, 0] / 255.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0]
    assert float(ds.images[0, 0, 0, 0]) == pytest.approx(expected, rel=1e-6)
    assert ds.images.shape == (5, 3, 32, 32) and ds.labels.dtype == torch.int64


def test_cifar100_uses_fine_label(tmp_path, fixture_images):
    path = tmp_path / "test.bin"
    write_records(path, [99, 42, 0, 7, 63], fixture_images, label_bytes=2)
    ds = load_cifar(DatasetSpec(source="cifar100-binary", path=str(path), n_test=0), "test")
    assert ds.labels.tolist() == [99, 42, 0, 7, 63]


def test_zero_byte_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(IngestionError) as exc:
        load_cifar(DatasetSpec(source="cifar10-binary", path=str(path)), "test")
    assert exc.value.offset == 0


def test_truncated_file(tmp_path, fixture_images):
    path = tmp_path / "t.bin"
    write_records(path, [0, 1, 2], fixture_images[:3])
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(IngestionError) as exc:
        parse_cifar_records(path.read_bytes(), 1, 10)
    assert exc.value.offset == 2 * 3073


def test_label_out_of_range(tmp_path, fixture_images):
    path = tmp_path / "t.bin"
    write_records(path, [0, 1, 12], fixture_images[:3])
    with pytest.raises(IngestionError) as exc:
        parse_cifar_records(path.read_bytes(), 1, 10)
    assert exc.value.offset == 2 * 3073


def test_directory_layout(tmp_path, fixture_images):
    for i in range(1, 6):
        write_records(tmp_path / f"data_batch_{i}.bin", [i % 10] * 2, fixture_images[:2])
    write_records(tmp_path / "test_batch.bin", [0], fixture_images[:1])
    spec = DatasetSpec(source="cifar10-binary", path=str(tmp_path), n_train=0, n_test=0)
    train, test = load_dataset(spec, NetworkConfig())
    assert len(train) == 10 and len(test) == 1


@pytest.mark.skipif(not os.environ.get("SGAD_DATA_DIR") or
                    not os.path.exists(os.path.join(os.environ.get("SGAD_DATA_DIR", ""), "data_batch_1.bin")),
                    reason="real CIFAR-10 binaries not available")
def test_real_cifar10_train():
    ds = load_cifar(DatasetSpec(source="cifar10-binary", n_train=0), "train")
    assert len(ds) == 50_000
    assert sorted(ds.labels.unique().tolist()) == list(range(10))


def test_synth_is_seeded():
    a = synth_dataset(3, 50, 4, 0.5, image_size=8)
    b = synth_dataset(3, 50, 4, 0.5, image_size=8)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert np.array_equal(a.hard, b.hard)
    c = synth_dataset(4, 50, 4, 0.5, image_size=8)
    assert not torch.equal(a.images, c.images)


def test_synth_noise_free_is_linearly_separable():
    ds = synth_dataset(0, 300, 10, 0.5, image_size=8, noise=0.0)
    x = ds.images.reshape(300, -1).double().numpy()
    x = np.hstack([x, np.ones((300, 1))])
    targets = np.eye(10)[ds.labels.numpy()]
    w, *_ = np.linalg.lstsq(x, targets, rcond=None)
    assert ((x @ w).argmax(1) == ds.labels.numpy()).mean() == 1.0


def test_synth_hard_fraction_and_shared_templates():
    tr = synth_dataset(1, 2000, 10, 0.3, image_size=8, split="train")
    te = synth_dataset(1, 2000, 10, 0.3, image_size=8, split="test")
    assert abs(tr.hard.mean() - 0.3) < 0.05
    # class means of the two splits come from the same templates
    for k in range(3):
        mtr = tr.images[(tr.labels == k) & torch.from_numpy(~tr.hard)].mean(0)
        mte = te.images[(te.labels == k) & torch.from_numpy(~te.hard)].mean(0)
        assert torch.corrcoef(torch.stack([mtr.flatten(), mte.flatten()]))[0, 1] > 0.9
