import numpy as np
import pytest

from landet.attacks import AttackConfig, attack_success
from landet.datasets import (CIFAR_RECORD, DatasetFormatError, ImageSet, InsufficientDataError,
                             PairedEvalSet, build_paired_set, gen_toy_dataset, load_cifar10,
                             load_image_set, parse_cifar_records, save_image_set,
                             serialize_cifar_records)
from landet.models import predict_labels


def _record(label: int, seed: int) -> bytes:
    pixels = np.random.default_rng(seed).integers(0, 256, 3072, dtype=np.uint8)
    return bytes([label]) + pixels.tobytes()


@pytest.fixture
def two_records():
    return _record(3, 0) + _record(7, 1)


def test_cifar_fixture_parses_exactly(two_records):
    images, labels = parse_cifar_records(two_records)
    assert labels.tolist() == [3, 7]
    assert images.shape == (2, 3, 32, 32) and images.dtype == np.float32
    assert images[0, 0, 0, 0] == np.float32(two_records[1]) / np.float32(255)
    # planar order: byte 1 + 1024 is the first green pixel of record 0
    assert images[0, 1, 0, 0] == np.float32(two_records[1 + 1024]) / np.float32(255)
    assert images[1, 2, 31, 31] == np.float32(two_records[-1]) / np.float32(255)


def test_cifar_round_trip_is_bit_exact(two_records):
    assert serialize_cifar_records(*parse_cifar_records(two_records)) == two_records


@pytest.mark.parametrize("raw", [b"", b"\x00" * (CIFAR_RECORD - 1), b"\x00" * (CIFAR_RECORD + 5)])
def test_cifar_bad_length(raw):
    with pytest.raises(DatasetFormatError):
        parse_cifar_records(raw)


def test_cifar_label_out_of_range():
    with pytest.raises(DatasetFormatError):
        parse_cifar_records(_record(10, 0))


def test_cifar_directory_loading(tmp_path, two_records):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(two_records)
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)
    (tmp_path / "test_batch.bin").write_bytes(_record(1, 5))
    train, test = load_cifar10(tmp_path)
    assert len(train) == 10 and len(test) == 1
    assert set(train.ids).isdisjoint(test.ids)
    train3, _ = load_cifar10(tmp_path, train_limit=3)
    assert train3.labels.tolist() == [3, 7, 3]


def test_toy_is_deterministic():
    a, b = gen_toy_dataset(samples_per_class=5, seed=7), gen_toy_dataset(samples_per_class=5, seed=7)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert np.array_equal(x.labels, y.labels)
    c, _ = gen_toy_dataset(samples_per_class=5, seed=8)
    assert c.images.tobytes() != a[0].images.tobytes()


def test_toy_contract():
    train, test = gen_toy_dataset(class_count=6, dims=(1, 8, 12), samples_per_class=9, seed=0)
    assert train.images.shape == (54, 1, 8, 12)
    assert np.bincount(train.labels).tolist() == [9] * 6
    assert len(test) == 6 * 2
    for split in (train, test):
        assert split.images.min() >= 0 and split.images.max() <= 1
    assert set(train.ids).isdisjoint(test.ids)


@pytest.mark.parametrize("kwargs", [dict(dims=(3, 4, 16)), dict(dims=(16, 16)),
                                    dict(class_count=11), dict(samples_per_class=0)])
def test_toy_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        gen_toy_dataset(**kwargs)


def test_toy_is_learnable(toy_run):
    # default config, f1 trained for 10 epochs
    assert toy_run.report["config"]["dataset"]["samples_per_class"] == 200
    assert toy_run.train_reports["f1"].config["epochs"] == 10
    assert toy_run.report["accuracies"]["f1_test"] >= 0.95


def test_image_set_round_trip(tmp_path):
    train, _ = gen_toy_dataset(class_count=3, samples_per_class=4, seed=1)
    paths = save_image_set(train, tmp_path, "train")
    assert [p.name for p in paths] == ["train.json", "train.f32"]
    assert paths[1].stat().st_size == 4 * train.images.size
    back = load_image_set(tmp_path, "train")
    assert back.images.tobytes() == train.images.tobytes()
    assert np.array_equal(back.labels, train.labels) and np.array_equal(back.ids, train.ids)


def test_image_set_blob_length_checked(tmp_path):
    train, _ = gen_toy_dataset(class_count=2, samples_per_class=2, seed=1)
    save_image_set(train, tmp_path, "s")
    blob = tmp_path / "s.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError):
        load_image_set(tmp_path, "s")


def test_image_set_length_mismatch():
    with pytest.raises(ValueError):
        ImageSet(np.zeros((2, 1, 8, 8)), [0], [0, 1])


# ---------------------------------------------------------------------------
# paired sets


def test_paired_zero_is_empty(toy_run):
    paired = build_paired_set(toy_run.models["f1"], toy_run.data[1], "fgsm", AttackConfig(), 0)
    assert len(paired) == 0 and len(paired.benign) == 0


@pytest.fixture(scope="module")
def fgsm_pairs(toy_run):
    return build_paired_set(toy_run.models["f1"], toy_run.data[1], "fgsm", AttackConfig(), 30,
                            seed=4)


def test_paired_set_contract(toy_run, fgsm_pairs):
    f1 = toy_run.models["f1"]
    assert len(fgsm_pairs.benign) == len(fgsm_pairs.adversarial) == 30
    for ae in fgsm_pairs.adversarial:
        assert attack_success(f1, ae, ae.y_true)
    benign = fgsm_pairs.benign
    assert np.array_equal(predict_labels(f1, benign.images), benign.labels)
    sources = {ae.source_id for ae in fgsm_pairs.adversarial}
    assert sources.isdisjoint(benign.ids.tolist())
    assert len(set(benign.ids.tolist())) == 30


def test_paired_set_is_deterministic(toy_run, fgsm_pairs):
    again = build_paired_set(toy_run.models["f1"], toy_run.data[1], "fgsm", AttackConfig(), 30,
                             seed=4)
    assert again.benign.ids.tolist() == fgsm_pairs.benign.ids.tolist()
    assert all(a.perturbed.tobytes() == b.perturbed.tobytes()
               for a, b in zip(again.adversarial, fgsm_pairs.adversarial))


def test_paired_set_round_trip_rechecks(tmp_path, toy_run, fgsm_pairs):
    fgsm_pairs.save(tmp_path)
    back = PairedEvalSet.load(tmp_path)
    assert back.benign.images.tobytes() == fgsm_pairs.benign.images.tobytes()
    assert [ae.source_id for ae in back.adversarial] == \
        [ae.source_id for ae in fgsm_pairs.adversarial]
    f1 = toy_run.models["f1"]
    assert all(attack_success(f1, ae, ae.y_true) for ae in back.adversarial)


def test_paired_set_invariants_enforced(fgsm_pairs):
    with pytest.raises(ValueError):
        PairedEvalSet(fgsm_pairs.benign.head(3), fgsm_pairs.adversarial[:2])


def test_paired_set_insufficient(toy_run):
    tiny = toy_run.data[1].head(20)
    with pytest.raises(InsufficientDataError):
        build_paired_set(toy_run.models["f1"], tiny, "fgsm", AttackConfig(), 50)
