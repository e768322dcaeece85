import os
import pickle

import numpy as np
import pytest
import torch

from bdlab.datasets import (BlobConfig, ClassRemap, ImageBatch, augment, cap_per_class,
                            load_cifar10, load_dataset, make_blobs, remap_classes)
from bdlab.errors import DatasetError

from conftest import random_batch, tiny_blobs


# --- ImageBatch invariants ---------------------------------------------------

def test_batch_rejects_nonfinite_pixels():
    px = torch.ones(2, 3, 4, 4)
    px[0, 0, 0, 0] = float("nan")
    with pytest.raises(DatasetError, match="non-finite"):
        ImageBatch(px, torch.zeros(2, dtype=torch.int64), 2)


def test_batch_rejects_label_out_of_range():
    with pytest.raises(DatasetError, match="out of range"):
        ImageBatch(torch.ones(2, 3, 4, 4), torch.tensor([0, 5]), 3)


def test_batch_rejects_length_mismatch():
    with pytest.raises(DatasetError):
        ImageBatch(torch.ones(2, 3, 4, 4), torch.zeros(3, dtype=torch.int64), 2)
    with pytest.raises(DatasetError):
        ImageBatch(torch.ones(2, 3, 4, 4), torch.zeros(2, dtype=torch.int64), 2,
                   partitions=torch.zeros(5, dtype=torch.int64))


def test_subset_and_select_class():
    batch = random_batch(b=20, num_classes=4, seed=3)
    sub = batch.select_class(2)
    assert (sub.labels == 2).all()
    assert len(batch.subset(batch.labels == 2)) == len(sub)


# --- blobs --------------------------------------------------------------------

def test_blobs_shapes_and_attrs():
    train, test = tiny_blobs(num_classes=4, modes=3, size=8, per_class_train=30,
                             per_class_test=9)
    assert train.pixels.shape == (120, 3, 8, 8)
    assert test.pixels.shape == (36, 3, 8, 8)
    assert train.num_classes == 4
    assert set(train.attrs["mode"].tolist()) == {0, 1, 2}
    assert train.pixels.min() >= 0 and train.pixels.max() <= 1
    for c in range(4):
        assert int((train.labels == c).sum()) == 30


def test_blobs_deterministic():
    a, _ = tiny_blobs(seed=5)
    b, _ = tiny_blobs(seed=5)
    assert torch.equal(a.pixels, b.pixels)
    assert torch.equal(a.labels, b.labels)
    c, _ = tiny_blobs(seed=6)
    assert not torch.equal(a.pixels, c.pixels)


def test_blobs_train_test_share_patterns_but_differ():
    train, test = tiny_blobs(seed=1)
    # same class means should be close across splits (shared pattern bank)
    for c in range(train.num_classes):
        mtr = train.pixels[train.labels == c].mean(0)
        mte = test.pixels[test.labels == c].mean(0)
        assert (mtr - mte).abs().mean() < 0.1
    assert not torch.equal(train.pixels[:len(test)], test.pixels)


# --- per-class caps -----------------------------------------------------------

def test_cap_per_class_exact_counts():
    batch = random_batch(b=40, num_classes=4, seed=7)
    capped = cap_per_class(batch, cap=5, seed=0)
    for c in range(4):
        available = int((batch.labels == c).sum())
        assert int((capped.labels == c).sum()) == min(5, available)


def test_cap_rejects_bad_value():
    with pytest.raises(DatasetError):
        cap_per_class(random_batch(), cap=0)


# --- class remapping ----------------------------------------------------------

def test_remap_identity_is_idempotent():
    batch = random_batch(b=16, num_classes=4)
    ident = ClassRemap({i: i for i in range(4)})
    once = remap_classes(batch, ident)
    twice = remap_classes(once, ident)
    assert torch.equal(once.labels, batch.labels)
    assert torch.equal(twice.labels, once.labels)


def test_remap_merges_classes():
    # four source classes folded into one, analogous to merging bird breeds
    batch = random_batch(b=40, num_classes=8, seed=2)
    merge = {i: 0 if i < 4 else i - 3 for i in range(8)}
    remap = ClassRemap(merge)
    out = remap_classes(batch, remap)
    assert out.num_classes == 5  # class count dropped by 3
    assert torch.equal(out.pixels, batch.pixels)
    assert remap.inverse()[0] == [0, 1, 2, 3]


def test_remap_rejects_gap_in_merged_ids():
    with pytest.raises(DatasetError, match="contiguous"):
        ClassRemap({0: 0, 1: 2})


def test_remap_rejects_unmapped_label():
    batch = random_batch(b=16, num_classes=4)
    with pytest.raises(DatasetError, match="without a merge mapping"):
        remap_classes(batch, ClassRemap({0: 0, 1: 1}))


# --- augmentation ---------------------------------------------------------

def test_augment_noop_settings_keep_pixels():
    batch = random_batch(b=8)
    out = augment(batch, seed=0, crop_pad=0, flip_prob=0.0, noise_std=0.0)
    assert torch.equal(out.pixels, batch.pixels)


def test_augment_deterministic_given_seed():
    batch = random_batch(b=8)
    a = augment(batch, seed=11, crop_pad=2, flip_prob=0.5, noise_std=0.05)
    b = augment(batch, seed=11, crop_pad=2, flip_prob=0.5, noise_std=0.05)
    assert torch.equal(a.pixels, b.pixels)
    c = augment(batch, seed=12, crop_pad=2, flip_prob=0.5, noise_std=0.05)
    assert not torch.equal(a.pixels, c.pixels)


def test_augment_preserves_shape_labels_partitions():
    parts = torch.randint(0, 4, (8,))
    batch = random_batch(b=8, h=32, w=32, partitions=parts)
    for seed in range(100):
        out = augment(batch, seed=seed, crop_pad=4)
        assert out.pixels.shape == batch.pixels.shape
    assert torch.equal(out.labels, batch.labels)
    assert torch.equal(out.partitions, parts)


def test_augment_empty_batch_errors():
    empty = random_batch(b=4).subset(torch.zeros(4, dtype=torch.bool))
    with pytest.raises(DatasetError):
        augment(empty, seed=0)


# --- CIFAR reader ------------------------------------------------------------

def _write_fake_cifar(root, rows_per_batch=4):
    d = os.path.join(root, "cifar-10-batches-py")
    os.makedirs(d)
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        entry = {
            b"data": rng.integers(0, 256, (rows_per_batch, 3072), dtype=np.uint8),
            b"labels": rng.integers(0, 10, rows_per_batch).tolist(),
        }
        with open(os.path.join(d, name), "wb") as f:
            pickle.dump(entry, f)
    return d


def test_cifar_python_layout(tmp_path):
    _write_fake_cifar(tmp_path)
    train, test = load_cifar10(str(tmp_path))
    assert train.pixels.shape == (20, 3, 32, 32)
    assert test.pixels.shape == (4, 3, 32, 32)
    assert train.num_classes == 10
    assert 0.0 <= train.pixels.min() and train.pixels.max() <= 1.0


def test_cifar_missing_names_path(tmp_path):
    with pytest.raises(DatasetError, match=str(tmp_path)):
        load_cifar10(str(tmp_path))


def test_cifar_corrupt_file(tmp_path):
    d = _write_fake_cifar(tmp_path)
    with open(os.path.join(d, "data_batch_3"), "wb") as f:
        f.write(b"garbage")
    with pytest.raises(DatasetError, match="data_batch_3"):
        load_cifar10(str(tmp_path))


def test_load_dataset_dispatch(tmp_path):
    _write_fake_cifar(tmp_path, rows_per_batch=6)
    train, _ = load_dataset("cifar10", root=str(tmp_path))
    assert len(train) == 30
    capped, _ = load_dataset("cifar10", root=str(tmp_path), per_class_cap=1)
    for c in range(10):
        assert int((capped.labels == c).sum()) <= 1
    with pytest.raises(DatasetError):
        load_dataset("cifar10-subset", root=str(tmp_path))
    with pytest.raises(DatasetError):
        load_dataset("imagenet")


def test_load_dataset_blobs_kwargs():
    train, test = load_dataset("synthetic-blobs", num_classes=3, modes=2,
                               image_size=8, per_class_train=10, per_class_test=4)
    assert train.num_classes == 3
    assert len(test) == 12
