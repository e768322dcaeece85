import csv
import io
import json
import os

import numpy as np
import pytest
import torch

from bdlab.datasets import ImageBatch
from bdlab.errors import BdlabError
from bdlab.metrics import (AsrMatrix, AttackReport, asr, asr_matrix, benign_accuracy,
                           build_report, label_specificity, save_matrix_heatmap)
from bdlab.partition import ExplicitPartitioner
from bdlab.triggers import apply_combo, combo_size, default_registry

from conftest import ConstantLogits, IndexedLogits, TriggerSensitive, handle_for

HW = (8, 8)
N_PART = 4


def encoded_batch(labels, num_classes, partitions=None, modes=None):
    """Pixels encode the label in the center pixel for the IndexedLogits stub."""
    labels = torch.as_tensor(labels)
    g = torch.Generator().manual_seed(0)
    px = torch.rand((len(labels), 3, *HW), generator=g) * 0.3 + 0.35
    px[:, 0, HW[0] // 2, HW[1] // 2] = labels.float() / num_classes
    attrs = {} if modes is None else {"mode": torch.as_tensor(modes)}
    return ImageBatch(px, labels, num_classes,
                      partitions=None if partitions is None else torch.as_tensor(partitions),
                      attrs=attrs)


@pytest.fixture
def registry():
    return default_registry(N_PART, HW, patch=2)


@pytest.fixture
def partitioner():
    return ExplicitPartitioner(["mode"], [N_PART])


def test_perfect_model_100(registry):
    batch = encoded_batch(list(range(4)) * 5, 4)
    handle = handle_for(IndexedLogits(4), 4)
    assert benign_accuracy(handle, batch) == pytest.approx(100.0)


def test_constant_model_chance_level():
    # argmax always lands on class 0: accuracy equals the class-0 share (10%)
    batch = encoded_batch(list(range(10)) * 3, 10)
    handle = handle_for(ConstantLogits([1.0] + [0.0] * 9), 10)
    assert benign_accuracy(handle, batch) == pytest.approx(10.0)


def test_benign_accuracy_empty_set_errors():
    handle = handle_for(ConstantLogits([1.0, 0.0]), 2)
    empty = encoded_batch([0], 2).subset(torch.zeros(1, dtype=torch.bool))
    with pytest.raises(BdlabError):
        benign_accuracy(handle, empty)


def test_asr_trigger_sensitive_model(registry, partitioner):
    target = 3
    victim_batch = encoded_batch([0] * 8, 4, modes=[0, 1, 2, 3] * 2)
    handle = handle_for(TriggerSensitive(registry, HW, 4, target), 4)
    assert asr(handle, victim_batch, partitioner, registry, target) == pytest.approx(100.0)


def test_asr_clean_model_near_zero(registry, partitioner):
    victim_batch = encoded_batch([0] * 8, 4, modes=[0, 1, 2, 3] * 2)
    handle = handle_for(IndexedLogits(4), 4)  # always predicts the encoded label 0
    assert asr(handle, victim_batch, partitioner, registry, 3) == pytest.approx(0.0)


def test_asr_requires_samples(registry, partitioner):
    handle = handle_for(IndexedLogits(4), 4)
    empty = encoded_batch([0], 4, modes=[0]).subset(torch.zeros(1, dtype=torch.bool))
    with pytest.raises(BdlabError):
        asr(handle, empty, partitioner, registry, 3)


class ComboHash(torch.nn.Module):
    """Deterministic pseudo-random predictions driven by stamped pixels."""

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = num_classes

    def forward(self, x):
        h = (x * 255).to(torch.int64).sum(dim=(1, 2, 3)) % self.num_classes
        return torch.nn.functional.one_hot(h, self.num_classes).float()

    def penultimate(self, x):
        return self.forward(x)


def test_matrix_shape_and_row_order(registry, partitioner):
    victim = encoded_batch([0] * 16, 4, modes=[0, 1, 2, 3] * 4)
    handle = handle_for(ComboHash(4), 4)
    m = asr_matrix(handle, victim, partitioner, registry, target=3)
    assert m.values.shape == (2 ** N_PART - 1, N_PART)
    assert m.masks == list(range(1, 16))
    assert m.row_labels()[0] == "1000"  # mask 1 = trigger 0 only


def test_matrix_matches_bruteforce_recompute(registry, partitioner):
    victim = encoded_batch([0] * 20, 4, modes=[0, 1, 2, 3] * 5)
    handle = handle_for(ComboHash(4), 4)
    target = 3
    m = asr_matrix(handle, victim, partitioner, registry, target)
    parts = partitioner.assign(victim)
    for mask in range(1, 16):
        for p in range(N_PART):
            pix = victim.pixels[parts == p].clone()
            for i in range(N_PART):  # independent stamping route
                if mask >> i & 1:
                    r0, r1, c0, c1 = registry[i].region(HW)
                    pix[:, :, r0:r1, c0:c1] = torch.tensor(registry[i].color).view(3, 1, 1)
            pred = handle.predict(pix)
            expect = float((pred == target).float().mean() * 100)
            assert m.cell(mask, p) == pytest.approx(expect, abs=0)


def test_matrix_aggregates_recomputable(registry, partitioner):
    victim = encoded_batch([0] * 24, 4, modes=([0] * 6 + [1] * 6 + [2] * 6 + [3] * 6))
    handle = handle_for(ComboHash(4), 4)
    m = asr_matrix(handle, victim, partitioner, registry, target=2)
    vals = m.values
    matched = [vals[(1 << p) - 1, p] for p in range(4)]
    assert m.asr_matched() == pytest.approx(np.mean(matched))
    others = [vals[r, p] for r in range(15) for p in range(4) if (r + 1) != (1 << p)]
    assert m.asr_other() == (pytest.approx(np.mean(others)), pytest.approx(np.std(others)))
    indi = [vals[r, p] for r in range(15) for p in range(4)
            if combo_size(r + 1) == 1 and (r + 1) != (1 << p)]
    assert m.asr_indi()[0] == pytest.approx(np.mean(indi))
    comb = [vals[r, p] for r in range(15) for p in range(4) if combo_size(r + 1) >= 2]
    assert m.asr_comb()[0] == pytest.approx(np.mean(comb))


def test_asr_equals_matched_diagonal(registry, partitioner):
    victim = encoded_batch([0] * 16, 4, modes=[0, 1, 2, 3] * 4)
    handle = handle_for(ComboHash(4), 4)
    m = asr_matrix(handle, victim, partitioner, registry, target=1)
    direct = asr(handle, victim, partitioner, registry, target=1)
    # the matched-singleton average weighted by partition sizes equals direct ASR
    # here partitions are balanced, so the plain mean matches
    assert m.asr_matched() == pytest.approx(direct)


def test_matrix_empty_partition_excluded(registry, partitioner):
    victim = encoded_batch([0] * 9, 4, modes=[0, 1, 2] * 3)  # partition 3 empty
    handle = handle_for(ComboHash(4), 4)
    m = asr_matrix(handle, victim, partitioner, registry, target=3)
    assert np.isnan(m.values[:, 3]).all()
    for agg in (m.asr_other(), m.asr_indi(), m.asr_comb()):
        assert np.isfinite(agg).all()


def test_matrix_rejects_too_many_partitions():
    reg = default_registry(4, HW, patch=2)
    part = ExplicitPartitioner(["a", "b"], [3, 3])  # 9 partitions
    victim = encoded_batch([0] * 4, 4, modes=None)
    handle = handle_for(ComboHash(4), 4)
    with pytest.raises(BdlabError, match="n <= 8"):
        asr_matrix(handle, victim, part, reg, 3)


def test_label_specificity_excludes_victim_and_target(registry, partitioner):
    target, victim = 3, 0
    # pool: labels 1 and 2 only after exclusion
    batch = encoded_batch([0, 1, 2, 3, 1, 2], 4, modes=[0, 1, 2, 3, 0, 1])
    flip_all = handle_for(TriggerSensitive(registry, HW, 4, target), 4)
    assert label_specificity(flip_all, batch, partitioner, registry, victim, target) \
        == pytest.approx(100.0)
    clean = handle_for(IndexedLogits(4), 4)
    assert label_specificity(clean, batch, partitioner, registry, victim, target) \
        == pytest.approx(0.0)


def test_label_specificity_empty_pool_is_zero(registry, partitioner):
    batch = encoded_batch([0, 3], 4, modes=[0, 1])
    handle = handle_for(IndexedLogits(4), 4)
    assert label_specificity(handle, batch, partitioner, registry, 0, 3) == 0.0


def test_report_round_trip_and_csv(tmp_path, registry, partitioner):
    test_b = encoded_batch(list(range(4)) * 8, 4, modes=[0, 1, 2, 3] * 8)
    handle = handle_for(TriggerSensitive(registry, HW, 4, 3), 4)
    report = build_report(handle, test_b, partitioner, registry, victim=0, target=3,
                          metadata={"strategy": "stub"})
    doc = json.loads(report.to_json())
    assert doc["format_version"] == 1
    back = AttackReport.from_json(report.to_json())
    assert back.ba == pytest.approx(report.ba)
    assert np.allclose(back.matrix.values, report.matrix.values, equal_nan=True)
    assert back.metadata["strategy"] == "stub"
    assert 0 <= report.asr_other_label <= 100

    rows = list(csv.reader(io.StringIO(report.matrix.to_csv())))
    assert rows[0] == ["combo", "p0", "p1", "p2", "p3"]
    assert len(rows) == 1 + 15

    path = os.path.join(tmp_path, "matrix.png")
    save_matrix_heatmap(report.matrix, path)
    assert os.path.getsize(path) > 0


def test_rates_within_bounds(registry, partitioner):
    test_b = encoded_batch(list(range(4)) * 6, 4, modes=[0, 1, 2, 3] * 6)
    handle = handle_for(ComboHash(4), 4)
    report = build_report(handle, test_b, partitioner, registry, victim=0, target=3)
    vals = [report.ba, report.asr, report.asr_other[0], report.asr_indi[0],
            report.asr_comb[0], report.asr_other_label]
    assert all(0.0 <= v <= 100.0 for v in vals)
