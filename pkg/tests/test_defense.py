import numpy as np
import pytest
import torch
import torch.nn as nn

from bdlab.datasets import ImageBatch
from bdlab.defense import (AdaptiveScanResult, DefenseReport, InversionConfig,
                           adaptive_scan, anomaly_index, channel_activations,
                           fine_prune, flagged_labels, histogram_overlap,
                           invert_trigger, prune_channels, scan_inversion,
                           spectral_scores, strip_entropy)
from bdlab.errors import DefenseError
from bdlab.models import build_model
from bdlab.partition import ExplicitPartitioner
from bdlab.training import TrainConfig

from conftest import ConstantLogits, PixelFeatures, handle_for, random_batch


# ---------------------------------------------------------------------------
# Anomaly index
# ---------------------------------------------------------------------------

def test_anomaly_index_hand_case():
    # median 11, MAD 1 -> index of the 3-entry is 8 / 1.4826 = 5.3959...
    idx = anomaly_index([10, 12, 11, 13, 3])
    assert idx[4] == pytest.approx(5.396, abs=1e-3)
    assert idx[2] == pytest.approx(0.0)


def test_anomaly_index_all_equal_is_zero(caplog):
    import logging
    with caplog.at_level(logging.WARNING):
        idx = anomaly_index([5.0, 5.0, 5.0, 5.0])
    assert np.array_equal(idx, np.zeros(4))
    assert any("MAD" in r.message for r in caplog.records)


def test_anomaly_index_needs_three_labels():
    with pytest.raises(DefenseError):
        anomaly_index([1.0, 2.0])


def test_anomaly_index_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        norms = rng.uniform(1, 50, size=7)
        for c in (0.1, 3.0, 250.0):
            assert np.allclose(anomaly_index(norms), anomaly_index(c * norms))


def test_flagged_labels_only_below_median():
    norms = [10, 12, 11, 13, 3, 30]
    flags = flagged_labels(norms)
    assert 4 in flags            # small outlier flagged
    assert 5 not in flags        # large outlier is not a backdoor signature


# ---------------------------------------------------------------------------
# STRIP
# ---------------------------------------------------------------------------

def overlay_pool(n=40, seed=1):
    return random_batch(b=n, seed=seed)


def test_strip_uniform_softmax_entropy_is_one():
    handle = handle_for(ConstantLogits([0.0, 0.0, 0.0, 0.0]), 4)
    ent = strip_entropy(handle, random_batch(b=3), overlay_pool(), n_blends=10, seed=0)
    assert np.allclose(ent, 1.0)


def test_strip_one_hot_softmax_entropy_is_zero():
    handle = handle_for(ConstantLogits([1000.0, 0.0, 0.0, 0.0]), 4)
    ent = strip_entropy(handle, random_batch(b=3), overlay_pool(), n_blends=10, seed=0)
    assert np.allclose(ent, 0.0, atol=1e-6)


def test_strip_requires_enough_overlays():
    handle = handle_for(ConstantLogits([0.0, 0.0]), 2)
    with pytest.raises(DefenseError, match="overlay pool"):
        strip_entropy(handle, random_batch(b=2), overlay_pool(n=5), n_blends=10)


class BlendSensitive(nn.Module):
    """Logits depend on the blended pixels, so overlay choice matters."""

    def __init__(self):
        super().__init__()
        self.feature_dim = 3

    def forward(self, x):
        s = x.mean(dim=(1, 2, 3), keepdim=False)
        return torch.stack([s, 2 * s, 3 * s], dim=1)

    def penultimate(self, x):
        return self.forward(x)


def test_strip_invariant_to_pool_ordering():
    handle = handle_for(BlendSensitive(), 3)
    pool = overlay_pool(n=30, seed=5)
    perm = torch.randperm(len(pool), generator=torch.Generator().manual_seed(9))
    shuffled = pool.subset(perm)
    samples = random_batch(b=4, seed=7)
    a = strip_entropy(handle, samples, pool, n_blends=12, seed=3)
    b = strip_entropy(handle, samples, shuffled, n_blends=12, seed=3)
    assert np.allclose(a, b)


def test_histogram_overlap_bounds():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, 500)
    assert histogram_overlap(a, a) == pytest.approx(1.0)
    assert histogram_overlap(a, a + 100.0) == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# Spectral signatures
# ---------------------------------------------------------------------------

def features_batch(rows):
    """Batch whose flattened pixels equal the given feature rows."""
    rows = torch.as_tensor(rows, dtype=torch.float32)
    b, d = rows.shape
    px = torch.zeros(b, 1, 1, d)
    px[:, 0, 0, :] = rows
    return ImageBatch(px.clamp(-1e6, 1e6), torch.zeros(b, dtype=torch.int64), 2), d


def test_spectral_hand_case_one_axis():
    batch, d = features_batch([[-1.0], [-1.0], [1.0], [1.0]])
    handle = handle_for(PixelFeatures(d), 2)
    scores = spectral_scores(handle, batch)
    assert np.allclose(scores, 1.0)


def test_spectral_identical_features_zero():
    batch, d = features_batch([[2.0, 3.0]] * 6)
    handle = handle_for(PixelFeatures(d), 2)
    assert np.allclose(spectral_scores(handle, batch), 0.0)


def test_spectral_energy_identity_vs_svd_oracle():
    rng = np.random.default_rng(3)
    for trial in range(5):
        rows = rng.normal(0, 1, (20, 8))
        batch, d = features_batch(rows)
        handle = handle_for(PixelFeatures(d), 2)
        scores = spectral_scores(handle, batch)
        centered = rows - rows.mean(0)
        top_sv = np.linalg.svd(centered, compute_uv=False)[0]
        assert scores.sum() == pytest.approx(top_sv ** 2, rel=1e-6)


def test_spectral_needs_two_samples():
    batch, d = features_batch([[1.0, 2.0]])
    with pytest.raises(DefenseError):
        spectral_scores(handle_for(PixelFeatures(d), 2), batch)


# ---------------------------------------------------------------------------
# Fine-pruning
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    module = build_model("small-cnn", 3)
    return handle_for(module, 3, arch="small-cnn")


def test_prune_zeroes_exact_channel_count(small_model):
    clean = random_batch(b=16, h=8, w=8, num_classes=3)
    pruned, idx = prune_channels(small_model, clean, 0.25)
    conv_channels = 128  # last conv width of small-cnn
    assert len(idx) == int(0.25 * conv_channels)


def test_pruned_channels_output_zero(small_model):
    clean = random_batch(b=8, h=8, w=8, num_classes=3)
    pruned, idx = prune_channels(small_model, clean, 0.5)
    convs = [m for m in pruned.module.modules() if isinstance(m, nn.Conv2d)]
    bns = [m for m in pruned.module.modules() if isinstance(m, nn.BatchNorm2d)]
    captured = {}
    handles = [bns[-1].register_forward_hook(
        lambda m, i, o: captured.__setitem__("out", o.detach()))]
    try:
        pruned.logits(torch.rand(4, 3, 8, 8))
    finally:
        for h in handles:
            h.remove()
    assert captured["out"][:, idx].abs().max() == pytest.approx(0.0)


def test_fine_prune_fraction_zero_equals_fine_tune(small_model):
    from bdlab.training import fine_tune
    clean = random_batch(b=32, h=8, w=8, num_classes=3, seed=2)
    cfg = TrainConfig(epochs=1, batch_size=16, lr=0.01, seed=4)
    a = fine_prune(small_model, clean, 0.0, cfg)
    b = fine_tune(small_model, clean, cfg)
    for k, v in a.module.state_dict().items():
        assert torch.equal(v, b.module.state_dict()[k]), k


def test_fine_prune_keeps_channels_dead_after_tuning(small_model):
    clean = random_batch(b=32, h=8, w=8, num_classes=3, seed=2)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, seed=4)
    tuned = fine_prune(small_model, clean, 0.25, cfg)
    _, idx = prune_channels(small_model, clean, 0.25)
    convs = [m for m in tuned.module.modules() if isinstance(m, nn.Conv2d)]
    assert convs[-1].weight[idx].abs().max() == pytest.approx(0.0)


def test_fine_prune_rejects_full_fraction(small_model):
    clean = random_batch(b=8, h=8, w=8, num_classes=3)
    with pytest.raises(DefenseError):
        fine_prune(small_model, clean, 1.0, TrainConfig(epochs=1))


def test_channel_activations_shape(small_model):
    clean = random_batch(b=8, h=8, w=8, num_classes=3)
    acts = channel_activations(small_model, clean)
    assert acts.shape == (128,)
    assert (acts >= 0).all()


# ---------------------------------------------------------------------------
# Inversion
# ---------------------------------------------------------------------------

class RegionBackdoor(nn.Module):
    """Differentiable stub: the target logit is driven by brightness inside a
    3x3 region, mimicking a planted patch shortcut."""

    def __init__(self, num_classes, target, region=(0, 3, 0, 3)):
        super().__init__()
        self.num_classes = num_classes
        self.target = target
        self.region = region
        self.feature_dim = num_classes

    def forward(self, x):
        r0, r1, c0, c1 = self.region
        drive = x[:, :, r0:r1, c0:c1].mean(dim=(1, 2, 3))
        logits = torch.zeros(len(x), self.num_classes, dtype=x.dtype)
        logits = logits + torch.nn.functional.one_hot(
            torch.tensor(0), self.num_classes).to(x.dtype) * 2.0
        logits = logits.clone()
        logits[:, self.target] = 20.0 * drive - 8.0
        return logits

    def penultimate(self, x):
        return self.forward(x)


def test_inversion_recovers_small_region_shortcut():
    handle = handle_for(RegionBackdoor(4, target=2), 4)
    samples = random_batch(b=24, h=8, w=8, num_classes=4, seed=6)
    cfg = InversionConfig(steps=150, restarts=1, seed=0)
    entry = invert_trigger(handle, samples, 2, cfg)
    assert entry.reasr >= 97.0
    assert entry.l1 < 12.0  # region is 9 px; a clean flip would need far more


def test_inversion_zero_steps_returns_initialization():
    handle = handle_for(ConstantLogits([5.0, 0.0, 0.0]), 3)
    samples = random_batch(b=4, num_classes=3)
    entry = invert_trigger(handle, samples, 1, InversionConfig(steps=0, restarts=1))
    assert entry.reasr == pytest.approx(0.0)  # constant model never flips
    assert entry.mask.shape == (8, 8)


def test_inversion_requires_samples():
    handle = handle_for(ConstantLogits([1.0, 0.0]), 2)
    empty = random_batch(b=2).subset(torch.zeros(2, dtype=torch.bool))
    with pytest.raises(DefenseError):
        invert_trigger(handle, empty, 1, InversionConfig(steps=1))


def test_scan_needs_three_candidates():
    handle = handle_for(ConstantLogits([1.0, 0.0]), 2)
    with pytest.raises(DefenseError, match=">= 3"):
        scan_inversion(handle, random_batch(b=2), [0, 1], InversionConfig(steps=1))


def test_scan_flags_planted_target():
    handle = handle_for(RegionBackdoor(5, target=3), 5)
    samples = random_batch(b=16, h=8, w=8, num_classes=5, seed=8)
    cfg = InversionConfig(steps=120, restarts=1, seed=1)
    result, entries = scan_inversion(handle, samples, [1, 2, 3, 4], cfg)
    assert len(entries) == 4
    assert result.l1_norms[result.targets.index(3)] == min(result.l1_norms)


# ---------------------------------------------------------------------------
# Adaptive scan
# ---------------------------------------------------------------------------

def test_adaptive_scan_reports_per_partition_and_mo():
    handle = handle_for(RegionBackdoor(4, target=2), 4)
    modes = [0, 1, 2, 3] * 6
    batch = ImageBatch(torch.rand(24, 3, 8, 8), torch.zeros(24, dtype=torch.int64), 4,
                       attrs={"mode": torch.tensor(modes)})
    guessed = ExplicitPartitioner(["mode"], [4])
    cfg = InversionConfig(steps=30, restarts=1)
    result = adaptive_scan(handle, batch, guessed, [1, 2, 3], cfg,
                           truth_partitions=np.array(modes))
    assert len(result.per_partition_index) == 4
    assert result.mo == pytest.approx(100.0)
    no_truth = adaptive_scan(handle, batch, guessed, [1, 2, 3], cfg)
    assert no_truth.mo is None


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def test_defense_report_round_trip():
    report = DefenseReport(inversion={"decision_index": 1.5, "targets": [1, 2, 3]},
                           strip={"overlap": 0.8},
                           mitigation={"fine-tune": {"asr_before": 90.0, "asr_after": 40.0,
                                                     "ba_before": 99.0, "ba_after": 98.0}},
                           metadata={"run": "x"})
    back = DefenseReport.from_json(report.to_json())
    assert back.inversion["decision_index"] == 1.5
    assert back.mitigation["fine-tune"]["asr_after"] == 40.0
