"""Defense harness: trigger inversion with a MAD anomaly index, STRIP entropy,
spectral-signature scoring, fine-pruning, and the adaptive partition-guess scan.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import ImageBatch
from .errors import DefenseError
from .models import ModelHandle
from .partition import Partitioner, max_overlap
from .training import TrainConfig, fine_tune

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826   # standard-normal consistency constant
ANOMALY_THRESHOLD = 2.0


# ---------------------------------------------------------------------------
# Trigger inversion (mask + pattern, L1-regularized)
# ---------------------------------------------------------------------------

@dataclass
class InversionConfig:
    steps: int = 300
    lr: float = 0.1
    lambda_init: float = 1e-2
    success_threshold: float = 0.97  # flip rate the lambda schedule targets
    patience: int = 5
    cost_up: float = 2.0
    cost_down: float = 2.0 ** 1.5
    restarts: int = 2
    seed: int = 0
    sample_cap: int = 100


@dataclass
class InversionEntry:
    target: int
    mask: torch.Tensor      # (H, W) in [0, 1]
    pattern: torch.Tensor   # (C, H, W) in [0, 1]
    l1: float
    reasr: float            # flip rate achieved by the inverted trigger


def _invert_once(model: ModelHandle, pixels: torch.Tensor, target: int,
                 cfg: InversionConfig, seed: int, lr: float) -> InversionEntry:
    g = torch.Generator().manual_seed(seed)
    h, w = pixels.shape[-2], pixels.shape[-1]
    c = pixels.shape[1]
    # start from a small mask so the optimizer grows it only where needed
    wm = (-2.0 + 0.1 * torch.randn((1, h, w), generator=g)).requires_grad_()
    wp = (0.5 * torch.randn((c, h, w), generator=g)).requires_grad_()
    opt = torch.optim.Adam([wm, wp], lr=lr)
    lam = cfg.lambda_init
    up = down = 0
    best = None
    module = model.module
    module.eval()
    labels = torch.full((len(pixels),), target, dtype=torch.int64)
    for _ in range(cfg.steps):
        mask = (torch.tanh(wm) + 1) / 2
        pattern = (torch.tanh(wp) + 1) / 2
        stamped = (1 - mask) * pixels + mask * pattern
        logits = module(stamped)
        ce = F.cross_entropy(logits, labels)
        l1 = mask.abs().sum()
        loss = ce + lam * l1
        if not torch.isfinite(loss):
            raise _Diverged()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            flip = float((logits.argmax(1) == target).float().mean())
            if flip >= cfg.success_threshold:
                up += 1
                down = 0
                if best is None or float(l1) < best[0]:
                    best = (float(l1), flip, mask.detach()[0].clone(), pattern.detach().clone())
            else:
                down += 1
                up = 0
            if up >= cfg.patience:
                lam *= cfg.cost_up
                up = 0
            if down >= cfg.patience:
                lam /= cfg.cost_down
                down = 0
    if best is None:
        with torch.no_grad():
            mask = (torch.tanh(wm) + 1) / 2
            pattern = (torch.tanh(wp) + 1) / 2
            stamped = (1 - mask) * pixels + mask * pattern
            flip = float((model.predict(stamped) == target).float().mean())
        best = (float(mask.abs().sum()), flip, mask[0].clone(), pattern.clone())
    return InversionEntry(target, best[2], best[3], best[0], best[1] * 100.0)


class _Diverged(Exception):
    pass


def invert_trigger(model: ModelHandle, samples: ImageBatch, target: int,
                   cfg: InversionConfig | None = None) -> InversionEntry:
    """Optimize x' = (1-m) * x + m * delta toward the target label with an
    L1 mask penalty; lambda adapts to hold the flip rate near the threshold.
    Best entry over `cfg.restarts` seeded restarts; a diverging restart is
    retried once at a tenth of the learning rate."""
    cfg = cfg or InversionConfig()
    pixels = samples.pixels[:cfg.sample_cap]
    if len(pixels) == 0:
        raise DefenseError("trigger inversion needs at least one sample")
    best = None
    for r in range(max(1, cfg.restarts)):
        try:
            entry = _invert_once(model, pixels, target, cfg, cfg.seed + r, cfg.lr)
        except _Diverged:
            log.warning("inversion diverged (target %d), restarting at lr/10", target)
            try:
                entry = _invert_once(model, pixels, target, cfg, cfg.seed + r, cfg.lr / 10)
            except _Diverged as exc:
                raise DefenseError(
                    f"trigger inversion diverged twice for target {target}") from exc
        if best is None or entry.l1 < best.l1:
            best = entry
    return best


# ---------------------------------------------------------------------------
# Anomaly index
# ---------------------------------------------------------------------------

def anomaly_index(norms) -> np.ndarray:
    """MAD-normalized absolute deviation of each norm from the median."""
    norms = np.asarray(norms, dtype=np.float64)
    if len(norms) < 3:
        raise DefenseError(f"anomaly index needs >= 3 labels, got {len(norms)}")
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    if mad == 0:
        log.warning("degenerate anomaly index: MAD is zero, all indices set to 0")
        return np.zeros_like(norms)
    return np.abs(norms - med) / (MAD_CONSISTENCY * mad)


def flagged_labels(norms, indices=None, threshold: float = ANOMALY_THRESHOLD) -> list[int]:
    """Positions whose index exceeds the threshold AND whose norm is below median."""
    norms = np.asarray(norms, dtype=np.float64)
    indices = anomaly_index(norms) if indices is None else np.asarray(indices)
    med = np.median(norms)
    return [i for i in range(len(norms)) if indices[i] > threshold and norms[i] < med]


@dataclass
class ScanResult:
    """One inversion sweep: per-candidate-target entries plus the MAD verdict."""

    targets: list[int]
    l1_norms: list[float]
    reasr: list[float]
    indices: list[float]
    flagged: list[int]          # target labels flagged as backdoored
    decision_index: float       # max index among below-median labels

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def scan_inversion(model: ModelHandle, source_samples: ImageBatch,
                   candidate_targets: list[int],
                   cfg: InversionConfig | None = None) -> tuple[ScanResult, list[InversionEntry]]:
    """Invert a trigger toward every candidate target using the given clean
    source-class samples, then score the L1 norms with the anomaly index."""
    if len(candidate_targets) < 3:
        raise DefenseError("inversion scan needs >= 3 candidate targets")
    entries = [invert_trigger(model, source_samples, t, cfg) for t in candidate_targets]
    norms = [e.l1 for e in entries]
    indices = anomaly_index(norms)
    med = np.median(norms)
    below = [indices[i] for i in range(len(norms)) if norms[i] < med]
    flagged = [candidate_targets[i] for i in flagged_labels(norms, indices)]
    result = ScanResult(
        targets=list(candidate_targets),
        l1_norms=[float(v) for v in norms],
        reasr=[float(e.reasr) for e in entries],
        indices=[float(v) for v in indices],
        flagged=flagged,
        decision_index=float(max(below)) if below else 0.0,
    )
    return result, entries


# ---------------------------------------------------------------------------
# STRIP
# ---------------------------------------------------------------------------

def strip_entropy(model: ModelHandle, samples: ImageBatch, overlay_pool: ImageBatch,
                  n_blends: int = 100, seed: int = 0) -> np.ndarray:
    """Per-sample mean prediction entropy under 0.5/0.5 superposition with
    seeded clean overlays, normalized by log(num classes). The pool is put in
    a canonical (lexicographic) order first, so results do not depend on how
    the caller happened to order it."""
    if len(overlay_pool) < n_blends:
        raise DefenseError(
            f"overlay pool has {len(overlay_pool)} samples, need >= {n_blends}")
    flat = overlay_pool.pixels.reshape(len(overlay_pool), -1).numpy()
    canonical = np.lexsort(flat.T[::-1])
    pool = overlay_pool.pixels[torch.from_numpy(canonical.copy())]
    g = torch.Generator().manual_seed(seed)
    norm = float(np.log(model.num_classes))
    out = np.empty(len(samples))
    for i in range(len(samples)):
        idx = torch.randperm(len(pool), generator=g)[:n_blends]
        blends = 0.5 * samples.pixels[i][None] + 0.5 * pool[idx]
        probs = torch.softmax(model.logits(blends), dim=1)
        ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(1)
        out[i] = float(ent.mean()) / norm
    return out


def histogram_overlap(a: np.ndarray, b: np.ndarray, bins: int = 20) -> float:
    """Overlap coefficient of two empirical distributions on a shared binning."""
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 1.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.minimum(ha / len(a), hb / len(b)).sum())


# ---------------------------------------------------------------------------
# Spectral signatures
# ---------------------------------------------------------------------------

def spectral_scores(model: ModelHandle, samples: ImageBatch) -> np.ndarray:
    """Squared projection of centered penultimate features onto the top right
    singular vector of the centered feature matrix."""
    if len(samples) < 2:
        raise DefenseError("spectral scoring needs >= 2 samples")
    feats = model.penultimate(samples.pixels).double()
    centered = feats - feats.mean(0, keepdim=True)
    svals = torch.linalg.svdvals(centered)
    if float(svals[0]) < 1e-9:
        return np.zeros(len(samples))
    _, _, vh = torch.linalg.svd(centered, full_matrices=False)
    proj = centered @ vh[0]
    return (proj ** 2).numpy()


# ---------------------------------------------------------------------------
# Fine-pruning
# ---------------------------------------------------------------------------

def _last_conv_and_bn(module: nn.Module) -> tuple[nn.Conv2d, nn.BatchNorm2d | None]:
    last_conv, last_bn = None, None
    prev = None
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            last_conv, last_bn = m, None
            prev = m
        elif isinstance(m, nn.BatchNorm2d) and prev is not None:
            last_bn = m
            prev = None
    if last_conv is None:
        raise DefenseError("model has no convolutional layer to prune")
    return last_conv, last_bn


def channel_activations(model: ModelHandle, samples: ImageBatch,
                        batch_size: int = 256) -> torch.Tensor:
    """Mean post-ReLU activation per channel of the last conv layer."""
    conv, _ = _last_conv_and_bn(model.module)
    sums = torch.zeros(conv.out_channels)
    count = 0

    def hook(_m, _inp, out):
        nonlocal count
        sums.add_(F.relu(out.detach()).mean(dim=(2, 3)).sum(0))
        count += out.shape[0]

    handle = conv.register_forward_hook(hook)
    try:
        model.logits(samples.pixels, batch_size)
    finally:
        handle.remove()
    return sums / max(count, 1)


def _zero_channels(module: nn.Module, channels: torch.Tensor) -> None:
    conv, bn = _last_conv_and_bn(module)
    with torch.no_grad():
        conv.weight[channels] = 0.0
        if conv.bias is not None:
            conv.bias[channels] = 0.0
        if bn is not None:
            bn.weight[channels] = 0.0
            bn.bias[channels] = 0.0
            bn.running_mean[channels] = 0.0
            bn.running_var[channels] = 1.0


def prune_channels(model: ModelHandle, clean_subset: ImageBatch,
                   fraction: float) -> tuple[ModelHandle, torch.Tensor]:
    """Zero the `fraction` least-activated channels of the last conv layer
    (floor(fraction * channels) channels). Returns (new handle, pruned indices)."""
    if fraction < 0 or fraction >= 1:
        raise DefenseError(f"prune fraction must lie in [0, 1), got {fraction}")
    means = channel_activations(model, clean_subset)
    n_prune = int(fraction * len(means))
    pruned = torch.argsort(means)[:n_prune]
    out = model.clone()
    if n_prune:
        _zero_channels(out.module, pruned)
    return out, pruned


def fine_prune(model: ModelHandle, clean_subset: ImageBatch, fraction: float,
               ft_config: TrainConfig) -> ModelHandle:
    """Prune dormant channels of the last conv layer, fine-tune on the clean
    subset, and keep the pruned channels zeroed."""
    pruned_handle, pruned = prune_channels(model, clean_subset, fraction)
    tuned = fine_tune(pruned_handle, clean_subset, ft_config)
    if len(pruned):
        _zero_channels(tuned.module, pruned)
    return tuned


# ---------------------------------------------------------------------------
# Adaptive partition-guess scan
# ---------------------------------------------------------------------------

@dataclass
class AdaptiveScanResult:
    per_partition_index: list[float]
    per_partition_flagged: list[bool]
    mo: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def adaptive_scan(model: ModelHandle, victim_samples: ImageBatch,
                  guessed: Partitioner, candidate_targets: list[int],
                  cfg: InversionConfig | None = None,
                  truth_partitions=None) -> AdaptiveScanResult:
    """Run an inversion scan per guessed partition; report each partition's
    decision index and, when ground truth is known, the maximum overlap."""
    parts = guessed.assign(victim_samples)
    indices, flags = [], []
    for p in range(guessed.n_partitions):
        sub = victim_samples.subset(parts == p)
        if len(sub) == 0:
            indices.append(0.0)
            flags.append(False)
            continue
        result, _ = scan_inversion(model, sub, candidate_targets, cfg)
        indices.append(result.decision_index)
        flags.append(result.decision_index > ANOMALY_THRESHOLD)
    mo = None
    if truth_partitions is not None:
        mo = max_overlap(parts.numpy(), np.asarray(truth_partitions))
    return AdaptiveScanResult(indices, flags, mo)


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

@dataclass
class DefenseReport:
    """Aggregated output of a defense run; sections are filled as defenses run."""

    inversion: dict | None = None          # ScanResult.to_dict()
    strip: dict | None = None              # entropy arrays + overlap coefficient
    spectral: dict | None = None           # score arrays + overlap coefficient
    mitigation: dict = field(default_factory=dict)  # method -> before/after BA+ASR
    adaptive: dict | None = None           # AdaptiveScanResult.to_dict()
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"format_version": 1, **self.__dict__}, indent=2, default=_np_safe)

    @classmethod
    def from_json(cls, text: str) -> "DefenseReport":
        doc = json.loads(text)
        doc.pop("format_version", None)
        return cls(**doc)


def _np_safe(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
