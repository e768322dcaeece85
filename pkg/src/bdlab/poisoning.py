"""Poisoned-batch assembly for the three training strategies.

Strategies:
  simple       clean + matched-trigger victim samples labeled with the target
  adversarial  simple + wrong-single-trigger victim samples labeled victim
  focus        simple + per-sample pairs {wrong single T_j, pair [T_i, T_j]}
               labeled victim, + matched-trigger non-victim samples keeping
               their original labels

Sample makers return descriptors (source index, combo mask, label, weight);
pixels are stamped only when batches are materialized, after any augmentation,
so triggers always sit at their canonical positions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .datasets import ImageBatch
from .errors import PoisonError
from .partition import Partitioner
from .triggers import TriggerSpec, apply_combo

log = logging.getLogger(__name__)

STRATEGIES = ("simple", "adversarial", "focus")


@dataclass
class LossWeights:
    benign: float = 1.0
    attack: float = 1.0
    label_specific: float = 1.0
    dynamic: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise PoisonError(f"loss weight {name} must be >= 0, got {v}")


@dataclass
class PoisonPlan:
    strategy: str
    victim: int
    target: int
    n_partitions: int
    weights: LossWeights = field(default_factory=LossWeights)
    attack_fraction: float = 0.1
    focus_fraction: float = 0.1        # focus sources per batch; each yields 2 samples
    label_fraction: float = 0.1
    adversarial_fraction: float | None = None  # defaults to attack_fraction

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PoisonError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.victim == self.target:
            raise PoisonError("victim and target classes must differ")
        if self.n_partitions < 1:
            raise PoisonError("n_partitions must be >= 1")
        if self.strategy in ("adversarial", "focus") and self.n_partitions < 2:
            raise PoisonError(f"strategy {self.strategy!r} needs n >= 2 partitions")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("attack_fraction", "focus_fraction", "label_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise PoisonError(f"{name} must lie in [0, 1]")
        if self.poison_fraction_total() > 1.0:
            raise PoisonError(
                f"poison fractions sum to {self.poison_fraction_total():.2f} > 1 per batch")

    def adv_fraction(self) -> float:
        return self.attack_fraction if self.adversarial_fraction is None else self.adversarial_fraction

    def poison_fraction_total(self) -> float:
        if self.strategy == "simple":
            return self.attack_fraction
        if self.strategy == "adversarial":
            return self.attack_fraction + self.adv_fraction()
        return self.attack_fraction + 2 * self.focus_fraction + self.label_fraction


@dataclass(frozen=True)
class PoisonSample:
    """One poisoned training sample: stamp `combo` on batch[source_index], use `label`."""

    source_index: int
    combo: int
    label: int
    weight: float
    kind: str  # attack | adversarial | focus-single | focus-pair | label-specific


def _require_partitions(batch: ImageBatch, n: int) -> torch.Tensor:
    if batch.partitions is None:
        raise PoisonError("batch has no partition assignments")
    bad = ((batch.partitions < 0) | (batch.partitions >= n)).nonzero().flatten()
    if len(bad):
        raise PoisonError(f"unassigned/invalid partition for samples {bad.tolist()[:10]}")
    return batch.partitions


def make_attack_samples(batch: ImageBatch, registry: list[TriggerSpec],
                        plan: PoisonPlan) -> list[PoisonSample]:
    """Each victim sample stamped with its own partition trigger, labeled target."""
    parts = _require_partitions(batch, plan.n_partitions)
    w = plan.weights.attack
    return [PoisonSample(i, 1 << int(p), plan.target, w, "attack")
            for i, p in enumerate(parts.tolist())]


def make_adversarial_samples(batch: ImageBatch, registry: list[TriggerSpec],
                             plan: PoisonPlan, seed: int = 0) -> list[PoisonSample]:
    """Each victim sample stamped with one uniformly drawn non-matching trigger,
    labeled victim."""
    if plan.n_partitions < 2:
        raise PoisonError("adversarial samples need n >= 2 (no non-matching trigger exists)")
    parts = _require_partitions(batch, plan.n_partitions)
    g = torch.Generator().manual_seed(seed)
    w = plan.weights.dynamic
    out = []
    draws = torch.randint(0, plan.n_partitions - 1, (len(batch),), generator=g)
    for i, (p, d) in enumerate(zip(parts.tolist(), draws.tolist())):
        j = d if d < p else d + 1  # uniform over partitions != p
        out.append(PoisonSample(i, 1 << j, plan.victim, w, "adversarial"))
    return out


def make_focus_samples(batch: ImageBatch, registry: list[TriggerSpec],
                       plan: PoisonPlan, seed: int = 0) -> list[PoisonSample]:
    """Per victim sample in partition i, two samples labeled victim: wrong single
    {T_j} and pair {T_i, T_j}. The j draws are stratified per partition so the
    whole sweep touches exactly 2(n-1) distinct combos per partition."""
    if plan.n_partitions < 2:
        raise PoisonError("focus samples need n >= 2 partitions")
    parts = _require_partitions(batch, plan.n_partitions)
    g = torch.Generator().manual_seed(seed)
    w = plan.weights.dynamic
    by_partition: dict[int, list[int]] = {}
    for i, p in enumerate(parts.tolist()):
        by_partition.setdefault(p, []).append(i)
    out = []
    for p, members in sorted(by_partition.items()):
        wrong = [j for j in range(plan.n_partitions) if j != p]
        js: list[int] = []
        while len(js) < len(members):
            order = torch.randperm(len(wrong), generator=g)
            js.extend(wrong[k] for k in order.tolist())
        for i, j in zip(members, js):
            out.append(PoisonSample(i, 1 << j, plan.victim, w, "focus-single"))
            out.append(PoisonSample(i, (1 << p) | (1 << j), plan.victim, w, "focus-pair"))
    return out


def make_label_specific_samples(batch: ImageBatch, partitioner: Partitioner,
                                registry: list[TriggerSpec],
                                plan: PoisonPlan) -> list[PoisonSample]:
    """Non-victim samples get their assigned partition's trigger and keep their
    original labels."""
    if len(batch) == 0:
        return []
    parts = batch.partitions if batch.partitions is not None else partitioner.assign(batch)
    w = plan.weights.label_specific
    return [PoisonSample(i, 1 << int(p), int(lab), w, "label-specific")
            for i, (p, lab) in enumerate(zip(parts.tolist(), batch.labels.tolist()))]


# ---------------------------------------------------------------------------
# Epoch assembly
# ---------------------------------------------------------------------------

def _draw_sources(pool: torch.Tensor, count: int, g: torch.Generator,
                  what: str) -> torch.Tensor:
    if count <= 0:
        return pool[:0]
    if len(pool) == 0:
        raise PoisonError(f"no samples available for {what}")
    if count > len(pool):
        log.warning("%s pool has %d samples, clamping requested %d", what, len(pool), count)
        count = len(pool)
    return pool[torch.randperm(len(pool), generator=g)[:count]]


def build_epoch(plan: PoisonPlan, train: ImageBatch, partitioner: Partitioner,
                registry: list[TriggerSpec], seed: int, batch_size: int = 128,
                augment_fn=None):
    """One epoch of mixed batches: a shuffled pass over all clean samples, with
    per-batch poison counts set by the plan fractions. Yields (x, y, weight)."""
    if len(registry) != plan.n_partitions:
        raise PoisonError(
            f"registry has {len(registry)} triggers, plan expects {plan.n_partitions}")
    g = torch.Generator().manual_seed(seed)
    total = len(train)
    if train.partitions is None:
        train = train.with_partitions(partitioner.assign(train))

    n_attack_pb = round(plan.attack_fraction * batch_size)
    n_adv_pb = round(plan.adv_fraction() * batch_size) if plan.strategy == "adversarial" else 0
    n_focus_pb = round(plan.focus_fraction * batch_size) if plan.strategy == "focus" else 0
    n_label_pb = round(plan.label_fraction * batch_size) if plan.strategy == "focus" else 0
    poison_pb = n_attack_pb + n_adv_pb + 2 * n_focus_pb + n_label_pb
    clean_pb = batch_size - poison_pb
    if clean_pb < 1:
        raise PoisonError("poison fractions leave no room for clean samples per batch")
    n_batches = math.ceil(total / clean_pb)

    victim_pool = (train.labels == plan.victim).nonzero().flatten()
    nonvictim_pool = ((train.labels != plan.victim)
                      & (train.labels != plan.target)).nonzero().flatten()

    def epoch_records(pool, count_pb, maker, what):
        srcs = _draw_sources(pool, count_pb * n_batches, g, what)
        if len(srcs) == 0:
            return []
        sub = train.subset(srcs)
        samples = maker(sub)
        return [(int(srcs[s.source_index]), s.combo, s.label, s.weight) for s in samples]

    # per-kind record lists paired with their per-batch counts; note a focus
    # source emits two samples, so its per-batch sample count is 2 * n_focus_pb
    kind_lists = []
    if n_attack_pb:
        kind_lists.append((epoch_records(
            victim_pool, n_attack_pb,
            lambda sub: make_attack_samples(sub, registry, plan), "attack poisoning"),
            n_attack_pb))
    if n_adv_pb:
        kind_lists.append((epoch_records(
            victim_pool, n_adv_pb,
            lambda sub: make_adversarial_samples(sub, registry, plan,
                                                 seed=int(torch.randint(1 << 31, (1,), generator=g))),
            "adversarial poisoning"), n_adv_pb))
    if n_focus_pb:
        kind_lists.append((epoch_records(
            victim_pool, n_focus_pb,
            lambda sub: make_focus_samples(sub, registry, plan,
                                           seed=int(torch.randint(1 << 31, (1,), generator=g))),
            "trigger focusing"), 2 * n_focus_pb))
    if n_label_pb:
        kind_lists.append((epoch_records(
            nonvictim_pool, n_label_pb,
            lambda sub: make_label_specific_samples(sub, partitioner, registry, plan),
            "label-specific poisoning"), n_label_pb))

    clean_order = torch.randperm(total, generator=g)
    benign_w = plan.weights.benign
    cursors = [0] * len(kind_lists)
    for b in range(n_batches):
        clean_idx = clean_order[b * clean_pb:(b + 1) * clean_pb]
        if len(clean_idx) == 0:
            break
        batch_records = [(int(i), 0, int(train.labels[i]), benign_w) for i in clean_idx]
        for k, (group, count_pb) in enumerate(kind_lists):
            take = min(count_pb, len(group) - cursors[k])
            batch_records += group[cursors[k]:cursors[k] + take]
            cursors[k] += take
        order = torch.randperm(len(batch_records), generator=g)
        batch_records = [batch_records[i] for i in order]

        positions = torch.tensor([r[0] for r in batch_records])
        xb = train.pixels[positions]
        if augment_fn is not None:
            xb = augment_fn(xb, g)
        for row, (_, combo, _, _) in enumerate(batch_records):
            if combo:
                xb[row] = apply_combo(xb[row], combo, registry)
        yb = torch.tensor([r[2] for r in batch_records], dtype=torch.int64)
        wb = torch.tensor([r[3] for r in batch_records], dtype=torch.float32)
        yield xb, yb, wb
