"""Seeded supervised training loop shared by clean, surrogate, backdoored,
and fine-tuned models; checkpointing lives in `models`."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .datasets import ImageBatch, augment_pixels
from .errors import TrainingError
from .models import ModelHandle, build_model

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    enabled: bool = False
    crop_pad: int = 2
    flip_prob: float = 0.5
    noise_std: float = 0.0


@dataclass
class TrainConfig:
    arch: str = "small-cnn"
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "sgd"          # sgd | adam
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"        # cosine | none
    seed: int = 0
    device: str = "auto"            # auto | cpu | cuda
    deterministic: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        # lr == 0 is allowed and makes training a no-op (used to probe that
        # fine-tuning leaves a model untouched)
        if self.lr is None or self.lr < 0:
            raise TrainingError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def resolve_device(self) -> torch.device:
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)

    def echo(self) -> dict:
        d = dict(self.__dict__)
        d["augment"] = dict(self.augment.__dict__)
        return d


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _apply_determinism(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def train(config: TrainConfig, epoch_batches, num_classes: int, in_channels: int = 3,
          start_from: ModelHandle | None = None) -> ModelHandle:
    """Train on a stream factory: `epoch_batches(epoch)` yields (x, y) or
    (x, y, per-sample-weight) tuples. Returns a fresh handle; any handle in
    `start_from` is copied, never mutated."""
    _apply_determinism(config)
    device = config.resolve_device()
    if start_from is not None:
        handle = start_from.clone()
        module = handle.module
    else:
        module = build_model(config.arch, num_classes, in_channels)
    if config.lr == 0:
        log.warning("lr is 0: skipping optimization, returning the model unchanged")
        module.eval()
        arch = start_from.arch if start_from is not None else config.arch
        return ModelHandle(module, arch, num_classes, in_channels)
    module.to(device).train()
    opt = _make_optimizer(config, module.parameters())
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
             if config.schedule == "cosine" else None)

    for epoch in range(config.epochs):
        module.train()
        total, batches = 0.0, 0
        for item in epoch_batches(epoch):
            if len(item) == 3:
                xb, yb, wb = item
            else:
                (xb, yb), wb = item, None
            xb, yb = xb.to(device), yb.to(device)
            opt.zero_grad()
            logits = module(xb)
            if wb is None:
                loss = F.cross_entropy(logits, yb)
            else:
                per = F.cross_entropy(logits, yb, reduction="none")
                loss = (per * wb.to(device)).mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}, batch {batches} "
                    f"(lr={config.lr}, optimizer={config.optimizer})")
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        if batches == 0:
            raise TrainingError("epoch stream yielded no batches")
        if sched is not None:
            sched.step()
        log.info("epoch %d/%d: mean loss %.4f", epoch + 1, config.epochs, total / batches)

    module.to("cpu").eval()
    arch = start_from.arch if start_from is not None else config.arch
    return ModelHandle(module, arch, num_classes, in_channels)


def clean_stream(batch: ImageBatch, config: TrainConfig):
    """Shuffled clean batches with the configured augmentation; deterministic
    per (seed, epoch)."""
    def factory(epoch: int):
        g = torch.Generator().manual_seed(config.seed * 100003 + epoch)
        order = torch.randperm(len(batch), generator=g)
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            xb = batch.pixels[idx]
            if config.augment.enabled:
                xb = augment_pixels(xb, g, crop_pad=config.augment.crop_pad,
                                    flip_prob=config.augment.flip_prob,
                                    noise_std=config.augment.noise_std)
            yield xb, batch.labels[idx]
    return factory


def train_clean(config: TrainConfig, batch: ImageBatch) -> ModelHandle:
    """Plain supervised training on a clean batch."""
    if len(batch) == 0:
        raise TrainingError("cannot train on an empty batch")
    in_channels = int(batch.pixels.shape[1])
    return train(config, clean_stream(batch, config), batch.num_classes, in_channels)


def fine_tune(model: ModelHandle, subset: ImageBatch, config: TrainConfig) -> ModelHandle:
    """Continue training a copy of `model` on a clean subset; the input handle
    is left untouched."""
    if len(subset) == 0:
        raise TrainingError("fine-tuning requires a non-empty clean subset")
    if subset.num_classes != model.num_classes:
        raise TrainingError(
            f"subset has {subset.num_classes} classes, model expects {model.num_classes}")
    return train(config, clean_stream(subset, config), model.num_classes,
                 model.in_channels, start_from=model)


def draw_clean_subset(batch: ImageBatch, fraction: float, seed: int = 0) -> ImageBatch:
    """Seeded uniform subset, e.g. the 5%-of-training-data mitigation budget."""
    n = max(1, math.floor(fraction * len(batch)))
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(len(batch), generator=g)[:n]
    return batch.subset(idx)
