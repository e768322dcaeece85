import numpy as np
import pytest
import torch
import torch.nn as nn

from bdlab.datasets import BlobConfig, ImageBatch, make_blobs
from bdlab.models import ModelHandle


def tiny_blobs(num_classes=4, modes=4, size=8, per_class_train=40, per_class_test=16,
               seed=0, **kw):
    cfg = BlobConfig(num_classes=num_classes, modes=modes, image_size=size,
                     per_class_train=per_class_train, per_class_test=per_class_test,
                     seed=seed, **kw)
    return make_blobs(cfg)


@pytest.fixture
def blobs():
    return tiny_blobs()


@pytest.fixture
def blob_train(blobs):
    return blobs[0]


def random_batch(b=12, c=3, h=8, w=8, num_classes=4, seed=0, partitions=None):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(
        pixels=torch.rand((b, c, h, w), generator=g),
        labels=torch.randint(0, num_classes, (b,), generator=g),
        num_classes=num_classes,
        partitions=partitions,
    )


class IndexedLogits(nn.Module):
    """Stub: reads a class id k encoded in the center pixel (untouched by any
    trigger slot) as k/num_classes, returns one-hot-ish logits for it."""

    def __init__(self, num_classes, scale=10.0):
        super().__init__()
        self.num_classes = num_classes
        self.scale = scale
        self.feature_dim = num_classes
        self.dummy = nn.Parameter(torch.zeros(1))  # so optimizers have a param

    def forward(self, x):
        h, w = x.shape[-2] // 2, x.shape[-1] // 2
        k = (x[:, 0, h, w] * self.num_classes).round().long().clamp(0, self.num_classes - 1)
        return torch.nn.functional.one_hot(k, self.num_classes).float() * self.scale

    def penultimate(self, x):
        return self.forward(x)


class ConstantLogits(nn.Module):
    """Stub returning the same logit row for every input."""

    def __init__(self, row):
        super().__init__()
        self.register_buffer("row", torch.as_tensor(row, dtype=torch.float32))
        self.feature_dim = len(self.row)

    def forward(self, x):
        return self.row.expand(len(x), -1).clone()

    def penultimate(self, x):
        return self.forward(x)


class TriggerSensitive(nn.Module):
    """Stub that predicts `target` when any registered trigger patch is present
    (its color painted at its slot), else class 0."""

    def __init__(self, registry, image_hw, num_classes, target):
        super().__init__()
        self.registry = registry
        self.image_hw = image_hw
        self.num_classes = num_classes
        self.target = target
        self.feature_dim = num_classes

    def forward(self, x):
        hit = torch.zeros(len(x), dtype=torch.bool)
        for spec in self.registry:
            r0, r1, c0, c1 = spec.region(self.image_hw)
            color = torch.tensor(spec.color).view(1, 3, 1, 1)
            region = x[:, :, r0:r1, c0:c1]
            hit |= (region - color).abs().amax(dim=(1, 2, 3)) < 1e-6
        logits = torch.zeros(len(x), self.num_classes)
        logits[torch.arange(len(x)), torch.where(hit, self.target, 0)] = 10.0
        return logits

    def penultimate(self, x):
        return self.forward(x)


class PixelFeatures(nn.Module):
    """Stub whose penultimate features are the flattened pixels themselves."""

    def __init__(self, dim, num_classes=2):
        super().__init__()
        self.feature_dim = dim
        self.num_classes = num_classes

    def forward(self, x):
        return torch.zeros(len(x), self.num_classes)

    def penultimate(self, x):
        return x.reshape(len(x), -1)[:, :self.feature_dim]


def handle_for(module, num_classes, arch="stub"):
    return ModelHandle(module, arch, num_classes)


def seeded_rng(seed=0):
    return np.random.default_rng(seed)
