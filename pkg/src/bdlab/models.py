"""Classifier architectures, the trained-model handle, and checkpoint I/O."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .datasets import ImageBatch
from .errors import CheckpointError

CHECKPOINT_VERSION = 1


class InputNorm(nn.Module):
    """Input normalization layer; images reach the model in raw [0, 1] space."""

    def __init__(self, mean=0.5, std=0.5):
        super().__init__()
        self.register_buffer("mean", torch.tensor(float(mean)))
        self.register_buffer("std", torch.tensor(float(std)))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_block(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class SmallCNN(nn.Module):
    """~290k-parameter CNN: 3 conv blocks (2 convs each) + linear head."""

    def __init__(self, num_classes: int, width: int = 32, in_channels: int = 3):
        super().__init__()
        w = width
        self.norm = InputNorm()
        self.features = nn.Sequential(
            *_conv_block(in_channels, w), *_conv_block(w, w), nn.MaxPool2d(2),
            *_conv_block(w, 2 * w), *_conv_block(2 * w, 2 * w), nn.MaxPool2d(2),
            *_conv_block(2 * w, 4 * w), *_conv_block(4 * w, 4 * w),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * w, num_classes)
        self.feature_dim = 4 * w

    def forward(self, x):
        return self.head(self.features(self.norm(x)))

    def penultimate(self, x):
        return self.features(self.norm(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    """CIFAR-style ResNet (3x3 stem, no max-pool)."""

    def __init__(self, num_classes: int, blocks=(2, 2, 2, 2), width: int = 64,
                 in_channels: int = 3):
        super().__init__()
        self.norm = InputNorm()
        w = width
        layers = [nn.Conv2d(in_channels, w, 3, padding=1, bias=False),
                  nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
        cin = w
        for stage, n_blocks in enumerate(blocks):
            cout = w * (2 ** stage)
            for b in range(n_blocks):
                layers.append(BasicBlock(cin, cout, stride=2 if (b == 0 and stage > 0) else 1))
                cin = cout
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)
        self.feature_dim = cin

    def forward(self, x):
        return self.head(self.features(self.norm(x)))

    def penultimate(self, x):
        return self.features(self.norm(x))


class VGG(nn.Module):
    """CIFAR-style VGG11 with batch norm."""

    PLAN = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")

    def __init__(self, num_classes: int, in_channels: int = 3):
        super().__init__()
        self.norm = InputNorm()
        layers = []
        cin = in_channels
        for item in self.PLAN:
            if item == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += _conv_block(cin, item)
                cin = item
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)
        self.feature_dim = cin

    def forward(self, x):
        return self.head(self.features(self.norm(x)))

    def penultimate(self, x):
        return self.features(self.norm(x))


ARCHITECTURES = {
    "small-cnn": lambda n, c=3: SmallCNN(n, width=32, in_channels=c),
    "resnet-small": lambda n, c=3: ResNet(n, blocks=(1, 1, 1), width=16, in_channels=c),
    "resnet18": lambda n, c=3: ResNet(n, blocks=(2, 2, 2, 2), width=64, in_channels=c),
    "vgg11": lambda n, c=3: VGG(n, in_channels=c),
}


def build_model(arch: str, num_classes: int, in_channels: int = 3) -> nn.Module:
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](num_classes, in_channels)


@dataclass
class ModelHandle:
    """Opaque trained-parameter container. Treat as immutable after training."""

    module: nn.Module
    arch: str
    num_classes: int
    in_channels: int = 3

    @torch.no_grad()
    def logits(self, pixels: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
        self.module.eval()
        outs = [self.module(pixels[s:s + batch_size])
                for s in range(0, len(pixels), batch_size)]
        return torch.cat(outs) if outs else torch.empty(0, self.num_classes)

    @torch.no_grad()
    def predict(self, pixels: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
        return self.logits(pixels, batch_size).argmax(dim=1)

    @torch.no_grad()
    def penultimate(self, pixels: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
        self.module.eval()
        outs = [self.module.penultimate(pixels[s:s + batch_size])
                for s in range(0, len(pixels), batch_size)]
        return torch.cat(outs) if outs else torch.empty(0, self.module.feature_dim)

    def predict_batch(self, batch: ImageBatch, batch_size: int = 512) -> torch.Tensor:
        return self.predict(batch.pixels, batch_size)

    def clone(self) -> "ModelHandle":
        import copy
        return ModelHandle(copy.deepcopy(self.module), self.arch, self.num_classes,
                           self.in_channels)


def save_checkpoint(handle: ModelHandle, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": handle.arch,
        "num_classes": handle.num_classes,
        "in_channels": handle.in_channels,
        "state_dict": handle.module.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, arch: str | None = None) -> ModelHandle:
    """Rebuild a handle from disk; round-trips eval outputs bit-identically."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"not a model checkpoint: {path}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    if arch is not None and payload["arch"] != arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint has {payload['arch']!r}, expected {arch!r}")
    module = build_model(payload["arch"], payload["num_classes"], payload["in_channels"])
    module.load_state_dict(payload["state_dict"])
    module.eval()
    return ModelHandle(module, payload["arch"], payload["num_classes"], payload["in_channels"])
