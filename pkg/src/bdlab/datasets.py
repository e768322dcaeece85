"""Dataset loading, class remapping, splitting, and augmentation.

Images are kept as float tensors in [0, 1]; normalization is applied inside
the model input layer so that triggers can be specified in raw pixel space.
"""
from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DatasetError

CIFAR10_CLASSES = 10


@dataclass
class ImageBatch:
    """A batch of images with labels and (optionally) partition assignments.

    pixels     : (B, C, H, W) float32 in [0, 1]
    labels     : (B,) int64 class ids in [0, num_classes)
    num_classes: size of the label space
    partitions : (B,) int64 partition ids, -1 where unassigned; None if never assigned
    attrs      : named per-sample integer attribute columns (e.g. generator mode ids)
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    partitions: torch.Tensor | None = None
    attrs: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DatasetError(f"pixels must be (B, C, H, W), got shape {tuple(self.pixels.shape)}")
        if len(self.labels) != len(self.pixels):
            raise DatasetError(f"labels length {len(self.labels)} != batch size {len(self.pixels)}")
        if not torch.isfinite(self.pixels).all():
            raise DatasetError("pixels contain non-finite values")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes")
        if self.partitions is not None and len(self.partitions) != len(self.pixels):
            raise DatasetError("partitions length does not match batch size")
        for name, col in self.attrs.items():
            if len(col) != len(self.pixels):
                raise DatasetError(f"attribute column {name!r} does not match batch size")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_hw(self) -> tuple[int, int]:
        return int(self.pixels.shape[-2]), int(self.pixels.shape[-1])

    def subset(self, index) -> "ImageBatch":
        """New batch restricted to `index` (tensor/array/list of positions or bool mask)."""
        if not torch.is_tensor(index):
            index = torch.as_tensor(index)
        return ImageBatch(
            pixels=self.pixels[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            partitions=None if self.partitions is None else self.partitions[index],
            attrs={k: v[index] for k, v in self.attrs.items()},
        )

    def select_class(self, class_id: int) -> "ImageBatch":
        return self.subset(self.labels == class_id)

    def with_partitions(self, partitions: torch.Tensor) -> "ImageBatch":
        return ImageBatch(self.pixels, self.labels, self.num_classes,
                          partitions=partitions.to(torch.int64), attrs=self.attrs)


@dataclass
class ClassRemap:
    """Total mapping from original class ids onto contiguous merged ids."""

    merge_map: dict[int, int]

    def __post_init__(self):
        merged = sorted(set(self.merge_map.values()))
        if merged != list(range(len(merged))):
            raise DatasetError(f"merged ids must be contiguous from 0, got {merged}")

    @property
    def num_merged(self) -> int:
        return len(set(self.merge_map.values()))

    def inverse(self) -> dict[int, list[int]]:
        """Merged id -> original ids, kept for provenance."""
        inv: dict[int, list[int]] = {}
        for orig, merged in sorted(self.merge_map.items()):
            inv.setdefault(merged, []).append(orig)
        return inv


def remap_classes(batch: ImageBatch, remap: ClassRemap) -> ImageBatch:
    """Replace labels by merged ids; pixel data is unchanged."""
    present = set(batch.labels.unique().tolist())
    missing = sorted(present - set(remap.merge_map))
    if missing:
        raise DatasetError(f"labels without a merge mapping: {missing}")
    lut = torch.full((max(remap.merge_map) + 1,), -1, dtype=torch.int64)
    for orig, merged in remap.merge_map.items():
        lut[orig] = merged
    return ImageBatch(batch.pixels, lut[batch.labels], remap.num_merged,
                      partitions=batch.partitions, attrs=batch.attrs)


@dataclass
class SplitConfig:
    """Per-class capping for desk-scale runs."""

    per_class_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.per_class_cap is not None and self.per_class_cap < 1:
            raise DatasetError(f"per-class cap must be >= 1, got {self.per_class_cap}")


def cap_per_class(batch: ImageBatch, cap: int, seed: int = 0) -> ImageBatch:
    """Keep at most `cap` samples per class (seeded choice), exactly min(cap, available)."""
    if cap < 1:
        raise DatasetError(f"per-class cap must be >= 1, got {cap}")
    g = torch.Generator().manual_seed(seed)
    keep = []
    for c in range(batch.num_classes):
        idx = (batch.labels == c).nonzero().flatten()
        if len(idx) > cap:
            idx = idx[torch.randperm(len(idx), generator=g)[:cap]]
        keep.append(idx)
    keep = torch.cat(keep)
    return batch.subset(keep.sort().values)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def _read_cifar_python(dirpath: str):
    def read_batch(name):
        path = os.path.join(dirpath, name)
        if not os.path.exists(path):
            raise DatasetError(f"missing CIFAR-10 batch file: {path}")
        try:
            with open(path, "rb") as f:
                entry = pickle.load(f, encoding="bytes")
            data = entry[b"data"].reshape(-1, 3, 32, 32)
            labels = entry.get(b"labels", entry.get(b"fine_labels"))
        except Exception as exc:
            raise DatasetError(f"corrupt CIFAR-10 batch file: {path} ({exc})") from exc
        return data, np.asarray(labels, dtype=np.int64)

    train = [read_batch(f"data_batch_{i}") for i in range(1, 6)]
    test = read_batch("test_batch")
    xs = np.concatenate([d for d, _ in train])
    ys = np.concatenate([l for _, l in train])
    return (xs, ys), test


def _read_cifar_binary(dirpath: str):
    def read_bin(name):
        path = os.path.join(dirpath, name)
        if not os.path.exists(path):
            raise DatasetError(f"missing CIFAR-10 batch file: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % 3073 != 0:
            raise DatasetError(f"corrupt CIFAR-10 binary file: {path}")
        raw = raw.reshape(-1, 3073)
        return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)

    train = [read_bin(f"data_batch_{i}.bin") for i in range(1, 6)]
    test = read_bin("test_batch.bin")
    xs = np.concatenate([d for d, _ in train])
    ys = np.concatenate([l for _, l in train])
    return (xs, ys), test


def load_cifar10(root: str) -> tuple[ImageBatch, ImageBatch]:
    """Read CIFAR-10 from `root` (python-pickle or binary layout)."""
    py_dir = os.path.join(root, "cifar-10-batches-py")
    bin_dir = os.path.join(root, "cifar-10-batches-bin")
    if os.path.isdir(py_dir):
        (xtr, ytr), (xte, yte) = _read_cifar_python(py_dir)
    elif os.path.isdir(bin_dir):
        (xtr, ytr), (xte, yte) = _read_cifar_binary(bin_dir)
    else:
        raise DatasetError(
            f"no CIFAR-10 data under {root!r} "
            f"(looked for {py_dir} and {bin_dir})")

    def to_batch(x, y):
        pixels = torch.from_numpy(np.ascontiguousarray(x)).float() / 255.0
        return ImageBatch(pixels, torch.from_numpy(y), CIFAR10_CLASSES)

    return to_batch(xtr, ytr), to_batch(xte, yte)


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

@dataclass
class BlobConfig:
    """Seconds-fast synthetic image set with per-class sub-modes.

    Each class is a smooth low-frequency pattern; each class additionally has
    `modes` sub-patterns so that the victim class carries learnable secret
    structure. All patterns are mutually orthogonal in pixel space, which
    keeps pairwise class separations, and hence defense-side difficulty,
    uniform across class pairs.
    """

    num_classes: int = 4
    modes: int = 4
    image_size: int = 8
    per_class_train: int = 100
    per_class_test: int = 25
    seed: int = 0
    noise: float = 0.12
    class_amp: float = 6.0
    mode_amp: float = 2.5
    channels: int = 3


def _orthogonal_patterns(count: int, channels: int, size: int, g: torch.Generator) -> torch.Tensor:
    """`count` smooth orthonormal pixel-space patterns, shape (count, C, size, size)."""
    grid = 4
    while channels * grid * grid < count + 4:
        grid += 1
    grid = min(grid, size)
    raw = []
    for _ in range(count):
        base = torch.randn((channels, grid, grid), generator=g)
        up = F.interpolate(base[None], size=(size, size), mode="bilinear", align_corners=False)[0]
        raw.append(up.flatten())
    q, _ = torch.linalg.qr(torch.stack(raw).T)
    return q.T.reshape(count, channels, size, size).contiguous()


def make_blobs(cfg: BlobConfig) -> tuple[ImageBatch, ImageBatch]:
    """Deterministic train/test blob batches sharing one pattern bank."""
    g = torch.Generator().manual_seed(cfg.seed)
    n, m = cfg.num_classes, cfg.modes
    pats = _orthogonal_patterns(n + n * m, cfg.channels, cfg.image_size, g)
    class_pat = pats[:n]
    mode_pat = pats[n:].reshape(n, m, cfg.channels, cfg.image_size, cfg.image_size)

    def draw(per_class: int, gen: torch.Generator) -> ImageBatch:
        xs, ys, ms = [], [], []
        for c in range(n):
            for i in range(per_class):
                mode = i % m
                img = 0.5 + cfg.class_amp * class_pat[c] + cfg.mode_amp * mode_pat[c, mode]
                img = img + cfg.noise * torch.randn(img.shape, generator=gen)
                xs.append(img.clamp(0.0, 1.0))
                ys.append(c)
                ms.append(mode)
        order = torch.randperm(len(xs), generator=gen)
        return ImageBatch(
            pixels=torch.stack(xs)[order],
            labels=torch.tensor(ys, dtype=torch.int64)[order],
            num_classes=n,
            attrs={"mode": torch.tensor(ms, dtype=torch.int64)[order]},
        )

    train = draw(cfg.per_class_train, g)
    test = draw(cfg.per_class_test, torch.Generator().manual_seed(cfg.seed + 1))
    return train, test


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

def load_dataset(name: str, root: str = "./data", per_class_cap: int | None = None,
                 seed: int = 0, **blob_kwargs) -> tuple[ImageBatch, ImageBatch]:
    """Load a named dataset; returns (train, test) with partitions unassigned.

    Names: "cifar10", "cifar10-subset" (requires per_class_cap),
    "blobs"/"synthetic-blobs" (BlobConfig fields as keyword overrides).
    """
    name = name.lower()
    if name in ("blobs", "synthetic-blobs"):
        train, test = make_blobs(BlobConfig(seed=seed, **blob_kwargs))
    elif name in ("cifar10", "cifar10-subset"):
        if name == "cifar10-subset" and per_class_cap is None:
            raise DatasetError("cifar10-subset requires per_class_cap")
        train, test = load_cifar10(root)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if per_class_cap is not None:
        train = cap_per_class(train, per_class_cap, seed=seed)
    return train, test


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_pixels(pixels: torch.Tensor, g: torch.Generator, crop_pad: int = 4,
                   flip_prob: float = 0.5, noise_std: float = 0.0) -> torch.Tensor:
    """Random-crop (zero pad) + horizontal flip + optional pixel noise on a (B,C,H,W) tensor."""
    b, _, h, w = pixels.shape
    out = pixels
    if crop_pad > 0:
        padded = F.pad(out, (crop_pad,) * 4)
        offs = torch.randint(0, 2 * crop_pad + 1, (b, 2), generator=g)
        out = torch.stack([padded[i, :, r:r + h, c:c + w] for i, (r, c) in enumerate(offs.tolist())])
    if flip_prob > 0:
        flips = torch.rand(b, generator=g) < flip_prob
        if flips.any():
            out = out.clone()
            out[flips] = torch.flip(out[flips], dims=[-1])
    if noise_std > 0:
        out = (out + noise_std * torch.randn(out.shape, generator=g)).clamp(0.0, 1.0)
    return out


def augment(batch: ImageBatch, seed: int, crop_pad: int = 4, flip_prob: float = 0.5,
            noise_std: float = 0.0) -> ImageBatch:
    """Seeded augmentation; shape, labels, partitions, and attrs are preserved."""
    if len(batch) == 0:
        raise DatasetError("cannot augment an empty batch")
    g = torch.Generator().manual_seed(seed)
    pixels = augment_pixels(batch.pixels, g, crop_pad=crop_pad, flip_prob=flip_prob,
                            noise_std=noise_std)
    return ImageBatch(pixels, batch.labels, batch.num_classes,
                      partitions=batch.partitions, attrs=batch.attrs)
