"""Patch triggers, bitmask-encoded trigger subsets, and the stamping operator.

Each partition gets one opaque rectangular patch anchored at a fixed corner or
edge-midpoint slot. Slots are disjoint by construction, so stamping a set of
triggers is order-independent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .errors import TriggerError

# Placement slots, in registry order. Corners first so small images can host
# up to four disjoint patches; edge midpoints serve partitions 5-8.
ANCHORS = ("top-left", "top-right", "bottom-left", "bottom-right",
           "top", "bottom", "left", "right")

# Maximally separated RGB primaries, one per partition index.
DEFAULT_COLORS = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
)


@dataclass(frozen=True)
class TriggerSpec:
    """One patch: geometry, color, placement, and the partition it serves."""

    index: int
    height: int
    width: int
    color: tuple[float, float, float]
    anchor: str

    def __post_init__(self):
        if self.anchor not in ANCHORS:
            raise TriggerError(f"unknown anchor {self.anchor!r}; choose from {ANCHORS}")
        if self.height < 0 or self.width < 0:
            raise TriggerError("patch extent must be non-negative")
        if any(c < 0.0 or c > 1.0 for c in self.color):
            raise TriggerError(f"color channels must lie in [0, 1], got {self.color}")

    def region(self, image_hw: tuple[int, int]) -> tuple[int, int, int, int]:
        """(r0, r1, c0, c1) pixel bounds of the patch inside an H x W image."""
        h, w = image_hw
        if self.height > h or self.width > w:
            raise TriggerError(
                f"patch {self.height}x{self.width} does not fit image {h}x{w}")
        row = {"top-left": 0, "top-right": 0, "top": 0,
               "bottom-left": h - self.height, "bottom-right": h - self.height,
               "bottom": h - self.height,
               "left": (h - self.height) // 2, "right": (h - self.height) // 2}[self.anchor]
        col = {"top-left": 0, "bottom-left": 0, "left": 0,
               "top-right": w - self.width, "bottom-right": w - self.width,
               "right": w - self.width,
               "top": (w - self.width) // 2, "bottom": (w - self.width) // 2}[self.anchor]
        return row, row + self.height, col, col + self.width


def regions_disjoint(specs: list[TriggerSpec], image_hw: tuple[int, int]) -> bool:
    boxes = [s.region(image_hw) for s in specs if s.height * s.width > 0]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            r0, r1, c0, c1 = boxes[i]
            s0, s1, d0, d1 = boxes[j]
            if r0 < s1 and s0 < r1 and c0 < d1 and d0 < c1:
                return False
    return True


def default_registry(n: int, image_hw: tuple[int, int], patch: int = 6,
                     colors=DEFAULT_COLORS) -> list[TriggerSpec]:
    """n disjoint patch triggers on the placement slots, one color per partition."""
    if n < 1 or n > len(ANCHORS):
        raise TriggerError(f"supported partition counts are 1..{len(ANCHORS)}, got {n}")
    specs = [TriggerSpec(index=i, height=patch, width=patch,
                         color=tuple(colors[i % len(colors)]), anchor=ANCHORS[i])
             for i in range(n)]
    validate_registry(specs, image_hw)
    return specs


def validate_registry(specs: list[TriggerSpec], image_hw: tuple[int, int]) -> None:
    if [s.index for s in specs] != list(range(len(specs))):
        raise TriggerError("registry indices must be 0..n-1 in order")
    for s in specs:
        s.region(image_hw)  # raises if out of bounds
    if not regions_disjoint(specs, image_hw):
        raise TriggerError(f"trigger regions overlap on a {image_hw} image")


def apply_trigger(images: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    """Overwrite the patch region with the trigger color. Accepts (C,H,W) or (B,C,H,W)."""
    single = images.ndim == 3
    x = images[None] if single else images
    r0, r1, c0, c1 = spec.region((x.shape[-2], x.shape[-1]))
    out = x.clone()
    color = torch.tensor(spec.color, dtype=out.dtype, device=out.device).view(1, -1, 1, 1)
    out[:, :, r0:r1, c0:c1] = color
    return out[0] if single else out


# --- trigger combinations as n-bit masks ------------------------------------
# Bit i set <=> trigger of partition i applied. Rendered strings put bit 0
# leftmost, so mask 0b0110 over n=4 prints as "0110" (triggers 1 and 2).

def combo_bits(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def combo_size(mask: int) -> int:
    return bin(mask).count("1")


def combo_str(mask: int, n: int) -> str:
    return "".join("1" if mask >> i & 1 else "0" for i in range(n))


def parse_combo_str(s: str) -> int:
    return sum(1 << i for i, ch in enumerate(s) if ch == "1")


def apply_combo(images: torch.Tensor, mask: int, registry: list[TriggerSpec]) -> torch.Tensor:
    """Stamp every trigger whose bit is set, in ascending index order."""
    n = len(registry)
    if mask < 0 or mask >= (1 << n):
        raise TriggerError(f"combo mask {mask:#b} out of range for {n} triggers")
    out = images
    for i in combo_bits(mask):
        out = apply_trigger(out, registry[i])
    return out if mask else images.clone()


def combo_region_mask(mask: int, registry: list[TriggerSpec],
                      image_hw: tuple[int, int]) -> torch.Tensor:
    """Boolean (H, W) map of pixels covered by the combo."""
    h, w = image_hw
    out = torch.zeros(h, w, dtype=torch.bool)
    for i in combo_bits(mask):
        r0, r1, c0, c1 = registry[i].region(image_hw)
        out[r0:r1, c0:c1] = True
    return out


# --- serialization -----------------------------------------------------------

def registry_to_json(specs: list[TriggerSpec]) -> str:
    return json.dumps({
        "format_version": 1,
        "triggers": [{"index": s.index, "height": s.height, "width": s.width,
                      "color": list(s.color), "anchor": s.anchor} for s in specs],
    }, indent=2)


def registry_from_json(text: str) -> list[TriggerSpec]:
    payload = json.loads(text)
    if payload.get("format_version") != 1:
        raise TriggerError(f"unsupported trigger registry version: {payload.get('format_version')}")
    return [TriggerSpec(index=t["index"], height=t["height"], width=t["width"],
                        color=tuple(t["color"]), anchor=t["anchor"])
            for t in payload["triggers"]]
