"""Attack-effectiveness metrics: benign accuracy, matched-trigger ASR, the full
combination-by-partition ASR matrix with its aggregates, and label specificity.

All rates are percentages in [0, 100].
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import ImageBatch
from .errors import BdlabError
from .models import ModelHandle
from .partition import Partitioner
from .triggers import TriggerSpec, apply_combo, combo_size, combo_str

MAX_MATRIX_PARTITIONS = 8


def benign_accuracy(model: ModelHandle, test: ImageBatch) -> float:
    """Top-1 accuracy on clean data, in percent."""
    if len(test) == 0:
        raise BdlabError("benign accuracy needs a non-empty test set")
    pred = model.predict_batch(test)
    return float((pred == test.labels).float().mean() * 100.0)


def _victim_by_partition(batch: ImageBatch, partitioner: Partitioner) -> tuple:
    parts = batch.partitions
    if parts is None:
        parts = partitioner.assign(batch)
    return batch.pixels, parts


def asr(model: ModelHandle, victim_batch: ImageBatch, partitioner: Partitioner,
        registry: list[TriggerSpec], target: int) -> float:
    """Fraction of victim samples predicted as the target after stamping each
    sample's matched partition trigger."""
    if len(victim_batch) == 0:
        raise BdlabError("ASR needs victim-class samples")
    pixels, parts = _victim_by_partition(victim_batch, partitioner)
    hits = 0
    for p in range(partitioner.n_partitions):
        sel = parts == p
        if not sel.any():
            continue
        stamped = apply_combo(pixels[sel], 1 << p, registry)
        hits += int((model.predict(stamped) == target).sum())
    return hits / len(victim_batch) * 100.0


@dataclass
class AsrMatrix:
    """(2^n - 1) x n table: row = non-empty combo mask (ascending), column =
    source partition; cell = percent flipped to the target. NaN marks empty
    partitions (excluded from aggregates)."""

    values: np.ndarray
    n_partitions: int

    @property
    def masks(self) -> list[int]:
        return list(range(1, 2 ** self.n_partitions))

    def row_labels(self) -> list[str]:
        return [combo_str(m, self.n_partitions) for m in self.masks]

    def cell(self, mask: int, partition: int) -> float:
        return float(self.values[mask - 1, partition])

    def matched_cells(self) -> np.ndarray:
        return np.array([self.cell(1 << p, p) for p in range(self.n_partitions)])

    def _collect(self, keep) -> np.ndarray:
        out = [self.values[m - 1, p]
               for m in self.masks for p in range(self.n_partitions)
               if keep(m, p) and np.isfinite(self.values[m - 1, p])]
        return np.asarray(out)

    def asr_matched(self) -> float:
        cells = self.matched_cells()
        return float(np.nanmean(cells))

    def asr_other(self) -> tuple[float, float]:
        """Mean/std over all cells except matched singletons."""
        cells = self._collect(lambda m, p: m != (1 << p))
        return float(cells.mean()), float(cells.std())

    def asr_indi(self) -> tuple[float, float]:
        """Mean/std over wrong single-trigger cells."""
        cells = self._collect(lambda m, p: combo_size(m) == 1 and m != (1 << p))
        return float(cells.mean()), float(cells.std())

    def asr_comb(self) -> tuple[float, float]:
        """Mean/std over multi-trigger rows (all partitions)."""
        cells = self._collect(lambda m, p: combo_size(m) >= 2)
        return float(cells.mean()), float(cells.std())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["combo"] + [f"p{p}" for p in range(self.n_partitions)])
        for m in self.masks:
            writer.writerow([combo_str(m, self.n_partitions)]
                            + [f"{v:.4f}" if np.isfinite(v) else ""
                               for v in self.values[m - 1]])
        return buf.getvalue()

    def to_lists(self):
        return [[None if not np.isfinite(v) else float(v) for v in row]
                for row in self.values]

    @classmethod
    def from_lists(cls, rows, n_partitions: int) -> "AsrMatrix":
        arr = np.array([[np.nan if v is None else v for v in row] for row in rows])
        return cls(arr, n_partitions)


def asr_matrix(model: ModelHandle, victim_batch: ImageBatch, partitioner: Partitioner,
               registry: list[TriggerSpec], target: int) -> AsrMatrix:
    """Evaluate every non-empty trigger combination against every partition."""
    n = partitioner.n_partitions
    if n > MAX_MATRIX_PARTITIONS:
        raise BdlabError(f"ASR matrix limited to n <= {MAX_MATRIX_PARTITIONS} partitions")
    if len(victim_batch) == 0:
        raise BdlabError("ASR matrix needs victim-class samples")
    pixels, parts = _victim_by_partition(victim_batch, partitioner)
    per_part = [pixels[parts == p] for p in range(n)]
    values = np.full((2 ** n - 1, n), np.nan)
    for mask in range(1, 2 ** n):
        for p in range(n):
            if len(per_part[p]) == 0:
                continue
            stamped = apply_combo(per_part[p], mask, registry)
            pred = model.predict(stamped)
            values[mask - 1, p] = float((pred == target).float().mean() * 100.0)
    return AsrMatrix(values, n)


def label_specificity(model: ModelHandle, test: ImageBatch, partitioner: Partitioner,
                      registry: list[TriggerSpec], victim: int, target: int) -> float:
    """ASR when matched-partition triggers are stamped on images of the other
    classes (victim and target classes excluded from the pool)."""
    pool = test.subset((test.labels != victim) & (test.labels != target))
    if len(pool) == 0:
        return 0.0
    parts = partitioner.assign(pool)
    hits = 0
    for p in range(partitioner.n_partitions):
        sel = parts == p
        if not sel.any():
            continue
        stamped = apply_combo(pool.pixels[sel], 1 << p, registry)
        hits += int((model.predict(stamped) == target).sum())
    return hits / len(pool) * 100.0


@dataclass
class AttackReport:
    """Structured result of one attack run."""

    ba: float
    asr: float
    asr_other: tuple[float, float]
    asr_indi: tuple[float, float]
    asr_comb: tuple[float, float]
    asr_victim: float
    asr_other_label: float
    matrix: AsrMatrix
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "format_version": 1,
            "ba": self.ba,
            "asr": self.asr,
            "asr_other": list(self.asr_other),
            "asr_indi": list(self.asr_indi),
            "asr_comb": list(self.asr_comb),
            "asr_victim": self.asr_victim,
            "asr_other_label": self.asr_other_label,
            "asr_matrix": {"n_partitions": self.matrix.n_partitions,
                           "rows": self.matrix.to_lists()},
            "metadata": self.metadata,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        doc = json.loads(text)
        matrix = AsrMatrix.from_lists(doc["asr_matrix"]["rows"],
                                      doc["asr_matrix"]["n_partitions"])
        return cls(ba=doc["ba"], asr=doc["asr"],
                   asr_other=tuple(doc["asr_other"]), asr_indi=tuple(doc["asr_indi"]),
                   asr_comb=tuple(doc["asr_comb"]), asr_victim=doc["asr_victim"],
                   asr_other_label=doc["asr_other_label"], matrix=matrix,
                   metadata=doc.get("metadata", {}))


def build_report(model: ModelHandle, test: ImageBatch, partitioner: Partitioner,
                 registry: list[TriggerSpec], victim: int, target: int,
                 metadata: dict | None = None) -> AttackReport:
    """Run the full metric battery on a test set."""
    victim_batch = test.select_class(victim)
    matrix = asr_matrix(model, victim_batch, partitioner, registry, target)
    matched = matrix.asr_matched()
    meta = dict(metadata or {})
    meta.setdefault("timestamp", time.strftime("%Y-%m-%dT%H:%M:%S"))
    meta.setdefault("asr_convention", "all victim test samples, no clean-correct filter")
    return AttackReport(
        ba=benign_accuracy(model, test),
        asr=matched,
        asr_other=matrix.asr_other(),
        asr_indi=matrix.asr_indi(),
        asr_comb=matrix.asr_comb(),
        asr_victim=matched,
        asr_other_label=label_specificity(model, test, partitioner, registry, victim, target),
        matrix=matrix,
        metadata=meta,
    )


def save_matrix_heatmap(matrix: AsrMatrix, path: str, title: str = "ASR matrix") -> None:
    """Render the matrix as a heatmap image (combo rows x partition columns)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 0.4 * len(matrix.masks) + 1.5))
    shown = np.ma.masked_invalid(matrix.values)
    im = ax.imshow(shown, vmin=0, vmax=100, cmap="viridis", aspect="auto")
    ax.set_xticks(range(matrix.n_partitions),
                  [f"p{p}" for p in range(matrix.n_partitions)])
    ax.set_yticks(range(len(matrix.masks)), matrix.row_labels(), fontsize=7)
    ax.set_xlabel("source partition")
    ax.set_ylabel("trigger combination")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="ASR (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
