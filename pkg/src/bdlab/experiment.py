"""End-to-end pipelines behind the CLI commands: attack, defend, report.

Run-directory layout:
    config.resolved.yaml
    checkpoints/attacked.pt          (plus encoder.pt when one was trained)
    partitioner/partitioner.json     (plus surrogate.pt / encoder.pt)
    triggers/registry.json
    reports/attack_report.json, asr_matrix.csv, defense_report.json
    plots/asr_matrix.png, strip_entropy.png, inverted_mask_*.png
"""
from __future__ import annotations

import csv
import glob
import logging
import os

import numpy as np
import torch

from . import defense as dfs
from .config import (dataset_num_classes, make_inversion_config, make_poison_plan,
                     make_train_config, resolved_yaml, validate_config)
from .datasets import ClassRemap, ImageBatch, augment_pixels, load_dataset, remap_classes
from .errors import BdlabError, ConfigError, PartitionError
from .metrics import AttackReport, build_report, save_matrix_heatmap
from .models import ModelHandle, load_checkpoint, save_checkpoint
from .partition import (ExplicitPartitioner, ClassPartitioner, GMMPartitioner,
                        KMeansPartitioner, ModelEncoder, Partitioner, PixelEncoder,
                        SurrogatePartitioner, balance_partitions, build_surrogate_dataset,
                        extract_features, gmm_fit, kmeans_fit, load_partitioner,
                        save_partitioner)
from .poisoning import build_epoch
from .training import TrainConfig, draw_clean_subset, fine_tune, train, train_clean
from .triggers import (default_registry, registry_from_json, registry_to_json)

log = logging.getLogger(__name__)


def load_experiment_dataset(doc: dict) -> tuple[ImageBatch, ImageBatch]:
    ds = doc["dataset"]
    name = str(ds["name"]).lower()
    kwargs = {}
    if name in ("blobs", "synthetic-blobs"):
        kwargs = {k: ds[k] for k in ("num_classes", "modes", "image_size",
                                     "per_class_train", "per_class_test",
                                     "noise", "class_amp", "mode_amp")}
        kwargs["seed"] = int(doc["seed"])
        train_b, test_b = load_dataset(name, per_class_cap=ds.get("per_class_cap"), **kwargs)
    else:
        train_b, test_b = load_dataset(name, root=ds["root"],
                                       per_class_cap=ds.get("per_class_cap"),
                                       seed=int(doc["seed"]))
    if ds.get("remap"):
        remap = ClassRemap({int(k): int(v) for k, v in ds["remap"].items()})
        train_b, test_b = remap_classes(train_b, remap), remap_classes(test_b, remap)
    return train_b, test_b


# ---------------------------------------------------------------------------
# Partitioner construction
# ---------------------------------------------------------------------------

def _build_encoder(doc: dict, train_b: ImageBatch, run_dir: str | None):
    spec = doc["partition"]["encoder"]
    if spec == "pixels":
        return PixelEncoder()
    if spec == "clean-model":
        cfg = make_train_config(doc, epochs=int(doc["partition"]["encoder_epochs"]),
                                seed=int(doc["partition"]["seed"]) + 17)
        log.info("training clean encoder model (%d epochs)", cfg.epochs)
        handle = train_clean(cfg, train_b)
        if run_dir:
            save_checkpoint(handle, os.path.join(run_dir, "checkpoints", "encoder.pt"))
        return ModelEncoder(handle)
    # anything else is a checkpoint path
    return ModelEncoder(load_checkpoint(spec))


def build_partitioner(doc: dict, train_b: ImageBatch,
                      run_dir: str | None = None) -> Partitioner:
    part = doc["partition"]
    kind = part["kind"]
    n = int(part["n"])
    victim = int(doc["poison"]["victim"])
    seed = int(part["seed"])

    if kind == "explicit":
        selected = list(part["attributes"])
        cards = []
        for name in selected:
            if name not in train_b.attrs:
                raise PartitionError(
                    f"dataset provides no attribute {name!r} for explicit partitioning")
            cards.append(int(train_b.attrs[name].max()) + 1)
        p = ExplicitPartitioner(selected, cards)
        if p.n_partitions != n:
            raise ConfigError(
                f"explicit attributes give {p.n_partitions} partitions, config says {n}")
        return p

    if kind == "class":
        return ClassPartitioner.contiguous(train_b.num_classes, n)

    encoder = _build_encoder(doc, train_b, run_dir)
    victim_batch = train_b.select_class(victim)
    feats = extract_features(encoder, victim_batch)

    if kind == "kmeans":
        km = kmeans_fit(feats, n, seed=seed)
        return KMeansPartitioner(encoder, km.centroids)
    if kind == "gmm":
        gm = gmm_fit(feats, n, seed=seed)
        return GMMPartitioner(encoder, gm)

    # surrogate: cluster the victim features, relabel, train a same-structure model
    cluster_kind = part.get("cluster", "kmeans")
    if cluster_kind == "kmeans":
        km = kmeans_fit(feats, n, seed=seed)
        clustering: Partitioner = KMeansPartitioner(encoder, km.centroids)
    elif cluster_kind == "gmm":
        clustering = GMMPartitioner(encoder, gmm_fit(feats, n, seed=seed))
    else:
        raise ConfigError(f"unknown surrogate clustering {cluster_kind!r}")
    relabeled, scheme = build_surrogate_dataset(train_b, victim, clustering)
    sur_epochs = part.get("surrogate_epochs") or doc["train"]["epochs"]
    cfg = make_train_config(doc, epochs=int(sur_epochs), seed=seed + 31)
    log.info("training surrogate partitioner (%d epochs, %d classes)",
             cfg.epochs, scheme.num_classes)
    handle = train(cfg, _clean_factory(relabeled, cfg), scheme.num_classes,
                   int(relabeled.pixels.shape[1]))
    return SurrogatePartitioner(handle, scheme)


def _clean_factory(batch: ImageBatch, cfg: TrainConfig):
    from .training import clean_stream
    return clean_stream(batch, cfg)


# ---------------------------------------------------------------------------
# Attack pipeline
# ---------------------------------------------------------------------------

def run_attack(doc: dict, run_dir: str | None = None) -> tuple[ModelHandle, AttackReport]:
    validate_config(doc)
    run_dir = run_dir or doc["output"]["run_dir"]
    for sub in ("checkpoints", "partitioner", "triggers", "reports", "plots"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)

    train_b, test_b = load_experiment_dataset(doc)
    plan = make_poison_plan(doc)
    if plan.victim >= train_b.num_classes or plan.target >= train_b.num_classes:
        raise ConfigError("victim/target out of range for the loaded dataset")

    registry = default_registry(plan.n_partitions, train_b.image_hw,
                                patch=int(doc["trigger"]["patch"]),
                                colors=doc["trigger"]["colors"] or None
                                or __import__("bdlab.triggers", fromlist=["DEFAULT_COLORS"]).DEFAULT_COLORS)

    partitioner = build_partitioner(doc, train_b, run_dir)

    # assign partitions for every sample once, then balance the victim class
    assignments = partitioner.assign(train_b)
    train_b = train_b.with_partitions(assignments)
    victim_mask = train_b.labels == plan.victim
    victim_part = train_b.subset(victim_mask)
    balanced = balance_partitions(victim_part, slack=float(doc["partition"]["balance_slack"]),
                                  seed=int(doc["partition"]["seed"]))
    if len(balanced) < len(victim_part):
        log.info("balanced victim partitions: %d -> %d samples",
                 len(victim_part), len(balanced))
        keep = torch.ones(len(train_b), dtype=torch.bool)
        victim_idx = victim_mask.nonzero().flatten()
        sizes = {p: int((victim_part.partitions == p).sum())
                 for p in range(partitioner.n_partitions)}
        # recompute kept victim indices through the same seeded removal
        balanced_idx = _balanced_victim_indices(victim_part, victim_idx,
                                                slack=float(doc["partition"]["balance_slack"]),
                                                seed=int(doc["partition"]["seed"]))
        keep[victim_idx] = False
        keep[balanced_idx] = True
        train_b = train_b.subset(keep.nonzero().flatten())

    train_cfg = make_train_config(doc)
    aug = train_cfg.augment
    augment_fn = None
    if aug.enabled:
        augment_fn = lambda px, g: augment_pixels(px, g, crop_pad=aug.crop_pad,
                                                  flip_prob=aug.flip_prob,
                                                  noise_std=aug.noise_std)
    poison_seed = int(doc["poison"]["seed"])

    def factory(epoch: int):
        return build_epoch(plan, train_b, partitioner, registry,
                           seed=poison_seed * 100003 + epoch,
                           batch_size=train_cfg.batch_size, augment_fn=augment_fn)

    log.info("training %s-strategy model (%d epochs)", plan.strategy, train_cfg.epochs)
    attacked = train(train_cfg, factory, train_b.num_classes, int(train_b.pixels.shape[1]))

    report = build_report(attacked, test_b, partitioner, registry,
                          plan.victim, plan.target,
                          metadata={"config": doc, "strategy": plan.strategy,
                                    "victim": plan.victim, "target": plan.target,
                                    "poison_generation": "online, re-drawn per epoch"})

    save_checkpoint(attacked, os.path.join(run_dir, "checkpoints", "attacked.pt"),
                    extra={"strategy": plan.strategy})
    save_partitioner(partitioner, os.path.join(run_dir, "partitioner"))
    with open(os.path.join(run_dir, "triggers", "registry.json"), "w") as f:
        f.write(registry_to_json(registry))
    with open(os.path.join(run_dir, "config.resolved.yaml"), "w") as f:
        f.write(resolved_yaml(doc))
    with open(os.path.join(run_dir, "reports", "attack_report.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(run_dir, "reports", "asr_matrix.csv"), "w") as f:
        f.write(report.matrix.to_csv())
    save_matrix_heatmap(report.matrix, os.path.join(run_dir, "plots", "asr_matrix.png"),
                        title=f"ASR matrix ({plan.strategy})")
    log.info("attack run complete: BA=%.2f%% ASR=%.2f%%", report.ba, report.asr)
    return attacked, report


def _balanced_victim_indices(victim_part: ImageBatch, victim_idx: torch.Tensor,
                             slack: float, seed: int) -> torch.Tensor:
    reduced = balance_partitions(
        ImageBatch(victim_part.pixels, victim_part.labels, victim_part.num_classes,
                   partitions=victim_part.partitions,
                   attrs={"orig": victim_idx}),
        slack=slack, seed=seed)
    return reduced.attrs["orig"]


# ---------------------------------------------------------------------------
# Defense pipeline
# ---------------------------------------------------------------------------

def load_run(run_dir: str):
    """Re-open the artifacts written by run_attack."""
    cfg_path = os.path.join(run_dir, "config.resolved.yaml")
    if not os.path.exists(cfg_path):
        raise BdlabError(f"not a run directory (missing config.resolved.yaml): {run_dir}")
    import yaml
    with open(cfg_path) as f:
        doc = yaml.safe_load(f)
    handle = load_checkpoint(os.path.join(run_dir, "checkpoints", "attacked.pt"))
    partitioner = load_partitioner(os.path.join(run_dir, "partitioner"))
    with open(os.path.join(run_dir, "triggers", "registry.json")) as f:
        registry = registry_from_json(f.read())
    return doc, handle, partitioner, registry


def _mitigation_entry(model_before: ModelHandle, model_after: ModelHandle,
                      test_b: ImageBatch, partitioner, registry, victim, target) -> dict:
    from .metrics import asr as asr_fn, benign_accuracy
    victim_batch = test_b.select_class(victim)
    return {
        "ba_before": benign_accuracy(model_before, test_b),
        "asr_before": asr_fn(model_before, victim_batch, partitioner, registry, target),
        "ba_after": benign_accuracy(model_after, test_b),
        "asr_after": asr_fn(model_after, victim_batch, partitioner, registry, target),
    }


def run_defend(run_dir: str, doc_override: dict | None = None) -> dfs.DefenseReport:
    doc, handle, partitioner, registry = load_run(run_dir)
    if doc_override:
        from .config import merge_config
        doc = merge_config(doc, doc_override)
    dcfg = doc["defense"]
    methods = list(dcfg["methods"])
    train_b, test_b = load_experiment_dataset(doc)
    victim = int(doc["poison"]["victim"])
    target = doc["poison"]["target"]
    target = train_b.num_classes - 1 if target is None else int(target)
    report = dfs.DefenseReport(metadata={"run_dir": run_dir, "methods": methods,
                                         "victim": victim, "target": target})
    plots_dir = os.path.join(run_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)

    victim_test = test_b.select_class(victim)
    candidates = [c for c in range(test_b.num_classes) if c != victim]

    if "inversion" in methods:
        inv_cfg = make_inversion_config(doc)
        log.info("inversion scan over %d candidate targets", len(candidates))
        scan, entries = dfs.scan_inversion(handle, victim_test, candidates, inv_cfg)
        report.inversion = scan.to_dict()
        _save_inversion_plots(entries, plots_dir)

    if "strip" in methods:
        scfg = dcfg["strip"]
        n = int(scfg["n_samples"])
        clean = victim_test.subset(torch.arange(min(n, len(victim_test))))
        poisoned_pixels = _stamp_matched(clean, partitioner, registry)
        poisoned = ImageBatch(poisoned_pixels, clean.labels, clean.num_classes)
        overlay = train_b.subset(torch.arange(min(len(train_b), 512)))
        ent_clean = dfs.strip_entropy(handle, clean, overlay,
                                      n_blends=int(scfg["n_blends"]), seed=int(scfg["seed"]))
        ent_poison = dfs.strip_entropy(handle, poisoned, overlay,
                                       n_blends=int(scfg["n_blends"]), seed=int(scfg["seed"]))
        report.strip = {
            "clean_entropy": ent_clean.tolist(),
            "poisoned_entropy": ent_poison.tolist(),
            "overlap": dfs.histogram_overlap(ent_clean, ent_poison),
        }
        _save_strip_plot(ent_clean, ent_poison, os.path.join(plots_dir, "strip_entropy.png"))

    if "spectral" in methods:
        n = int(dcfg["spectral"]["n_samples"])
        clean_target = test_b.select_class(target)
        clean_target = clean_target.subset(torch.arange(min(n, len(clean_target))))
        poisoned = victim_test.subset(torch.arange(min(n, len(victim_test))))
        poisoned = ImageBatch(_stamp_matched(poisoned, partitioner, registry),
                              poisoned.labels, poisoned.num_classes)
        mixed = ImageBatch(torch.cat([clean_target.pixels, poisoned.pixels]),
                           torch.cat([clean_target.labels, poisoned.labels]),
                           test_b.num_classes)
        scores = dfs.spectral_scores(handle, mixed)
        split = len(clean_target)
        report.spectral = {
            "clean_scores": scores[:split].tolist(),
            "poisoned_scores": scores[split:].tolist(),
            "overlap": dfs.histogram_overlap(scores[:split], scores[split:]),
        }

    ft_cfg = None
    if "fine-tune" in methods or "fine-prune" in methods:
        f = dcfg["fine_tune"]
        ft_cfg = make_train_config(doc, epochs=int(f["epochs"]), lr=float(f["lr"]),
                                   weight_decay=float(f["weight_decay"]),
                                   seed=int(f["seed"]), augment=dict(f["augment"]))
        subset = draw_clean_subset(train_b, float(f["fraction"]), seed=int(f["seed"]))

    if "fine-tune" in methods:
        log.info("fine-tuning mitigation on %d clean samples", len(subset))
        tuned = fine_tune(handle, subset, ft_cfg)
        report.mitigation["fine-tune"] = _mitigation_entry(
            handle, tuned, test_b, partitioner, registry, victim, target)

    if "fine-prune" in methods:
        frac = float(dcfg["fine_prune"]["fraction"])
        log.info("fine-pruning mitigation (fraction %.2f)", frac)
        pruned = dfs.fine_prune(handle, subset, frac, ft_cfg)
        report.mitigation["fine-prune"] = _mitigation_entry(
            handle, pruned, test_b, partitioner, registry, victim, target)

    if "adaptive" in methods or dcfg["adaptive"].get("enabled"):
        acfg = dcfg["adaptive"]
        guess = _guess_partitioner(acfg.get("guess", "pixels-kmeans"), handle,
                                   victim_test, partitioner, seed=int(acfg.get("seed", 0)))
        truth = None
        try:
            truth = partitioner.assign(victim_test).numpy()
        except BdlabError:
            log.warning("ground-truth partitioner unavailable; MO omitted")
        adaptive = dfs.adaptive_scan(handle, victim_test, guess, candidates,
                                     make_inversion_config(doc), truth_partitions=truth)
        report.adaptive = adaptive.to_dict()

    with open(os.path.join(run_dir, "reports", "defense_report.json"), "w") as f:
        f.write(report.to_json())
    return report


def _stamp_matched(batch: ImageBatch, partitioner, registry) -> torch.Tensor:
    from .triggers import apply_combo
    parts = partitioner.assign(batch)
    out = batch.pixels.clone()
    for p in range(partitioner.n_partitions):
        sel = parts == p
        if sel.any():
            out[sel] = apply_combo(out[sel], 1 << p, registry)
    return out


def _guess_partitioner(name: str, handle: ModelHandle, victim_test: ImageBatch,
                       truth: Partitioner, seed: int = 0) -> Partitioner:
    n = truth.n_partitions
    if name == "ground-truth":
        return truth
    if name == "pixels-kmeans":
        encoder = PixelEncoder()
    elif name == "features-kmeans":
        encoder = ModelEncoder(handle)
    else:
        raise ConfigError(f"unknown adaptive guess {name!r}")
    feats = extract_features(encoder, victim_test)
    km = kmeans_fit(feats, n, seed=seed)
    return KMeansPartitioner(encoder, km.centroids)


def _save_inversion_plots(entries, plots_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    for e in entries:
        fig, axes = plt.subplots(1, 2, figsize=(5, 2.4))
        axes[0].imshow(e.mask.numpy(), vmin=0, vmax=1, cmap="gray")
        axes[0].set_title(f"mask (L1={e.l1:.1f})", fontsize=8)
        axes[1].imshow(np.transpose(e.pattern.numpy(), (1, 2, 0)).clip(0, 1))
        axes[1].set_title(f"pattern (REASR={e.reasr:.0f}%)", fontsize=8)
        for ax in axes:
            ax.axis("off")
        fig.suptitle(f"inverted trigger, target {e.target}", fontsize=9)
        fig.tight_layout()
        fig.savefig(os.path.join(plots_dir, f"inverted_mask_target{e.target}.png"), dpi=110)
        plt.close(fig)


def _save_strip_plot(clean: np.ndarray, poisoned: np.ndarray, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4.5, 3))
    bins = np.linspace(0, max(1.0, clean.max(), poisoned.max()), 25)
    ax.hist(clean, bins=bins, alpha=0.6, label="clean")
    ax.hist(poisoned, bins=bins, alpha=0.6, label="poisoned")
    ax.set_xlabel("normalized entropy")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

def run_report(root: str, out_dir: str | None = None) -> dict:
    """Aggregate reports under `root` (a run dir or a directory of run dirs)
    into summary tables; partial runs are summarized with gaps marked."""
    run_dirs = []
    if os.path.exists(os.path.join(root, "reports")):
        run_dirs = [root]
    else:
        run_dirs = sorted(d for d in glob.glob(os.path.join(root, "*"))
                          if os.path.isdir(os.path.join(d, "reports")))
    if not run_dirs:
        raise BdlabError(f"no run reports found under {root}")
    out_dir = out_dir or root
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for rd in run_dirs:
        row = {"run": os.path.basename(rd.rstrip("/"))}
        attack_path = os.path.join(rd, "reports", "attack_report.json")
        if os.path.exists(attack_path):
            with open(attack_path) as f:
                rep = AttackReport.from_json(f.read())
            row.update({
                "strategy": rep.metadata.get("strategy", ""),
                "ba": f"{rep.ba:.2f}",
                "asr": f"{rep.asr:.2f}",
                "asr_other": f"{rep.asr_other[0]:.2f}±{rep.asr_other[1]:.2f}",
                "asr_indi": f"{rep.asr_indi[0]:.2f}±{rep.asr_indi[1]:.2f}",
                "asr_comb": f"{rep.asr_comb[0]:.2f}±{rep.asr_comb[1]:.2f}",
                "asr_other_label": f"{rep.asr_other_label:.2f}",
            })
            heatmap = os.path.join(out_dir, f"asr_matrix_{row['run']}.png")
            save_matrix_heatmap(rep.matrix, heatmap,
                                title=f"ASR matrix ({row['strategy'] or row['run']})")
        defense_path = os.path.join(rd, "reports", "defense_report.json")
        if os.path.exists(defense_path):
            with open(defense_path) as f:
                drep = dfs.DefenseReport.from_json(f.read())
            if drep.inversion:
                row["nc_index"] = f"{drep.inversion['decision_index']:.3f}"
            for method, entry in drep.mitigation.items():
                row[f"{method}_asr_after"] = f"{entry['asr_after']:.2f}"
                row[f"{method}_ba_after"] = f"{entry['ba_after']:.2f}"
        rows.append(row)

    columns = ["run", "strategy", "ba", "asr", "asr_other", "asr_indi", "asr_comb",
               "asr_other_label", "nc_index", "fine-tune_asr_after", "fine-tune_ba_after",
               "fine-prune_asr_after", "fine-prune_ba_after"]
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="-", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return {"runs": rows, "summary_csv": summary_path}


def format_summary(rows: list[dict]) -> str:
    cols = ["run", "strategy", "ba", "asr", "asr_other", "asr_indi", "asr_comb",
            "asr_other_label", "nc_index"]
    present = [c for c in cols if any(c in r for r in rows)]
    widths = {c: max(len(c), *(len(str(r.get(c, "-"))) for r in rows)) for c in present}
    lines = ["  ".join(c.ljust(widths[c]) for c in present)]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "-")).ljust(widths[c]) for c in present))
    return "\n".join(lines)
