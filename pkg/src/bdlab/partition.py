"""Victim-class partitioning: explicit attributes, K-means/GMM over encoder
features, a surrogate classifier that generalizes the clustering, and the
class-based scheme used for universal attacks.

All fitted partitioners expose the same two-method surface: `fit` happens at
construction time (or via the module-level fit functions) and `assign` maps
any image batch to partition ids in [0, n).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import ImageBatch
from .errors import PartitionError
from .models import ModelHandle, load_checkpoint, save_checkpoint

PARTITIONER_VERSION = 1


# ---------------------------------------------------------------------------
# Feature encoders
# ---------------------------------------------------------------------------

class FeatureEncoder:
    """Frozen feature extractor; deterministic in eval mode."""

    kind = "base"

    def extract(self, batch: ImageBatch) -> torch.Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class PixelEncoder(FeatureEncoder):
    """Flattened raw pixels; also the defender-side 'inputs' feature space."""

    kind = "pixels"

    def extract(self, batch: ImageBatch) -> torch.Tensor:
        d = int(torch.tensor(batch.pixels.shape[1:]).prod())
        return batch.pixels.reshape(len(batch), d).clone()

    def describe(self) -> dict:
        return {"kind": self.kind}


class ModelEncoder(FeatureEncoder):
    """Penultimate-layer features of a (clean) classifier."""

    kind = "model"

    def __init__(self, handle: ModelHandle):
        self.handle = handle

    @property
    def dim(self) -> int:
        return self.handle.module.feature_dim

    def extract(self, batch: ImageBatch) -> torch.Tensor:
        try:
            return self.handle.penultimate(batch.pixels)
        except RuntimeError as exc:
            raise PartitionError(f"encoder/input shape mismatch: {exc}") from exc

    def describe(self) -> dict:
        return {"kind": self.kind, "arch": self.handle.arch}


def extract_features(encoder: FeatureEncoder, batch: ImageBatch) -> torch.Tensor:
    """(B, d) feature matrix; finite and deterministic."""
    feats = encoder.extract(batch)
    if not torch.isfinite(feats).all():
        raise PartitionError("encoder produced non-finite features")
    return feats


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray          # (k, d)
    labels: np.ndarray             # (B,)
    objective_history: list[float]  # within-cluster sum of squared distances per iteration
    inertia: float


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None] - np.stack(centroids)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(len(x))])
            continue
        centroids.append(x[rng.choice(len(x), p=d2 / total)])
    return np.stack(centroids)


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    c = _kmeans_pp_init(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None] - c[None]) ** 2).sum(-1)
        labels = d2.argmin(1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new_c = c.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_c[j] = members.mean(0)
            else:
                # empty cluster: re-seed from the point farthest from its centroid
                far = int(d2[np.arange(len(x)), labels].argmax())
                new_c[j] = x[far]
        shift = np.sqrt(((new_c - c) ** 2).sum(-1)).max()
        c = new_c
        if shift < tol:
            break
    d2 = ((x[:, None] - c[None]) ** 2).sum(-1)
    labels = d2.argmin(1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return c, labels, history


def kmeans_fit(features, k: int, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-4, n_init: int = 10) -> KMeansResult:
    """Seeded Lloyd iterations (squared Euclidean), best of `n_init` restarts."""
    x = _as_f64(features)
    if len(x) < k:
        raise PartitionError(f"need at least k={k} points, got {len(x)}")
    best = None
    for init in range(n_init):
        rng = np.random.default_rng(seed * 1009 + init)
        c, labels, history = _lloyd(x, k, rng, max_iter, tol)
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(c, labels, history, history[-1])
    return best


def kmeans_assign(features, centroids: np.ndarray) -> np.ndarray:
    x = _as_f64(features)
    return ((x[:, None] - centroids[None]) ** 2).sum(-1).argmin(1)


def _as_f64(features) -> np.ndarray:
    if torch.is_tensor(features):
        features = features.detach().cpu().numpy()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise PartitionError(f"feature matrix must be 2-D, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Gaussian mixture (EM, full covariance)
# ---------------------------------------------------------------------------

@dataclass
class GMMResult:
    weights: np.ndarray           # (k,)
    means: np.ndarray             # (k, d)
    covariances: np.ndarray       # (k, d, d)
    loglik_history: list[float]   # mean log-likelihood per EM iteration


def _gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise PartitionError("singular covariance despite regularization") from exc
    diff = x - mean
    z = np.linalg.solve(chol, diff.T).T
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * np.log(2 * np.pi) + logdet + (z ** 2).sum(1))


def gmm_fit(features, k: int, seed: int = 0, max_iter: int = 100,
            tol: float = 1e-6, reg: float = 1e-6) -> GMMResult:
    """EM for a full-covariance mixture, initialized from K-means."""
    x = _as_f64(features)
    if len(x) < k:
        raise PartitionError(f"need at least k={k} points, got {len(x)}")
    km = kmeans_fit(x, k, seed=seed, n_init=3)
    d = x.shape[1]
    means = km.centroids.copy()
    covs = np.empty((k, d, d))
    weights = np.empty(k)
    for j in range(k):
        members = x[km.labels == j]
        if len(members) < 2:
            covs[j] = np.eye(d)
        else:
            covs[j] = np.cov(members.T, bias=True).reshape(d, d)
        covs[j] += reg * np.eye(d)
        weights[j] = max(len(members), 1) / len(x)
    weights /= weights.sum()

    history = []
    prev = -np.inf
    for _ in range(max_iter):
        # E step
        log_prob = np.stack([np.log(weights[j]) + _gaussian_logpdf(x, means[j], covs[j])
                             for j in range(k)], axis=1)
        log_norm = _logsumexp(log_prob)
        ll = float(log_norm.mean())
        history.append(ll)
        resp = np.exp(log_prob - log_norm[:, None])
        # M step
        nk = resp.sum(0) + 1e-12
        weights = nk / len(x)
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
        if np.isfinite(prev) and abs(ll - prev) < tol * max(abs(prev), 1.0):
            break
        prev = ll
    return GMMResult(weights, means, covs, history)


def gmm_assign(features, gmm: GMMResult) -> np.ndarray:
    x = _as_f64(features)
    log_prob = np.stack([np.log(gmm.weights[j]) +
                         _gaussian_logpdf(x, gmm.means[j], gmm.covariances[j])
                         for j in range(len(gmm.weights))], axis=1)
    return log_prob.argmax(1)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    amax = a.max(axis=1, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=1, keepdims=True))).squeeze(1)


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------

class Partitioner:
    """Assigns any image in a batch to one of `n_partitions` groups."""

    kind = "base"

    def __init__(self, n_partitions: int):
        if n_partitions < 1:
            raise PartitionError(f"n_partitions must be >= 1, got {n_partitions}")
        self.n_partitions = n_partitions

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        """(B,) int64 partition ids in [0, n_partitions)."""
        raise NotImplementedError

    def payload(self) -> dict:
        raise NotImplementedError


class ExplicitPartitioner(Partitioner):
    """Mixed-radix index over selected per-sample attribute columns (t^k partitions)."""

    kind = "explicit"

    def __init__(self, selected: list[str], cardinalities: list[int]):
        if len(selected) != len(cardinalities) or not selected:
            raise PartitionError("selected attributes and cardinalities must align")
        n = 1
        for t in cardinalities:
            if t < 1:
                raise PartitionError("attribute cardinality must be >= 1")
            n *= t
        super().__init__(n)
        self.selected = list(selected)
        self.cardinalities = list(cardinalities)

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        out = torch.zeros(len(batch), dtype=torch.int64)
        for name, card in zip(self.selected, self.cardinalities):
            if name not in batch.attrs:
                raise PartitionError(f"batch lacks attribute column {name!r}")
            col = batch.attrs[name]
            bad = ((col < 0) | (col >= card)).nonzero().flatten()
            if len(bad):
                raise PartitionError(
                    f"attribute {name!r} out of range for samples {bad.tolist()[:10]}")
            out = out * card + col
        return out

    def payload(self) -> dict:
        return {"selected": self.selected, "cardinalities": self.cardinalities}


class ClassPartitioner(Partitioner):
    """Class-based partitioning (universal-attack extension): label -> partition."""

    kind = "class-based"

    def __init__(self, class_to_partition: dict[int, int]):
        ids = sorted(set(class_to_partition.values()))
        if ids != list(range(len(ids))):
            raise PartitionError(f"partition ids must be contiguous from 0, got {ids}")
        super().__init__(len(ids))
        self.class_to_partition = {int(k): int(v) for k, v in class_to_partition.items()}

    @classmethod
    def contiguous(cls, num_classes: int, n_partitions: int) -> "ClassPartitioner":
        """Group `num_classes` labels into n roughly equal contiguous blocks."""
        per = int(np.ceil(num_classes / n_partitions))
        return cls({c: min(c // per, n_partitions - 1) for c in range(num_classes)})

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        lut = torch.full((max(self.class_to_partition) + 1,), -1, dtype=torch.int64)
        for c, p in self.class_to_partition.items():
            lut[c] = p
        out = lut[batch.labels]
        if (out < 0).any():
            missing = sorted(set(batch.labels[out < 0].tolist()))
            raise PartitionError(f"labels without a partition mapping: {missing}")
        return out

    def payload(self) -> dict:
        return {"class_to_partition": {str(k): v for k, v in self.class_to_partition.items()}}


class KMeansPartitioner(Partitioner):
    """Nearest-centroid assignment over encoder features."""

    kind = "kmeans"

    def __init__(self, encoder: FeatureEncoder, centroids: np.ndarray):
        super().__init__(len(centroids))
        self.encoder = encoder
        self.centroids = np.asarray(centroids, dtype=np.float64)

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        feats = extract_features(self.encoder, batch)
        return torch.from_numpy(kmeans_assign(feats, self.centroids)).to(torch.int64)

    def payload(self) -> dict:
        return {"centroids": self.centroids.tolist(), "encoder": self.encoder.describe()}


class GMMPartitioner(Partitioner):
    """Maximum-posterior component assignment over encoder features."""

    kind = "gmm"

    def __init__(self, encoder: FeatureEncoder, gmm: GMMResult):
        super().__init__(len(gmm.weights))
        self.encoder = encoder
        self.gmm = gmm

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        feats = extract_features(self.encoder, batch)
        return torch.from_numpy(gmm_assign(feats, self.gmm)).to(torch.int64)

    def payload(self) -> dict:
        return {"weights": self.gmm.weights.tolist(),
                "means": self.gmm.means.tolist(),
                "covariances": self.gmm.covariances.tolist(),
                "encoder": self.encoder.describe()}


@dataclass
class SurrogateScheme:
    """Label bookkeeping for the victim-subclass dataset.

    Victim class `victim` of an N-class problem is replaced by n sub-classes
    occupying ids {victim .. victim+n-1}; original classes above the victim
    shift up by n-1. Total label-space size is N - 1 + n.
    """

    victim: int
    n_partitions: int
    original_classes: int

    @property
    def num_classes(self) -> int:
        return self.original_classes - 1 + self.n_partitions

    def relabel(self, label: int) -> int:
        if label < self.victim:
            return label
        if label == self.victim:
            raise PartitionError("victim labels are relabeled per-partition, not per-class")
        return label + self.n_partitions - 1

    def sub_ids(self) -> range:
        return range(self.victim, self.victim + self.n_partitions)


def build_surrogate_dataset(train: ImageBatch, victim: int,
                            clustering: Partitioner) -> tuple[ImageBatch, SurrogateScheme]:
    """Relabel victim samples by sub-class id; all other classes are kept."""
    if victim < 0 or victim >= train.num_classes:
        raise PartitionError(f"victim class {victim} out of range")
    vmask = train.labels == victim
    if not vmask.any():
        raise PartitionError(f"victim class {victim} absent from the training batch")
    scheme = SurrogateScheme(victim, clustering.n_partitions, train.num_classes)
    sub = clustering.assign(train.subset(vmask))
    labels = train.labels.clone()
    labels[vmask] = victim + sub
    shift = train.labels > victim
    labels[shift] = train.labels[shift] + clustering.n_partitions - 1
    relabeled = ImageBatch(train.pixels, labels, scheme.num_classes, attrs=train.attrs)
    return relabeled, scheme


class SurrogatePartitioner(Partitioner):
    """Arg-max over the surrogate's sub-class logits; total over any input."""

    kind = "surrogate"

    def __init__(self, handle: ModelHandle, scheme: SurrogateScheme):
        super().__init__(scheme.n_partitions)
        if handle.num_classes != scheme.num_classes:
            raise PartitionError(
                f"surrogate has {handle.num_classes} outputs, scheme expects {scheme.num_classes}")
        self.handle = handle
        self.scheme = scheme

    def assign(self, batch: ImageBatch) -> torch.Tensor:
        logits = self.handle.logits(batch.pixels)
        v = self.scheme.victim
        return logits[:, v:v + self.n_partitions].argmax(dim=1).to(torch.int64)

    def payload(self) -> dict:
        return {"victim": self.scheme.victim,
                "original_classes": self.scheme.original_classes}


# ---------------------------------------------------------------------------
# Partition balancing and the overlap metric
# ---------------------------------------------------------------------------

def balance_partitions(batch: ImageBatch, slack: float = 0.2, seed: int = 0) -> ImageBatch:
    """Truncate oversized partitions to ceil(mean_size * (1 + slack)) by seeded removal."""
    if batch.partitions is None:
        raise PartitionError("balance_partitions requires assigned partitions")
    parts = batch.partitions
    ids = sorted(set(parts.tolist()))
    sizes = {p: int((parts == p).sum()) for p in ids}
    cap = int(np.ceil(np.mean(list(sizes.values())) * (1.0 + slack)))
    g = torch.Generator().manual_seed(seed)
    keep = []
    for p in ids:
        idx = (parts == p).nonzero().flatten()
        if len(idx) > cap:
            idx = idx[torch.randperm(len(idx), generator=g)[:cap]]
        keep.append(idx)
    keep = torch.cat(keep).sort().values
    return batch.subset(keep)


def max_overlap(guess, truth) -> float:
    """Mean over non-empty guessed partitions of their best truth-partition
    intersection fraction, as a percentage."""
    guess = np.asarray(guess)
    truth = np.asarray(truth)
    if guess.shape != truth.shape:
        raise PartitionError("guess and truth must cover the same samples")
    fracs = []
    for gp in np.unique(guess):
        members = guess == gp
        size = members.sum()
        if size == 0:
            continue
        best = max((truth[members] == tp).sum() for tp in np.unique(truth))
        fracs.append(best / size)
    if not fracs:
        raise PartitionError("no non-empty guessed partitions")
    return float(np.mean(fracs) * 100.0)


# ---------------------------------------------------------------------------
# Serialization (versioned directory: partitioner.json + optional model files)
# ---------------------------------------------------------------------------

def save_partitioner(partitioner: Partitioner, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    doc = {
        "format_version": PARTITIONER_VERSION,
        "kind": partitioner.kind,
        "n_partitions": partitioner.n_partitions,
        "params": partitioner.payload(),
    }
    if isinstance(partitioner, SurrogatePartitioner):
        save_checkpoint(partitioner.handle, os.path.join(dirpath, "surrogate.pt"))
    encoder = getattr(partitioner, "encoder", None)
    if isinstance(encoder, ModelEncoder):
        save_checkpoint(encoder.handle, os.path.join(dirpath, "encoder.pt"))
    with open(os.path.join(dirpath, "partitioner.json"), "w") as f:
        json.dump(doc, f, indent=2)


def load_partitioner(dirpath: str) -> Partitioner:
    path = os.path.join(dirpath, "partitioner.json")
    if not os.path.exists(path):
        raise PartitionError(f"no partitioner file at {path}")
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != PARTITIONER_VERSION:
        raise PartitionError(f"unsupported partitioner version {doc.get('format_version')}")
    kind, params = doc["kind"], doc["params"]
    if kind == "explicit":
        return ExplicitPartitioner(params["selected"], params["cardinalities"])
    if kind == "class-based":
        return ClassPartitioner({int(k): v for k, v in params["class_to_partition"].items()})
    if kind == "kmeans":
        encoder = _load_encoder(params["encoder"], dirpath)
        return KMeansPartitioner(encoder, np.asarray(params["centroids"]))
    if kind == "gmm":
        encoder = _load_encoder(params["encoder"], dirpath)
        gmm = GMMResult(np.asarray(params["weights"]), np.asarray(params["means"]),
                        np.asarray(params["covariances"]), [])
        return GMMPartitioner(encoder, gmm)
    if kind == "surrogate":
        handle = load_checkpoint(os.path.join(dirpath, "surrogate.pt"))
        scheme = SurrogateScheme(params["victim"], doc["n_partitions"],
                                 params["original_classes"])
        return SurrogatePartitioner(handle, scheme)
    raise PartitionError(f"unknown partitioner kind {kind!r}")


def _load_encoder(desc: dict, dirpath: str) -> FeatureEncoder:
    if desc["kind"] == "pixels":
        return PixelEncoder()
    if desc["kind"] == "model":
        return ModelEncoder(load_checkpoint(os.path.join(dirpath, "encoder.pt")))
    raise PartitionError(f"unknown encoder kind {desc['kind']!r}")
