"""Deterministic classification datasets: clustered Gaussian blobs, class
subsetting, task splits, OOD pairing, standardization, CSV round-trips.

Every generator is a pure function of its spec, so the same spec always
yields byte-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # float32, rows = samples
    labels: np.ndarray    # int64 in [0, num_classes)
    num_classes: int
    name: str = ""

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        l = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if l.shape != (f.shape[0],):
            raise ValueError("labels length must equal the feature row count")
        if not np.isfinite(f).all():
            raise ValueError("features contain non-finite values")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if l.size and (l.min() < 0 or l.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian blob task: per class, clusters_per_class centers drawn
    i.i.d. uniform in [-center_scale, center_scale]^dim; samples are a
    center plus isotropic Gaussian noise. clusters_per_class=1 gives the
    classic linearly separable blobs; larger values interleave clusters of
    different classes so that linear separation at the input fails and the
    network has to build representations.
    """

    num_classes: int
    dim: int
    per_class_train: int = 500
    per_class_test: int = 100
    center_scale: float = 3.0
    noise_std: float = 0.5
    seed: int = 0
    clusters_per_class: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.per_class_train < 1 or self.per_class_test < 1:
            raise ValueError("per-class sample counts must be >= 1")
        if self.center_scale <= 0 or self.noise_std <= 0:
            raise ValueError("center_scale and noise_std must be positive")
        if self.clusters_per_class < 1:
            raise ValueError("clusters_per_class must be >= 1")


def make_blobs(spec: BlobSpec) -> tuple[Dataset, Dataset]:
    """Generate the (train, test) pair; draws are disjoint, order is by class."""
    rng = np.random.default_rng(spec.seed)
    k = spec.clusters_per_class
    centers = rng.uniform(
        -spec.center_scale, spec.center_scale, size=(spec.num_classes, k, spec.dim)
    )

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        feats, labs = [], []
        base, extra = divmod(per_class, k)
        for c in range(spec.num_classes):
            for j in range(k):
                count = base + (1 if j < extra else 0)
                if count == 0:
                    continue
                noise = rng.standard_normal((count, spec.dim))
                feats.append(centers[c, j] + spec.noise_std * noise)
                labs.append(np.full(count, c, dtype=np.int64))
        return np.concatenate(feats).astype(np.float32), np.concatenate(labs)

    xtr, ytr = draw(spec.per_class_train)
    xte, yte = draw(spec.per_class_test)
    name = f"blobs-c{spec.num_classes}-k{k}-d{spec.dim}-s{spec.seed}"
    return (
        Dataset(xtr, ytr, spec.num_classes, name=f"{name}-train"),
        Dataset(xte, yte, spec.num_classes, name=f"{name}-test"),
    )


def feature_stats(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std (float64); zero-variance columns get std 1."""
    f = d.features.astype(np.float64)
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def apply_standardization(d: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    scaled = (d.features.astype(np.float64) - mean) / std
    return Dataset(scaled.astype(np.float32), d.labels, d.num_classes, name=d.name)


def standardize_pair(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Standardize both splits using statistics computed on train only."""
    mean, std = feature_stats(train)
    return apply_standardization(train, mean, std), apply_standardization(test, mean, std)


def class_subset(d: Dataset, classes) -> Dataset:
    """Keep samples of the given classes, re-indexing labels to [0, len(classes))."""
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ValueError(f"classes must be distinct, got {classes}")
    for c in classes:
        if not 0 <= c < d.num_classes:
            raise ValueError(f"unknown class id {c}")
    mask = np.isin(d.labels, classes)
    remap = np.full(d.num_classes, -1, dtype=np.int64)
    for new, old in enumerate(classes):
        remap[old] = new
    return Dataset(
        d.features[mask],
        remap[d.labels[mask]],
        num_classes=len(classes),
        name=f"{d.name}-sub{len(classes)}",
    )


def split_tasks(d: Dataset, partition) -> list[Dataset]:
    """One re-indexed dataset per class group; groups must be disjoint."""
    groups = [list(g) for g in partition]
    seen: set[int] = set()
    for g in groups:
        overlap = seen.intersection(g)
        if overlap:
            raise ValueError(f"class groups overlap on {sorted(overlap)}")
        seen.update(g)
    return [class_subset(d, g) for g in groups]


def ood_pair(source: BlobSpec, target: BlobSpec):
    """Generate source and target tasks with genuinely different geometry.

    Identical specs are refused: that would be the degenerate "OOD equals
    in-distribution" case.
    """
    if source == target:
        raise ValueError("source and target blob specs are identical; "
                         "vary the seed or the class geometry")
    return make_blobs(source), make_blobs(target)


def save_csv(d: Dataset, path) -> None:
    """One row per sample: label, then features as decimal text."""
    with open(path, "w", encoding="utf-8") as f:
        for label, row in zip(d.labels, d.features):
            f.write(str(int(label)))
            f.write(",")
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")


def load_csv(path, num_classes: int, name: str = "") -> Dataset:
    """Parse rows of `label,feature,...`; malformed rows are reported by line."""
    feats, labs = [], []
    width = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                label = int(parts[0])
                row = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row at line {lineno}: {exc}") from None
            if not 0 <= label < num_classes:
                raise ValueError(
                    f"{path}: label {label} outside [0, {num_classes}) at line {lineno}"
                )
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(
                    f"{path}: expected {width} features at line {lineno}, got {len(row)}"
                )
            labs.append(label)
            feats.append(row)
    if not feats:
        raise ValueError(f"{path}: no data rows")
    return Dataset(
        np.asarray(feats, dtype=np.float32),
        np.asarray(labs, dtype=np.int64),
        num_classes,
        name=name or str(path),
    )
