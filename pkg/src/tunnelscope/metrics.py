"""Representation similarity and geometry metrics.

Minibatched linear-kernel CKA built on the unbiased HSIC estimator,
inter/intra-class variance, mean L1 drift between consecutive layers, and
the numerical rank of a representation matrix. The unbiased estimator can
leave [0, 1] slightly; values are reported as computed, never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import SpectrumPolicy, numerical_rank
from .nn import ActivationSet


class DegenerateRepresentationsError(ValueError):
    """A representation's self-similarity is zero, so CKA is undefined."""


@dataclass(frozen=True)
class CkaConfig:
    batch_size: int = 256
    min_batch: int = 4
    drop_incomplete: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.min_batch < 4:
            raise ValueError("min_batch must be >= 4 (unbiased HSIC needs n >= 4)")
        if self.batch_size < self.min_batch:
            raise ValueError("batch_size must be >= min_batch")


@dataclass(frozen=True)
class VarianceReport:
    intra: float
    inter: float

    def __post_init__(self):
        if not (np.isfinite(self.intra) and np.isfinite(self.inter)):
            raise ValueError("variance values must be finite")
        if self.intra < 0 or self.inter < 0:
            raise ValueError("variance values must be non-negative")


def hsic_unbiased(k_gram, l_gram) -> float:
    """Unbiased HSIC estimate on two n x n Gram matrices (n >= 4).

    Both matrices have their diagonals removed, then
    ( tr(K~ L~) + (1'K~1)(1'L~1)/((n-1)(n-2)) - 2/(n-2) * 1'K~L~1 ) / (n(n-3)).
    """
    k = np.asarray(k_gram, dtype=np.float64)
    l = np.asarray(l_gram, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape != l.shape:
        raise ValueError(f"expected matching square matrices, got {k.shape} and {l.shape}")
    n = k.shape[0]
    if n < 4:
        raise ValueError(f"unbiased HSIC needs n >= 4, got {n}")
    kt = k - np.diag(np.diag(k))
    lt = l - np.diag(np.diag(l))
    # tr(K~ L~) = sum(K~ * L~^T); both are symmetric-diagonal-zero in our use,
    # but transpose keeps this correct for any square input.
    trace_term = float(np.sum(kt * lt.T))
    k_row = kt.sum(axis=1)
    l_row = lt.sum(axis=1)
    sum_k = float(k_row.sum())
    sum_l = float(l_row.sum())
    cross = float(kt.sum(axis=0) @ l_row)  # 1' K~ L~ 1
    value = trace_term + sum_k * sum_l / ((n - 1) * (n - 2)) - 2.0 * cross / (n - 2)
    return value / (n * (n - 3))


def _batches(n: int, cfg: CkaConfig) -> list[np.ndarray]:
    """Seeded shuffle, then consecutive chunks of batch_size.

    When n <= batch_size the single (possibly incomplete) chunk is kept;
    otherwise a trailing incomplete chunk is dropped under drop_incomplete,
    and kept only if it still supports the estimator (>= min_batch rows).
    """
    order = np.random.default_rng(cfg.seed).permutation(n)
    if n <= cfg.batch_size:
        return [order]
    chunks = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
    if len(chunks[-1]) < cfg.batch_size:
        if cfg.drop_incomplete or len(chunks[-1]) < cfg.min_batch:
            chunks.pop()
    return chunks


def cka(x, y, cfg: CkaConfig = CkaConfig()) -> float:
    """Minibatched linear-kernel CKA between two representation matrices.

    Rows are paired samples. The index is the mean cross-HSIC over batches,
    normalized by the square roots of the mean self-HSICs; 1 means the
    representations are identical up to rotation and positive scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("representation matrices must be 2-D with equal row counts")
    n = x.shape[0]
    if n < cfg.min_batch:
        raise ValueError(f"need at least {cfg.min_batch} rows, got {n}")
    xy = xx = yy = 0.0
    batches = _batches(n, cfg)
    for idx in batches:
        xb, yb = x[idx], y[idx]
        k = xb @ xb.T
        l = yb @ yb.T
        xy += hsic_unbiased(k, l)
        xx += hsic_unbiased(k, k)
        yy += hsic_unbiased(l, l)
    count = len(batches)
    xy, xx, yy = xy / count, xx / count, yy / count
    if xx <= 0.0 or yy <= 0.0:
        raise DegenerateRepresentationsError(
            "zero self-HSIC: representations are degenerate (constant rows?)"
        )
    return xy / (np.sqrt(xx) * np.sqrt(yy))


def cka_matrix(acts: ActivationSet, cfg: CkaConfig = CkaConfig()) -> np.ndarray:
    """Layer x layer CKA on a shared sample order.

    Symmetric with unit diagonal where defined; degenerate pairs are
    recorded as NaN instead of aborting the whole matrix.
    """
    n_layers = len(acts)
    if n_layers < 1:
        raise ValueError("need at least one layer")
    out = np.full((n_layers, n_layers), np.nan)
    for i in range(n_layers):
        for j in range(i, n_layers):
            try:
                value = cka(acts[i], acts[j], cfg)
            except DegenerateRepresentationsError:
                continue
            out[i, j] = value
            out[j, i] = value
    return out


def intra_inter_variance(acts, labels) -> VarianceReport:
    """Within-class spread and between-class-mean separation.

    intra: mean over classes of the mean squared distance to the class mean.
    inter: mean squared distance between distinct class means (ordered pairs).
    """
    x = np.asarray(acts, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("activations and labels disagree on sample count")
    if y.size == 0:
        raise ValueError("cannot compute variances on an empty set")
    num_classes = int(y.max()) + 1
    present = np.unique(y)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if len(present) != num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise ValueError(f"classes {missing} have no samples")
    if num_classes < 2:
        raise ValueError("inter-class variance is undefined for a single class")
    means = np.stack([x[y == c].mean(axis=0) for c in range(num_classes)])
    intra = float(
        np.mean([np.mean(np.sum((x[y == c] - means[c]) ** 2, axis=1))
                 for c in range(num_classes)])
    )
    diffs = means[:, None, :] - means[None, :, :]
    sq = np.sum(diffs ** 2, axis=2)
    inter = float(sq.sum() / (num_classes * (num_classes - 1)))
    return VarianceReport(intra=intra, inter=inter)


def l1_drift(acts: ActivationSet) -> list[float]:
    """Mean L1 distance between consecutive layers' representations.

    Entry i compares layers i and i+1, which must have equal widths.
    """
    values = []
    for i in range(len(acts) - 1):
        a, b = acts[i], acts[i + 1]
        if a.shape[1] != b.shape[1]:
            raise ValueError(
                f"layers {i} and {i + 1} have different widths "
                f"({a.shape[1]} vs {b.shape[1]})"
            )
        diff = np.abs(b.astype(np.float64) - a.astype(np.float64))
        values.append(float(diff.sum(axis=1).mean()))
    return values


def representation_rank(acts, policy: SpectrumPolicy = SpectrumPolicy()) -> int:
    """Numerical rank of one layer's representation matrix."""
    return numerical_rank(acts, policy)
