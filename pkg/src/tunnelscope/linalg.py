"""Dense linear algebra shared by all representation metrics.

Covariance, singular values, and the numerical rank of a representation
matrix (rows = samples, cols = features). Rank counts the covariance
singular values above a threshold relative to the largest one, so it is
invariant to rescaling the representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fixed seed for the column subsample taken when a matrix has more features
# than SpectrumPolicy.max_features. A constant keeps numerical_rank a pure
# function of (matrix, policy).
_SUBSAMPLE_SEED = 0x5EED


@dataclass(frozen=True)
class SpectrumPolicy:
    """How to turn a covariance spectrum into a rank estimate.

    relative_threshold: singular values count toward the rank when they
        exceed this fraction of the largest singular value.
    max_features: matrices with more columns are reduced to a seeded
        uniform column subsample of this size before the spectrum is taken.
    """

    relative_threshold: float = 1e-3
    max_features: int = 2048

    def __post_init__(self):
        if not 0.0 < self.relative_threshold < 1.0:
            raise ValueError(
                f"relative_threshold must be in (0, 1), got {self.relative_threshold}"
            )
        if self.max_features < 1:
            raise ValueError(f"max_features must be >= 1, got {self.max_features}")


def as_matrix(x) -> np.ndarray:
    """Validate a 2-D real matrix with finite entries; returns float64."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size and not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def sample_covariance(x) -> np.ndarray:
    """Sample covariance of the rows of x: (X - mean)^T (X - mean) / (m - 1).

    Column means are subtracted; the result is symmetrized exactly so that
    downstream spectral code sees a clean symmetric PSD matrix.
    """
    x = as_matrix(x)
    m = x.shape[0]
    if m < 2:
        raise ValueError(f"sample covariance needs at least 2 rows, got {m}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (m - 1)
    return (cov + cov.T) / 2.0


def singular_values(m) -> np.ndarray:
    """Singular values of m in non-increasing order (length min(rows, cols))."""
    m = as_matrix(m)
    if m.size == 0:
        raise ValueError("singular values of an empty matrix are undefined")
    return np.linalg.svd(m, compute_uv=False)


def _subsample_columns(x: np.ndarray, max_features: int) -> np.ndarray:
    rng = np.random.default_rng(_SUBSAMPLE_SEED)
    cols = np.sort(rng.choice(x.shape[1], size=max_features, replace=False))
    return x[:, cols]


def numerical_rank(x, policy: SpectrumPolicy = SpectrumPolicy()) -> int:
    """Number of covariance singular values above relative_threshold * s_max.

    Returns 0 for a zero-variance matrix. Matrices wider than
    policy.max_features are reduced to a seeded column subsample first.
    """
    x = as_matrix(x)
    if x.shape[0] < 2:
        raise ValueError(f"numerical rank needs at least 2 rows, got {x.shape[0]}")
    if x.shape[1] == 0:
        return 0
    if x.shape[1] > policy.max_features:
        x = _subsample_columns(x, policy.max_features)
    cov = sample_covariance(x)
    spectrum = singular_values(cov)
    top = spectrum[0]
    if top <= 0.0:
        return 0
    return int(np.count_nonzero(spectrum > policy.relative_threshold * top))
