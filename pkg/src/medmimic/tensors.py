"""Dense feature tensors and the alignment primitives used by the fusion
pipeline: padding, per-coordinate normalization, feature concatenation,
clinical broadcasting, and global average pooling.

Layout convention: a FeatureTensor holds data of shape
(s_max, feat_dim, n_patients), row-major, float64 internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    InsufficientDataError,
    NumericError,
    ShapeError,
)

STD_GUARD_EPS = 1e-8


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-patient stack of slice feature vectors, shape (n_slices, feat_dim)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"feature matrix must be 2-D with positive extents, got {data.shape}")
        _check_finite(data, "FeatureMatrix")
        object.__setattr__(self, "data", data)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureTensor:
    """Padded per-modality stack across patients.

    data has shape (s_max, feat_dim, n_patients); rows at index >=
    slice_counts[i] for patient i are all-zero padding.
    """

    data: np.ndarray
    slice_counts: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        counts = np.asarray(self.slice_counts, dtype=np.int64)
        if data.ndim != 3:
            raise ShapeError(f"feature tensor must be 3-D, got {data.shape}")
        if counts.shape != (data.shape[2],):
            raise ShapeError("slice_counts length must equal n_patients")
        if np.any(counts < 0) or np.any(counts > data.shape[0]):
            raise CapacityError("slice counts must lie in [0, s_max]")
        _check_finite(data, "FeatureTensor")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "slice_counts", counts)

    @property
    def s_max(self) -> int:
        return self.data.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_patients(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class NormStats:
    """Per-(slice, feature) location/scale fitted across the patient axis."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float = field(default=STD_GUARD_EPS)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ShapeError("mean/std shapes differ")
        if np.any(std < 0):
            raise ShapeError("std entries must be non-negative")
        if self.epsilon <= 0:
            raise ShapeError("epsilon must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def pad_stack(mats: list[FeatureMatrix], s_max: int) -> FeatureTensor:
    """Zero-pad each patient's matrix to s_max rows and stack along the
    patient axis, preserving patient order."""
    if not mats:
        raise ShapeError("pad_stack requires at least one matrix")
    feat_dim = mats[0].feat_dim
    for m in mats:
        if m.feat_dim != feat_dim:
            raise ShapeError(
                f"mixed feature dims: expected {feat_dim}, got {m.feat_dim}"
            )
        if m.n_slices > s_max:
            raise CapacityError(
                f"s_max={s_max} smaller than a patient's {m.n_slices} slices"
            )
    data = np.zeros((s_max, feat_dim, len(mats)), dtype=np.float64)
    counts = np.empty(len(mats), dtype=np.int64)
    for i, m in enumerate(mats):
        data[: m.n_slices, :, i] = m.data
        counts[i] = m.n_slices
    return FeatureTensor(data, counts)


def fit_norm_stats(t: FeatureTensor, epsilon: float = STD_GUARD_EPS) -> NormStats:
    """Mean/std per (slice, feature) coordinate across the patient axis.

    Uses population variance. Coordinates with std below epsilon get
    std 1 so normalization maps them to exactly zero.
    """
    if t.n_patients < 2:
        raise InsufficientDataError("need at least 2 patients to fit statistics")
    mean = t.data.mean(axis=2)
    std = t.data.std(axis=2)
    std = np.where(std < epsilon, 1.0, std)
    return NormStats(mean, std, epsilon)


def znormalize(t: FeatureTensor, stats: NormStats) -> FeatureTensor:
    """(t - mean) / std per coordinate; slice counts are preserved."""
    if stats.mean.shape != (t.s_max, t.feat_dim):
        raise ShapeError(
            f"stats shape {stats.mean.shape} does not match tensor "
            f"({t.s_max}, {t.feat_dim})"
        )
    out = (t.data - stats.mean[:, :, None]) / stats.std[:, :, None]
    return FeatureTensor(out, t.slice_counts)


def concat_features(x: FeatureTensor, y: FeatureTensor) -> FeatureTensor:
    """Concatenate along the feature axis; x occupies the leading columns.

    Slice counts of the result are the elementwise max of the inputs'.
    """
    if x.s_max != y.s_max:
        raise ShapeError(f"s_max mismatch: {x.s_max} vs {y.s_max}")
    if x.n_patients != y.n_patients:
        raise ShapeError(f"patient count mismatch: {x.n_patients} vs {y.n_patients}")
    data = np.concatenate([x.data, y.data], axis=1)
    counts = np.maximum(x.slice_counts, y.slice_counts)
    return FeatureTensor(data, counts)


def expand_clinical(a: np.ndarray, s_max: int) -> FeatureTensor:
    """Broadcast an (a, I) clinical matrix along a new slice axis of length
    s_max; every slice row of patient i equals column i."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"clinical matrix must be 2-D with positive extents, got {a.shape}")
    if s_max < 1:
        raise ShapeError("s_max must be >= 1")
    _check_finite(a, "clinical matrix")
    data = np.broadcast_to(a[None, :, :], (s_max, a.shape[0], a.shape[1])).copy()
    counts = np.full(a.shape[1], s_max, dtype=np.int64)
    return FeatureTensor(data, counts)


def global_avg_pool(t: FeatureTensor) -> np.ndarray:
    """Mean over the slice axis, dividing by s_max (padded rows included).

    Returns an array of shape (feat_dim, n_patients).
    """
    return t.data.mean(axis=0)


def masked_avg_pool(t: FeatureTensor) -> np.ndarray:
    """Mean over true (unpadded) slices only; optional alternative to
    global_avg_pool, off by default in the pipeline."""
    sums = t.data.sum(axis=0)
    counts = np.maximum(t.slice_counts, 1).astype(np.float64)
    return sums / counts[None, :]
