"""Slice-feature extraction by principal component analysis: flatten
slices, center per pixel, take the top components of the centered data
via SVD, and project.

The basis is fitted globally over all training slices (one shared basis)
so downstream feature axes are comparable across patients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as mio
from .errors import ParameterError, ShapeError
from .tensors import FeatureMatrix

DEFAULT_COMPONENTS = 64


@dataclass(frozen=True)
class PcaModel:
    """Fitted projection: per-pixel mean, orthonormal components
    (columns, descending eigenvalue order), and eigenvalues."""

    mean: np.ndarray          # (p,)
    components: np.ndarray    # (p, b1), orthonormal columns
    eigenvalues: np.ndarray   # (b1,), descending, >= 0

    @property
    def n_pixels(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[1]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is non-negative."""
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs[None, :]


def pca_fit(slices: np.ndarray, b1: int) -> PcaModel:
    """Fit the top-b1 principal subspace of (n_samples, p) slice data.

    Eigenvalues are population variances of the projections. If the data
    rank is below b1, trailing eigenvalues are clamped to 0 and the
    component set is completed to an orthonormal basis.
    """
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 2:
        raise ShapeError(f"expected 2-D slice matrix, got {slices.shape}")
    n, p = slices.shape
    if n < 2:
        raise ParameterError("need at least 2 slices to fit")
    if not 1 <= b1 <= min(n - 1, p):
        raise ParameterError(
            f"b1={b1} out of range [1, {min(n - 1, p)}] for data {slices.shape}"
        )
    mean = slices.mean(axis=0)
    centered = slices - mean
    # SVD of the centered data; avoids forming the p x p covariance.
    _u, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (s ** 2) / n
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    components = vt.T[:, :b1]
    eig = eigenvalues[:b1].copy()
    # Rank-deficient data: SVD already returns an orthonormal completion,
    # the associated eigenvalues just come out (numerically) zero.
    tiny = eig < max(1e-12 * max(eig[0], 1.0), 0.0)
    eig[tiny] = 0.0
    components = _fix_signs(components)
    return PcaModel(mean=mean, components=components, eigenvalues=eig)


def pca_transform(model: PcaModel, slices: np.ndarray) -> FeatureMatrix:
    """Project (k, p) slices onto the fitted basis: (slices - mean) @ components."""
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 2 or slices.shape[1] != model.n_pixels:
        raise ShapeError(
            f"slices {slices.shape} incompatible with model p={model.n_pixels}"
        )
    return FeatureMatrix((slices - model.mean) @ model.components)


def save_pca_model(model: PcaModel, out_dir: str | Path) -> None:
    """Persist as MMFT pair (mean, components) plus a small CSV header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mio.write_mmft(model.mean.astype(np.float32), out_dir / "pca_mean.mmft")
    mio.write_mmft(model.components.astype(np.float32), out_dir / "pca_components.mmft")
    mio.write_mmft(model.eigenvalues.astype(np.float32), out_dir / "pca_eigenvalues.mmft")
    with open(out_dir / "pca_header.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n_pixels", "n_components"])
        w.writerow([model.n_pixels, model.n_components])


def load_pca_model(model_dir: str | Path) -> PcaModel:
    model_dir = Path(model_dir)
    mean = mio.read_mmft(model_dir / "pca_mean.mmft").astype(np.float64)
    components = mio.read_mmft(model_dir / "pca_components.mmft").astype(np.float64)
    eigenvalues = mio.read_mmft(model_dir / "pca_eigenvalues.mmft").astype(np.float64)
    with open(model_dir / "pca_header.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    p, b1 = int(rows[1][0]), int(rows[1][1])
    if mean.shape != (p,) or components.shape != (p, b1):
        raise ShapeError("pca model files inconsistent with header")
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)
