import numpy as np
import pytest

from medmimic.errors import ParameterError, ShapeError
from medmimic.pca import (
    load_pca_model,
    pca_fit,
    pca_transform,
    save_pca_model,
)


def test_identical_slices_give_zero_features():
    data = np.tile(np.arange(8.0), (5, 1))
    model = pca_fit(data, 3)
    np.testing.assert_allclose(model.eigenvalues, 0.0, atol=1e-12)
    feats = pca_transform(model, data)
    np.testing.assert_allclose(feats.data, 0.0, atol=1e-9)


def test_rank_one_line_component():
    # zero-mean points on the line y = 2x
    xs = np.array([-2.0, -1.0, 1.0, 2.0])
    data = np.stack([xs, 2 * xs], axis=1)
    model = pca_fit(data, 2)
    expected = np.array([1.0, 2.0]) / np.sqrt(5.0)
    np.testing.assert_allclose(np.abs(model.components[:, 0]), expected, atol=1e-12)
    assert model.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)


def test_full_rank_reconstruction():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(20, 16))
    model = pca_fit(data, 16)
    feats = pca_transform(model, data)
    recon = model.mean + feats.data @ model.components.T
    np.testing.assert_allclose(recon, data, atol=1e-8)


def test_projected_variances_equal_eigenvalues():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(50, 10)) * np.linspace(1, 4, 10)
    model = pca_fit(data, 6)
    feats = pca_transform(model, data).data
    var = feats.var(axis=0)  # population variance; projections are zero-mean
    np.testing.assert_allclose(var, model.eigenvalues, rtol=1e-6)


def test_orthonormal_components_descending_eigenvalues():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(30, 12))
    model = pca_fit(data, 8)
    gram = model.components.T @ model.components
    np.testing.assert_allclose(gram, np.eye(8), atol=1e-8)
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)
    assert np.all(model.eigenvalues >= 0)


def test_eigenvalue_sum_bounded_by_total_variance():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(25, 9))
    model = pca_fit(data, 5)
    total = ((data - data.mean(axis=0)) ** 2).sum() / data.shape[0]
    assert model.eigenvalues.sum() <= total + 1e-6


def test_explained_variance_monotone_in_components():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(40, 8))
    sums = [pca_fit(data, b).eigenvalues.sum() for b in range(1, 8)]
    assert all(b >= a - 1e-12 for a, b in zip(sums, sums[1:]))


def test_sign_convention_deterministic():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(30, 7))
    model = pca_fit(data, 4)
    idx = np.argmax(np.abs(model.components), axis=0)
    picked = model.components[idx, np.arange(4)]
    assert np.all(picked >= 0)


def test_transform_of_mean_is_zero():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(15, 6))
    model = pca_fit(data, 3)
    feats = pca_transform(model, model.mean[None, :])
    np.testing.assert_allclose(feats.data, 0.0, atol=1e-12)


def test_transform_linearity():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(15, 6))
    model = pca_fit(data, 3)
    x = rng.normal(size=(1, 6))
    f1 = pca_transform(model, x).data
    f2 = pca_transform(model, model.mean + 2 * (x - model.mean)).data
    np.testing.assert_allclose(f2, 2 * f1, atol=1e-10)


def test_b1_out_of_range():
    data = np.random.default_rng(9).normal(size=(5, 4))
    with pytest.raises(ParameterError):
        pca_fit(data, 5)
    with pytest.raises(ParameterError):
        pca_fit(data, 0)


def test_transform_dimension_mismatch():
    data = np.random.default_rng(10).normal(size=(10, 4))
    model = pca_fit(data, 2)
    with pytest.raises(ShapeError):
        pca_transform(model, np.zeros((3, 5)))


def test_model_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    data = rng.normal(size=(20, 8))
    model = pca_fit(data, 4)
    save_pca_model(model, tmp_path)
    back = load_pca_model(tmp_path)
    # MMFT persists at 32-bit precision
    np.testing.assert_allclose(back.mean, model.mean, atol=1e-5)
    np.testing.assert_allclose(back.components, model.components, atol=1e-6)
