import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medmimic.errors import CapacityError, InsufficientDataError, ShapeError
from medmimic.tensors import (
    FeatureMatrix,
    FeatureTensor,
    NormStats,
    concat_features,
    expand_clinical,
    fit_norm_stats,
    global_avg_pool,
    pad_stack,
    znormalize,
)


def test_pad_stack_copies_and_zero_pads():
    m = FeatureMatrix(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    t = pad_stack([m], s_max=4)
    assert t.slice_counts.tolist() == [2]
    np.testing.assert_array_equal(t.data[:2, :, 0], m.data)
    np.testing.assert_array_equal(t.data[2:, :, 0], 0.0)


def test_pad_stack_cohort_scale_dims():
    # 416 patients at extractor width 192 (the smallest pretrained encoder)
    rng = np.random.default_rng(0)
    mats = [FeatureMatrix(rng.normal(size=(1, 192))) for _ in range(416)]
    t = pad_stack(mats, s_max=3)
    assert t.data.shape == (3, 192, 416)


def test_pad_stack_mixed_feat_dims_rejected():
    a = FeatureMatrix(np.zeros((2, 512)))
    b = FeatureMatrix(np.zeros((2, 768)))
    with pytest.raises(ShapeError):
        pad_stack([a, b], s_max=4)


def test_pad_stack_capacity_error():
    m = FeatureMatrix(np.zeros((5, 2)))
    with pytest.raises(CapacityError):
        pad_stack([m], s_max=4)


def test_fit_norm_stats_constant_guard():
    data = np.ones((2, 3, 4))
    t = FeatureTensor(data, np.array([2, 2, 2, 2]))
    stats = fit_norm_stats(t)
    np.testing.assert_array_equal(stats.std, 1.0)
    np.testing.assert_array_equal(stats.mean, 1.0)
    out = znormalize(t, stats)
    np.testing.assert_array_equal(out.data, 0.0)


def test_fit_norm_stats_two_patient_arithmetic():
    data = np.zeros((1, 1, 2))
    data[0, 0, :] = [0.0, 2.0]
    t = FeatureTensor(data, np.array([1, 1]))
    stats = fit_norm_stats(t)
    assert stats.mean[0, 0] == 1.0
    assert stats.std[0, 0] == 1.0  # population std of {0, 2}


def test_fit_norm_stats_requires_two_patients():
    t = FeatureTensor(np.zeros((1, 1, 1)), np.array([1]))
    with pytest.raises(InsufficientDataError):
        fit_norm_stats(t)


def test_znormalize_standardizes_random_tensor():
    rng = np.random.default_rng(3)
    t = FeatureTensor(rng.normal(2.0, 3.0, size=(4, 5, 50)), np.full(50, 4))
    out = znormalize(t, fit_norm_stats(t))
    np.testing.assert_allclose(out.data.mean(axis=2), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=2), 1.0, atol=1e-5)


def test_znormalize_round_trip():
    rng = np.random.default_rng(4)
    t = FeatureTensor(rng.normal(size=(3, 2, 10)), np.full(10, 3))
    stats = fit_norm_stats(t)
    out = znormalize(t, stats)
    back = out.data * stats.std[:, :, None] + stats.mean[:, :, None]
    np.testing.assert_allclose(back, t.data, atol=1e-6)


def test_znormalize_identity_stats():
    rng = np.random.default_rng(5)
    t = FeatureTensor(rng.normal(size=(2, 3, 4)), np.full(4, 2))
    stats = NormStats(np.zeros((2, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(znormalize(t, stats).data, t.data)


def test_znormalize_idempotent_up_to_guard():
    rng = np.random.default_rng(6)
    t = FeatureTensor(rng.normal(size=(3, 4, 20)), np.full(20, 3))
    once = znormalize(t, fit_norm_stats(t))
    twice = znormalize(once, fit_norm_stats(once))
    np.testing.assert_allclose(twice.data, once.data, atol=1e-5)


def test_concat_features_shapes_and_order():
    rng = np.random.default_rng(7)
    x = FeatureTensor(rng.normal(size=(4, 2, 3)), np.full(3, 4))
    y = FeatureTensor(rng.normal(size=(4, 5, 3)), np.full(3, 4))
    z = concat_features(x, y)
    assert z.data.shape == (4, 7, 3)
    np.testing.assert_array_equal(z.data[:, :2, :], x.data)
    np.testing.assert_array_equal(z.data[:, 2:, :], y.data)


def test_concat_features_ct_pet_doubles_width():
    rng = np.random.default_rng(8)
    ct = FeatureTensor(rng.normal(size=(5, 3, 2)), np.full(2, 5))
    pet = FeatureTensor(rng.normal(size=(5, 3, 2)), np.full(2, 5))
    assert concat_features(ct, pet).data.shape == (5, 6, 2)


def test_concat_features_zero_width_identity():
    rng = np.random.default_rng(9)
    x = FeatureTensor(rng.normal(size=(2, 3, 4)), np.full(4, 2))
    empty = FeatureTensor(np.zeros((2, 0, 4)), np.full(4, 2))
    np.testing.assert_array_equal(concat_features(x, empty).data, x.data)


def test_concat_features_mismatch_errors():
    x = FeatureTensor(np.zeros((2, 1, 3)), np.full(3, 2))
    y = FeatureTensor(np.zeros((3, 1, 3)), np.full(3, 3))
    with pytest.raises(ShapeError):
        concat_features(x, y)


@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)
)
@settings(max_examples=30, deadline=None)
def test_concat_shape_associativity(s, f1, f2, f3):
    x = FeatureTensor(np.zeros((s, f1, 2)), np.full(2, s))
    y = FeatureTensor(np.zeros((s, f2, 2)), np.full(2, s))
    z = FeatureTensor(np.zeros((s, f3, 2)), np.full(2, s))
    left = concat_features(concat_features(x, y), z)
    right = concat_features(x, concat_features(y, z))
    assert left.data.shape == right.data.shape


def test_expand_clinical_broadcast():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])  # a=2, I=3
    t = expand_clinical(a, s_max=2)
    assert t.data.shape == (2, 2, 3)
    np.testing.assert_array_equal(t.data[0], a)
    np.testing.assert_array_equal(t.data[1], a)
    assert t.slice_counts.tolist() == [2, 2, 2]


def test_expand_clinical_single_slice_is_reshape():
    a = np.arange(6, dtype=float).reshape(2, 3)
    t = expand_clinical(a, s_max=1)
    np.testing.assert_array_equal(t.data[0], a)


def test_expand_clinical_mean_recovers_matrix():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(3, 5))
    t = expand_clinical(a, s_max=4)
    np.testing.assert_array_equal(t.data.sum(axis=0) / 4, a)


def test_global_avg_pool_identical_rows():
    row = np.arange(6, dtype=float).reshape(3, 2)  # (feat, patient)
    data = np.repeat(row[None, :, :], 4, axis=0)
    t = FeatureTensor(data, np.full(2, 4))
    np.testing.assert_allclose(global_avg_pool(t), row)


def test_global_avg_pool_arithmetic():
    data = np.zeros((2, 1, 1))
    data[0, 0, 0] = 2.0
    t = FeatureTensor(data, np.array([2]))
    assert global_avg_pool(t)[0, 0] == 1.0


def test_global_avg_pool_matches_loop():
    rng = np.random.default_rng(11)
    t = FeatureTensor(rng.normal(size=(4, 3, 5)), np.full(5, 4))
    out = global_avg_pool(t)
    for f in range(3):
        for i in range(5):
            acc = sum(t.data[s, f, i] for s in range(4)) / 4
            assert abs(out[f, i] - acc) < 1e-6


@given(st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_padding_dilutes_pooled_mean(k, extra):
    s_max = k + extra
    m = FeatureMatrix(np.ones((k, 3)))
    t = pad_stack([m], s_max)
    np.testing.assert_allclose(global_avg_pool(t), k / s_max)
