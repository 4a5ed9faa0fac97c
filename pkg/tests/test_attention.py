import math

import numpy as np
import pytest

from medmimic.attention import (
    AttentionCache,
    FusedTensor,
    FusionParams,
    align_and_fuse,
    attention_backward,
    attention_forward,
)
from medmimic.errors import ParameterError, ShapeError
from medmimic.nn import grad_check
from medmimic.tensors import FeatureMatrix, FeatureTensor, fit_norm_stats, pad_stack


def scalar_attention_oracle(fused, p: FusionParams):
    """Straight-line loop implementation of the recalibration pass,
    independent of the vectorized path."""
    m, c, n = fused.shape
    d = m * c
    q = np.zeros((n, d))
    k = np.zeros((n, d))
    v = np.zeros((n, d))
    for i in range(n):
        for s in range(m):
            for f in range(c):
                aq, ak, av = p.bq[f], p.bk[f], p.bv[f]
                for g in range(c):
                    aq += p.Wq[f, g] * fused[s, g, i]
                    ak += p.Wk[f, g] * fused[s, g, i]
                    av += p.Wv[f, g] * fused[s, g, i]
                q[i, s * c + f] = aq
                k[i, s * c + f] = ak
                v[i, s * c + f] = av
    scores = np.zeros((d, d))
    for d1 in range(d):
        for d2 in range(d):
            acc = 0.0
            for i in range(n):
                acc += k[i, d1] * q[i, d2]
            scores[d1, d2] = acc / math.sqrt(n)
    alpha = np.zeros((d, d))
    for d2 in range(d):
        col = scores[:, d2]
        e = np.exp(col - col.max())
        alpha[:, d2] = e / e.sum()
    out = np.zeros((n, d))
    for i in range(n):
        for d2 in range(d):
            acc = 0.0
            for d1 in range(d):
                acc += v[i, d1] * alpha[d1, d2]
            out[i, d2] = acc
    pooled = np.zeros((c, n))
    for f in range(c):
        for i in range(n):
            acc = 0.0
            for s in range(m):
                acc += out[i, s * c + f]
            pooled[f, i] = acc / m
    return pooled, alpha


def random_fused(rng, m=2, c=3, n=2):
    return FusedTensor(rng.normal(size=(m, c, n)))


def test_forward_matches_scalar_oracle_many_configs():
    rng = np.random.default_rng(0)
    for trial in range(20):
        m = int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        n = int(rng.integers(2, 5))
        fused = random_fused(rng, m, c, n)
        params = FusionParams.init(c, rng)
        params.bq[:] = rng.normal(size=c)
        params.bk[:] = rng.normal(size=c)
        params.bv[:] = rng.normal(size=c)
        pooled, cache = attention_forward(fused, params)
        expected, alpha = scalar_attention_oracle(fused.data, params)
        np.testing.assert_allclose(pooled, expected, atol=1e-10)
        np.testing.assert_allclose(cache.alpha, alpha, atol=1e-10)


def test_alpha_column_stochastic():
    rng = np.random.default_rng(1)
    fused = random_fused(rng, 3, 4, 5)
    params = FusionParams.init(4, rng)
    _pooled, cache = attention_forward(fused, params)
    np.testing.assert_allclose(cache.alpha.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(cache.alpha >= 0)


def test_zero_qk_gives_uniform_attention_and_mean_output():
    rng = np.random.default_rng(2)
    m, c, n = 2, 3, 4
    fused = random_fused(rng, m, c, n)
    params = FusionParams.identity(c)
    params.Wq[:] = 0.0
    params.Wk[:] = 0.0
    pooled, cache = attention_forward(fused, params)
    d = m * c
    np.testing.assert_allclose(cache.alpha, 1.0 / d, atol=1e-12)
    # V = fused; uniform alpha averages each patient's block over positions
    per_patient_mean = fused.data.mean(axis=(0, 1))
    np.testing.assert_allclose(pooled, per_patient_mean[None, :].repeat(c, 0), atol=1e-12)


def test_output_in_value_convex_hull():
    rng = np.random.default_rng(3)
    fused = random_fused(rng, 2, 2, 3)
    params = FusionParams.init(2, rng)
    _pooled, cache = attention_forward(fused, params)
    out = cache.v @ cache.alpha
    for i in range(out.shape[0]):
        assert out[i].min() >= cache.v[i].min() - 1e-9
        assert out[i].max() <= cache.v[i].max() + 1e-9


def test_alpha_invariant_to_constant_score_shift():
    rng = np.random.default_rng(4)
    fused = random_fused(rng, 2, 2, 3)
    params = FusionParams.init(2, rng)
    _p1, cache1 = attention_forward(fused, params)
    # shifting every score in a column by a constant leaves softmax fixed
    scores = (cache1.k.T @ cache1.q) / math.sqrt(fused.n_patients)
    shifted = scores + 7.5
    e = np.exp(shifted - shifted.max(axis=0, keepdims=True))
    alpha2 = e / e.sum(axis=0, keepdims=True)
    np.testing.assert_allclose(cache1.alpha, alpha2, atol=1e-12)


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    fused = random_fused(rng, 2, 3, 4)
    params = FusionParams.init(3, rng)
    p1, _ = attention_forward(fused, params)
    p2, _ = attention_forward(fused, params)
    np.testing.assert_array_equal(p1, p2)


def test_d_cap_enforced():
    fused = FusedTensor(np.zeros((100, 50, 2)))
    with pytest.raises(ParameterError):
        attention_forward(fused, FusionParams.identity(50), d_cap=4096)


def test_backward_zero_grad_gives_zero():
    rng = np.random.default_rng(6)
    fused = random_fused(rng, 2, 3, 2)
    params = FusionParams.init(3, rng)
    _pooled, cache = attention_forward(fused, params)
    grads, g_in = attention_backward(cache, np.zeros((3, 2)))
    for g in grads.params():
        np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_array_equal(g_in, 0.0)


def test_backward_finite_differences():
    rng = np.random.default_rng(7)
    m, c, n = 2, 3, 2
    fused = random_fused(rng, m, c, n)
    params = FusionParams.init(c, rng)
    contract = rng.normal(size=(c, n))

    parts = params.params()
    sizes = [p.size for p in parts]
    shapes = [p.shape for p in parts]

    def loss_fn(theta):
        off = 0
        vals = []
        for sz, sh in zip(sizes, shapes):
            vals.append(theta[off : off + sz].reshape(sh))
            off += sz
        local = FusionParams(*vals)
        pooled, _cache = attention_forward(fused, local)
        return float(pooled.ravel() @ contract.ravel())

    _pooled, cache = attention_forward(fused, params)
    grads, _g_in = attention_backward(cache, contract)
    theta0 = np.concatenate([p.ravel() for p in parts])
    analytic = np.concatenate([g.ravel() for g in grads.params()])
    assert grad_check(loss_fn, theta0, analytic, eps=1e-5) < 1e-4


def test_backward_input_gradient_finite_differences():
    rng = np.random.default_rng(8)
    m, c, n = 2, 2, 3
    fused = random_fused(rng, m, c, n)
    params = FusionParams.init(c, rng)
    contract = rng.normal(size=(c, n))

    def loss_fn(theta):
        pooled, _ = attention_forward(FusedTensor(theta.reshape(m, c, n)), params)
        return float(pooled.ravel() @ contract.ravel())

    _pooled, cache = attention_forward(fused, params)
    _grads, g_in = attention_backward(cache, contract)
    assert grad_check(loss_fn, fused.data.ravel(), g_in.ravel(), eps=1e-5) < 1e-4


def test_wv_gradient_reduces_to_mean_pool_when_qk_zero():
    rng = np.random.default_rng(9)
    m, c, n = 2, 3, 4
    fused = random_fused(rng, m, c, n)
    params = FusionParams.init(c, rng)
    params.Wq[:] = 0.0
    params.Wk[:] = 0.0
    params.bq[:] = 0.0
    params.bk[:] = 0.0
    contract = rng.normal(size=(c, n))
    _pooled, cache = attention_forward(fused, params)
    grads, _g_in = attention_backward(cache, contract)
    # with uniform alpha every out column equals mean_{d1} v[i, d1], so
    # pooled[f, i] = (1/d) sum_{d1} v[i, d1] for every f, and the gradient
    # spreads contract uniformly over the V positions
    d = m * c
    g_wv = np.zeros((c, c))
    coeff = contract.sum(axis=0) / d
    for i in range(n):
        for s in range(m):
            for f in range(c):
                g_wv[f, :] += coeff[i] * fused.data[s, :, i]
    np.testing.assert_allclose(grads.Wv, g_wv, atol=1e-10)


def test_align_and_fuse_dims_and_masking():
    rng = np.random.default_rng(10)
    b_k, n = 2, 2
    ct = pad_stack(
        [FeatureMatrix(rng.normal(size=(2, b_k))), FeatureMatrix(rng.normal(size=(3, b_k)))],
        s_max=3,
    )
    pet = pad_stack(
        [FeatureMatrix(rng.normal(size=(5, b_k))), FeatureMatrix(rng.normal(size=(4, b_k)))],
        s_max=5,
    )
    clinical = rng.normal(size=(1, n))
    fused = align_and_fuse(ct, pet, clinical, None, None)
    assert fused.data.shape == (5, 2 * b_k + 1, n)
    # CT rows beyond each patient's true slice count are zero in CT columns
    assert np.all(fused.data[2:, :b_k, 0] == 0.0)
    assert np.all(fused.data[3:, :b_k, 1] == 0.0)
    # clinical columns constant along the slice axis
    clin_cols = fused.data[:, 2 * b_k :, :]
    np.testing.assert_array_equal(clin_cols, np.broadcast_to(clin_cols[0], clin_cols.shape))


def test_align_and_fuse_rejects_mismatches():
    ct = pad_stack([FeatureMatrix(np.zeros((2, 2)))], 2)
    pet3 = pad_stack([FeatureMatrix(np.zeros((2, 3)))], 2)
    with pytest.raises(ShapeError):
        align_and_fuse(ct, pet3, None, None, None)
    pet_other = pad_stack(
        [FeatureMatrix(np.zeros((2, 2))), FeatureMatrix(np.zeros((2, 2)))], 2
    )
    with pytest.raises(ShapeError):
        align_and_fuse(ct, pet_other, None, None, None)


def test_align_and_fuse_applies_normalization():
    rng = np.random.default_rng(11)
    mats = [FeatureMatrix(rng.normal(5.0, 2.0, size=(2, 2))) for _ in range(8)]
    ct = pad_stack(mats, 2)
    pet = pad_stack(mats, 2)
    stats = fit_norm_stats(ct)
    fused = align_and_fuse(ct, pet, None, stats, stats)
    np.testing.assert_allclose(fused.data[:, :2, :].mean(axis=2), 0.0, atol=1e-9)
