"""Learnable self-attention recalibration over the fused multimodal
tensor: modality alignment, 1x1-convolution Q/K/V over the feature
channel, a position-by-position attention map scaled by sqrt(I), value
reweighting, and global average pooling. Forward and backward passes are
exact.

Shapes: a fused tensor is (m_max, c, I) with c = 2*b_k + a. Q/K/V are
reshaped to (I, D) with D = m_max * c (patient i's row is the row-major
flattening of its (m_max, c) block). The attention map is (D, D) with
softmax over the key (first) axis, so every column sums to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .tensors import (
    FeatureTensor,
    NormStats,
    concat_features,
    expand_clinical,
    znormalize,
)

DEFAULT_D_CAP = 4096


@dataclass(frozen=True)
class FusedTensor:
    """Aligned concatenation of normalized CT, PET, and clinical features."""

    data: np.ndarray  # (m_max, c, I)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"fused tensor must be 3-D, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def m_max(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def n_patients(self) -> int:
        return self.data.shape[2]


@dataclass
class FusionParams:
    """1x1-convolution kernels over the feature channel plus biases."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray

    @classmethod
    def init(cls, c: int, rng: np.random.Generator) -> "FusionParams":
        bound = 1.0 / math.sqrt(c)
        def w():
            return rng.uniform(-bound, bound, size=(c, c))
        return cls(
            Wq=w(), Wk=w(), Wv=w(),
            bq=np.zeros(c), bk=np.zeros(c), bv=np.zeros(c),
        )

    @classmethod
    def identity(cls, c: int) -> "FusionParams":
        eye = np.eye(c)
        return cls(
            Wq=eye.copy(), Wk=eye.copy(), Wv=eye.copy(),
            bq=np.zeros(c), bk=np.zeros(c), bv=np.zeros(c),
        )

    def params(self) -> list[np.ndarray]:
        return [self.Wq, self.Wk, self.Wv, self.bq, self.bk, self.bv]


@dataclass
class AttentionCache:
    """Activations saved by the forward pass for the exact backward pass."""

    fused: np.ndarray   # (m, c, I)
    q: np.ndarray       # (I, D)
    k: np.ndarray       # (I, D)
    v: np.ndarray       # (I, D)
    alpha: np.ndarray   # (D, D), column-stochastic
    params: FusionParams
    identity_qkv: bool


def align_and_fuse(
    ct: FeatureTensor,
    pet: FeatureTensor,
    clinical: np.ndarray | None,
    ct_stats: NormStats | None,
    pet_stats: NormStats | None,
    clinical_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> FusedTensor:
    """Normalize each modality, extend the shorter imaging modality with
    zero rows to the longer one's slice count, concatenate CT/PET on the
    feature axis, then broadcast and append the clinical matrix.

    clinical_stats is an optional (mean, std) pair over patients for the
    clinical matrix (fitted on the training split by the harness).
    """
    if ct.n_patients != pet.n_patients:
        raise ShapeError(
            f"patient count mismatch: ct {ct.n_patients} vs pet {pet.n_patients}"
        )
    if ct.feat_dim != pet.feat_dim:
        raise ShapeError(
            f"extractor width mismatch: ct {ct.feat_dim} vs pet {pet.feat_dim}"
        )
    if ct_stats is not None:
        ct = znormalize(ct, ct_stats)
    if pet_stats is not None:
        pet = znormalize(pet, pet_stats)
    m_max = max(ct.s_max, pet.s_max)
    ct = _extend_rows(ct, m_max)
    pet = _extend_rows(pet, m_max)
    fused = concat_features(ct, pet)
    if clinical is not None and clinical.shape[0] > 0:
        clin = np.asarray(clinical, dtype=np.float64)
        if clin.shape[1] != ct.n_patients:
            raise ShapeError("clinical matrix patient count mismatch")
        if clinical_stats is not None:
            mean, std = clinical_stats
            clin = (clin - mean[:, None]) / std[:, None]
        fused = concat_features(fused, expand_clinical(clin, m_max))
    return FusedTensor(fused.data)


def fuse_single_modality(
    t: FeatureTensor,
    stats: NormStats | None,
    clinical: np.ndarray | None,
    clinical_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> FusedTensor:
    """Fused tensor from one imaging modality (plus optional clinical)."""
    if stats is not None:
        t = znormalize(t, stats)
    fused = t
    if clinical is not None and clinical.shape[0] > 0:
        clin = np.asarray(clinical, dtype=np.float64)
        if clinical_stats is not None:
            mean, std = clinical_stats
            clin = (clin - mean[:, None]) / std[:, None]
        fused = concat_features(fused, expand_clinical(clin, t.s_max))
    return FusedTensor(fused.data)


def fuse_clinical_only(
    clinical: np.ndarray,
    clinical_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> FusedTensor:
    clin = np.asarray(clinical, dtype=np.float64)
    if clinical_stats is not None:
        mean, std = clinical_stats
        clin = (clin - mean[:, None]) / std[:, None]
    return FusedTensor(expand_clinical(clin, 1).data)


def _extend_rows(t: FeatureTensor, m_max: int) -> FeatureTensor:
    if t.s_max == m_max:
        return t
    pad = np.zeros((m_max - t.s_max, t.feat_dim, t.n_patients))
    return FeatureTensor(np.concatenate([t.data, pad], axis=0), t.slice_counts)


def _apply_channel_map(
    fused: np.ndarray, w: np.ndarray, b: np.ndarray
) -> np.ndarray:
    # (m, c, I) x (c, c): map each (slice, patient) position's channel vector.
    return np.einsum("fg,sgi->sfi", w, fused) + b[None, :, None]


def _to_patient_rows(t: np.ndarray) -> np.ndarray:
    # (m, c, I) -> (I, m*c), row i = row-major flattening of patient i's block.
    m, c, n = t.shape
    return t.transpose(2, 0, 1).reshape(n, m * c)


def _from_patient_rows(mat: np.ndarray, m: int, c: int) -> np.ndarray:
    n = mat.shape[0]
    return mat.reshape(n, m, c).transpose(1, 2, 0)


def attention_forward(
    fused: FusedTensor,
    params: FusionParams,
    d_cap: int = DEFAULT_D_CAP,
    identity_qkv: bool = False,
) -> tuple[np.ndarray, AttentionCache]:
    """Recalibrate the fused tensor and pool over the slice axis.

    Returns (pooled, cache) with pooled of shape (c, I). identity_qkv
    bypasses the learnable channel maps (ablation without convolutions).
    """
    m, c, n = fused.data.shape
    d = m * c
    if d > d_cap:
        raise ParameterError(
            f"attention map would be {d}x{d}; exceeds cap {d_cap}"
        )
    if not identity_qkv:
        if params.Wq.shape != (c, c):
            raise ShapeError(
                f"fusion params are {params.Wq.shape}, fused channel width is {c}"
            )
        q_t = _apply_channel_map(fused.data, params.Wq, params.bq)
        k_t = _apply_channel_map(fused.data, params.Wk, params.bk)
        v_t = _apply_channel_map(fused.data, params.Wv, params.bv)
    else:
        q_t = k_t = v_t = fused.data
    q = _to_patient_rows(q_t)
    k = _to_patient_rows(k_t)
    v = _to_patient_rows(v_t)
    scores = (k.T @ q) / math.sqrt(n)
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    alpha = e / e.sum(axis=0, keepdims=True)
    out = v @ alpha  # (I, D)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activations in attention output")
    out_t = _from_patient_rows(out, m, c)
    pooled = out_t.mean(axis=0)
    cache = AttentionCache(
        fused=fused.data, q=q, k=k, v=v, alpha=alpha,
        params=params, identity_qkv=identity_qkv,
    )
    return pooled, cache


def _channel_map_backward(
    grad_t: np.ndarray, fused: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through out[s,f,i] = sum_g w[f,g] fused[s,g,i] + b[f]."""
    g_w = np.einsum("sfi,sgi->fg", grad_t, fused)
    g_b = grad_t.sum(axis=(0, 2))
    g_fused = np.einsum("fg,sfi->sgi", w, grad_t)
    return g_fused, g_w, g_b


def attention_backward(
    cache: AttentionCache, grad_pooled: np.ndarray
) -> tuple[FusionParams, np.ndarray]:
    """Exact gradients of sum(grad_pooled * pooled) w.r.t. the fusion
    parameters and the fused input.

    Returns (grad_params, grad_fused) with grad_fused shaped (m, c, I).
    """
    m, c, n = cache.fused.shape
    if grad_pooled.shape != (c, n):
        raise ShapeError(
            f"grad_pooled must be ({c}, {n}), got {grad_pooled.shape}"
        )
    # pooling: pooled[f,i] = mean_s out_t[s,f,i]
    g_out_t = np.broadcast_to(grad_pooled[None, :, :] / m, (m, c, n))
    g_out = _to_patient_rows(np.ascontiguousarray(g_out_t))  # (I, D)

    alpha, q, k, v = cache.alpha, cache.q, cache.k, cache.v
    g_v_mat = g_out @ alpha.T
    g_alpha = v.T @ g_out
    # softmax over the key axis, per column
    dot = (alpha * g_alpha).sum(axis=0, keepdims=True)
    g_scores = alpha * (g_alpha - dot)
    scale = 1.0 / math.sqrt(n)
    g_k_mat = q @ g_scores.T * scale
    g_q_mat = k @ g_scores * scale

    g_q_t = _from_patient_rows(g_q_mat, m, c)
    g_k_t = _from_patient_rows(g_k_mat, m, c)
    g_v_t = _from_patient_rows(g_v_mat, m, c)

    if cache.identity_qkv:
        zeros_w = np.zeros((c, c))
        zeros_b = np.zeros(c)
        grad_params = FusionParams(
            Wq=zeros_w, Wk=zeros_w.copy(), Wv=zeros_w.copy(),
            bq=zeros_b, bk=zeros_b.copy(), bv=zeros_b.copy(),
        )
        grad_fused = g_q_t + g_k_t + g_v_t
        return grad_params, grad_fused

    p = cache.params
    g_f_q, g_wq, g_bq = _channel_map_backward(g_q_t, cache.fused, p.Wq)
    g_f_k, g_wk, g_bk = _channel_map_backward(g_k_t, cache.fused, p.Wk)
    g_f_v, g_wv, g_bv = _channel_map_backward(g_v_t, cache.fused, p.Wv)
    grad_params = FusionParams(
        Wq=g_wq, Wk=g_wk, Wv=g_wv, bq=g_bq, bk=g_bk, bv=g_bv
    )
    return grad_params, g_f_q + g_f_k + g_f_v
