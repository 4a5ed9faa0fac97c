"""The residual fully-connected classifier and its composition with the
attention recalibration stage into the full multimodal fusion
classification network (MFCN), plus ablation variants, training loops,
and a linear softmax baseline.

Classifier structure: hidden layer -> n_blocks residual blocks (linear,
BN, ReLU, dropout, linear, BN, skip add, ReLU) -> linear head ->
softmax.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as mio
from .attention import (
    AttentionCache,
    DEFAULT_D_CAP,
    FusedTensor,
    FusionParams,
    attention_backward,
    attention_forward,
)
from .errors import DataError, DegenerateLabelsError, ParameterError, ShapeError
from .nn import (
    AdamState,
    BatchNorm,
    Linear,
    LrSchedule,
    adam_step,
    cosine_lr,
    dropout,
    make_rng,
    onehot_encode,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
)

ABLATION_VARIANTS = (
    "no_residual",
    "no_attention",
    "no_dropout",
    "no_conv",
    "depth3",
    "depth4",
    "depth5",
    "depth6",
)


@dataclass(frozen=True)
class ResFusionConfig:
    hidden_dim: int = 256
    n_blocks: int = 6
    dropout_p: float = 0.2
    n_classes: int = 2
    use_residual: bool = True
    use_attention: bool = True
    use_dropout: bool = True
    use_qkv_conv: bool = True
    d_cap: int = DEFAULT_D_CAP
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ParameterError("hidden_dim must be >= 1")
        if not 1 <= self.n_blocks <= 16:
            raise ParameterError("n_blocks must be in [1, 16]")
        if self.n_classes < 2:
            raise ParameterError("n_classes must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError("dropout_p must be in [0, 1)")

    @property
    def effective_dropout(self) -> float:
        return self.dropout_p if self.use_dropout else 0.0


def ablate(cfg: ResFusionConfig, variant: str) -> ResFusionConfig:
    """Return the config for one ablation variant of the base config."""
    if variant == "no_residual":
        return replace(cfg, use_residual=False)
    if variant == "no_attention":
        return replace(cfg, use_attention=False)
    if variant == "no_dropout":
        return replace(cfg, use_dropout=False, dropout_p=0.0)
    if variant == "no_conv":
        return replace(cfg, use_qkv_conv=False)
    if variant.startswith("depth") and variant[5:].isdigit():
        depth = int(variant[5:])
        if 3 <= depth <= 6:
            return replace(cfg, n_blocks=depth)
    raise ParameterError(f"unknown ablation variant {variant!r}")


@dataclass
class ResBlock:
    lin1: Linear
    bn1: BatchNorm
    lin2: Linear
    bn2: BatchNorm
    _cache: tuple | None = field(default=None, repr=False)


class MfcnModel:
    """Attention recalibration plus the residual classifier, trained end
    to end. Input is a fused tensor; output is class probabilities."""

    def __init__(self, cfg: ResFusionConfig, input_dim: int, rng=None):
        self.cfg = cfg
        self.input_dim = input_dim
        rng = rng if rng is not None else make_rng(cfg.seed)
        h = cfg.hidden_dim
        # Fusion params are always allocated (identity pass-through when
        # the convolution ablation is active) so shapes stay stable.
        if cfg.use_qkv_conv:
            self.fusion = FusionParams.init(input_dim, rng)
        else:
            self.fusion = FusionParams.identity(input_dim)
        self.hidden = Linear.init(h, input_dim, rng)
        self.bn0 = BatchNorm.init(h)
        self.blocks = [
            ResBlock(
                lin1=Linear.init(h, h, rng),
                bn1=BatchNorm.init(h),
                lin2=Linear.init(h, h, rng),
                bn2=BatchNorm.init(h),
            )
            for _ in range(cfg.n_blocks)
        ]
        self.head = Linear.init(cfg.n_classes, h, rng)
        self._dropout_rng = make_rng(cfg.seed + 1)
        self._attn_cache: AttentionCache | None = None
        self._net_cache: list | None = None

    # -- parameter plumbing -------------------------------------------------

    def fusion_trainable(self) -> bool:
        return self.cfg.use_attention and self.cfg.use_qkv_conv

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Trainable parameters in a fixed order."""
        out: list[tuple[str, np.ndarray]] = []
        if self.fusion_trainable():
            out += [
                ("fusion.Wq", self.fusion.Wq),
                ("fusion.Wk", self.fusion.Wk),
                ("fusion.Wv", self.fusion.Wv),
                ("fusion.bq", self.fusion.bq),
                ("fusion.bk", self.fusion.bk),
                ("fusion.bv", self.fusion.bv),
            ]
        out += [
            ("hidden.W", self.hidden.W),
            ("hidden.b", self.hidden.b),
            ("bn0.gamma", self.bn0.gamma),
            ("bn0.beta", self.bn0.beta),
        ]
        for p, blk in enumerate(self.blocks):
            out += [
                (f"block{p}.lin1.W", blk.lin1.W),
                (f"block{p}.lin1.b", blk.lin1.b),
                (f"block{p}.bn1.gamma", blk.bn1.gamma),
                (f"block{p}.bn1.beta", blk.bn1.beta),
                (f"block{p}.lin2.W", blk.lin2.W),
                (f"block{p}.lin2.b", blk.lin2.b),
                (f"block{p}.bn2.gamma", blk.bn2.gamma),
                (f"block{p}.bn2.beta", blk.bn2.beta),
            ]
        out += [("head.W", self.head.W), ("head.b", self.head.b)]
        return out

    def params(self) -> list[np.ndarray]:
        return [p for _, p in self.named_params()]

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, theta: np.ndarray) -> None:
        params = self.params()
        if theta.size != sum(p.size for p in params):
            raise ShapeError("flat parameter vector has wrong length")
        offset = 0
        for p in params:
            n = p.size
            p[...] = theta[offset : offset + n].reshape(p.shape)
            offset += n

    # -- forward / backward -------------------------------------------------

    def pool_input(self, fused: FusedTensor) -> np.ndarray:
        """Attention recalibration + pooling, or a plain pooled bypass
        when the attention ablation is active."""
        if fused.c != self.input_dim:
            raise ShapeError(
                f"fused channel width {fused.c} != model input dim {self.input_dim}"
            )
        if self.cfg.use_attention:
            pooled, cache = attention_forward(
                fused,
                self.fusion,
                d_cap=self.cfg.d_cap,
                identity_qkv=not self.cfg.use_qkv_conv,
            )
            self._attn_cache = cache
        else:
            pooled = fused.data.mean(axis=0)
            self._attn_cache = None
        return pooled

    def classifier_forward(self, x: np.ndarray, train: bool, masks=None) -> np.ndarray:
        """Residual classifier over pooled features (input_dim, B) -> logits.

        masks, if given, are fixed dropout multipliers per block (used by
        the gradient checker to keep the loss deterministic).
        """
        cfg = self.cfg
        cache: list = []
        a0 = self.hidden.forward(x)
        b0 = self.bn0.forward(a0, train)
        h = relu(b0)
        cache.append(("stem", b0))
        for p, blk in enumerate(self.blocks):
            h_prev = h
            a1 = blk.lin1.forward(h_prev)
            n1 = blk.bn1.forward(a1, train)
            r1 = relu(n1)
            if masks is not None:
                mask = masks[p]
                d1 = r1 * mask
            else:
                d1, mask = dropout(r1, cfg.effective_dropout, self._dropout_rng, train)
            a2 = blk.lin2.forward(d1)
            n2 = blk.bn2.forward(a2, train)
            s = n2 + h_prev if cfg.use_residual else n2
            h = relu(s)
            cache.append(("block", n1, mask, s))
        logits = self.head.forward(h)
        self._net_cache = cache
        return logits

    def classifier_backward(self, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients for the classifier parameters (same order as
        named_params minus the fusion entries) plus grad wrt pooled input
        as the final element."""
        if self._net_cache is None:
            raise ShapeError("backward before forward")
        cache = self._net_cache
        cfg = self.cfg
        g_h, g_head_w, g_head_b = self.head.backward(grad_logits)
        block_grads: list[list[np.ndarray]] = []
        for p in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[p]
            _tag, n1, mask, s = cache[p + 1]
            g_s = relu_backward(g_h, s)
            g_n2 = g_s
            g_a2, g_w2, g_b2 = blk.bn2.backward(g_n2)
            g_d1, g_lw2, g_lb2 = blk.lin2.backward(g_a2)
            g_r1 = g_d1 * mask
            g_n1 = relu_backward(g_r1, n1)
            g_a1, g_w1, g_b1 = blk.bn1.backward(g_n1)
            g_hprev, g_lw1, g_lb1 = blk.lin1.backward(g_a1)
            if cfg.use_residual:
                g_hprev = g_hprev + g_s
            block_grads.append([g_lw1, g_lb1, g_w1, g_b1, g_lw2, g_lb2, g_w2, g_b2])
            g_h = g_hprev
        _tag, b0 = cache[0]
        g_b0 = relu_backward(g_h, b0)
        g_a0, g_g0, g_be0 = self.bn0.backward(g_b0)
        g_x, g_hw, g_hb = self.hidden.backward(g_a0)
        grads = [g_hw, g_hb, g_g0, g_be0]
        for bg in reversed(block_grads):
            grads.extend(bg)
        grads.extend([g_head_w, g_head_b])
        grads.append(g_x)
        return grads

    def loss_and_grads(
        self,
        fused: FusedTensor,
        onehot: np.ndarray,
        train: bool = True,
        masks=None,
    ) -> tuple[float, list[np.ndarray], np.ndarray]:
        """Full forward + backward. Returns (loss, grads aligned with
        named_params order, probs)."""
        pooled = self.pool_input(fused)
        logits = self.classifier_forward(pooled, train, masks=masks)
        loss, probs, grad_logits = softmax_cross_entropy(logits, onehot)
        net_grads = self.classifier_backward(grad_logits)
        g_pooled = net_grads.pop()
        grads: list[np.ndarray] = []
        if self.fusion_trainable():
            grad_fp, _grad_fused = attention_backward(self._attn_cache, g_pooled)
            grads.extend(grad_fp.params())
        grads.extend(net_grads)
        return loss, grads, probs

    def predict_proba(self, fused: FusedTensor) -> np.ndarray:
        """Eval-mode class probabilities, shape (C, B)."""
        pooled = self.pool_input(fused)
        logits = self.classifier_forward(pooled, train=False)
        return softmax(logits)


@dataclass
class TrainReport:
    losses: list[float]
    lr_trace: list[float]
    wall_seconds: float
    model: MfcnModel | None = None


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.001
    lr_min: float = 0.0
    epochs: int = 200


def train_model(
    model: MfcnModel,
    fused: FusedTensor,
    labels: np.ndarray,
    hyper: Hyper,
) -> TrainReport:
    """Full-batch Adam with a per-epoch cosine schedule."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise DegenerateLabelsError("training labels contain a single class")
    onehot = onehot_encode(labels, model.cfg.n_classes)
    params = model.params()
    state = AdamState.for_params(params)
    schedule = LrSchedule(hyper.lr, hyper.lr_min, max(hyper.epochs, 1))
    losses, lrs = [], []
    t0 = time.perf_counter()
    for epoch in range(hyper.epochs):
        loss, grads, _probs = model.loss_and_grads(fused, onehot, train=True)
        lr = cosine_lr(schedule, epoch)
        adam_step(state, params, grads, lr)
        losses.append(loss)
        lrs.append(lr)
    return TrainReport(
        losses=losses,
        lr_trace=lrs,
        wall_seconds=time.perf_counter() - t0,
        model=model,
    )


class LinearBaseline:
    """Softmax regression over pooled fused features; the built-in sanity
    reference model."""

    def __init__(self, input_dim: int, n_classes: int, rng=None):
        rng = rng if rng is not None else make_rng(0)
        self.lin = Linear.init(n_classes, max(input_dim, 1), rng)
        self.input_dim = input_dim
        self.n_classes = n_classes

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.input_dim == 0:
            return np.full((self.n_classes, x.shape[1]), 1.0 / self.n_classes)
        return softmax(self.lin.forward(x))


def train_linear_baseline(
    x: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    hyper: Hyper,
    rng=None,
) -> tuple[LinearBaseline, TrainReport]:
    """Train softmax regression with Adam + cosine schedule on pooled
    features x of shape (dim, B)."""
    labels = np.asarray(labels, dtype=np.int64)
    model = LinearBaseline(x.shape[0], n_classes, rng)
    onehot = onehot_encode(labels, n_classes)
    t0 = time.perf_counter()
    if x.shape[0] == 0:
        loss = float(np.log(n_classes))
        return model, TrainReport([loss] * hyper.epochs, [0.0] * hyper.epochs,
                                  time.perf_counter() - t0)
    if np.unique(labels).size < 2:
        raise DegenerateLabelsError("training labels contain a single class")
    params = model.lin.params()
    state = AdamState.for_params(params)
    schedule = LrSchedule(hyper.lr, hyper.lr_min, max(hyper.epochs, 1))
    losses, lrs = [], []
    for epoch in range(hyper.epochs):
        logits = model.lin.forward(x)
        loss, _probs, g_logits = softmax_cross_entropy(logits, onehot)
        _gx, g_w, g_b = model.lin.backward(g_logits)
        lr = cosine_lr(schedule, epoch)
        adam_step(state, params, [g_w, g_b], lr)
        losses.append(loss)
        lrs.append(lr)
    return model, TrainReport(losses, lrs, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Checkpoints: a directory of MMFT files plus a manifest of names/shapes.


def save_checkpoint(model: MfcnModel, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = list(model.named_params())
    entries += [
        ("bn0.running_mean", model.bn0.running_mean),
        ("bn0.running_var", model.bn0.running_var),
    ]
    for p, blk in enumerate(model.blocks):
        entries += [
            (f"block{p}.bn1.running_mean", blk.bn1.running_mean),
            (f"block{p}.bn1.running_var", blk.bn1.running_var),
            (f"block{p}.bn2.running_mean", blk.bn2.running_mean),
            (f"block{p}.bn2.running_var", blk.bn2.running_var),
        ]
    if not model.fusion_trainable():
        for name, arr in zip(
            ("fusion.Wq", "fusion.Wk", "fusion.Wv", "fusion.bq", "fusion.bk", "fusion.bv"),
            model.fusion.params(),
        ):
            entries.append((name, arr))
    rows = []
    for name, arr in entries:
        fname = name.replace(".", "_") + ".mmft"
        mio.write_mmft(arr.astype(np.float32), out_dir / fname)
        rows.append({"name": name, "file": fname, "shape": "x".join(map(str, arr.shape))})
    meta = {
        "format_version": 1,
        "input_dim": model.input_dim,
        "config": {
            "hidden_dim": model.cfg.hidden_dim,
            "n_blocks": model.cfg.n_blocks,
            "dropout_p": model.cfg.dropout_p,
            "n_classes": model.cfg.n_classes,
            "use_residual": model.cfg.use_residual,
            "use_attention": model.cfg.use_attention,
            "use_dropout": model.cfg.use_dropout,
            "use_qkv_conv": model.cfg.use_qkv_conv,
            "d_cap": model.cfg.d_cap,
            "seed": model.cfg.seed,
        },
        "tensors": rows,
    }
    with open(out_dir / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str | Path) -> MfcnModel:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "checkpoint.json"
    if not meta_path.exists():
        raise DataError(f"missing checkpoint manifest: {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = ResFusionConfig(**meta["config"])
    model = MfcnModel(cfg, meta["input_dim"])
    by_name = {}
    for row in meta["tensors"]:
        arr = mio.read_mmft(ckpt_dir / row["file"]).astype(np.float64)
        by_name[row["name"]] = arr
    targets = dict(model.named_params())
    targets.update(
        {
            "bn0.running_mean": model.bn0.running_mean,
            "bn0.running_var": model.bn0.running_var,
        }
    )
    for p, blk in enumerate(model.blocks):
        targets[f"block{p}.bn1.running_mean"] = blk.bn1.running_mean
        targets[f"block{p}.bn1.running_var"] = blk.bn1.running_var
        targets[f"block{p}.bn2.running_mean"] = blk.bn2.running_mean
        targets[f"block{p}.bn2.running_var"] = blk.bn2.running_var
    if not model.fusion_trainable():
        for name, arr in zip(
            ("fusion.Wq", "fusion.Wk", "fusion.Wv", "fusion.bq", "fusion.bk", "fusion.bv"),
            model.fusion.params(),
        ):
            targets[name] = arr
    for name, arr in by_name.items():
        if name not in targets:
            raise DataError(f"unexpected tensor {name!r} in checkpoint")
        if targets[name].shape != arr.shape:
            raise ShapeError(f"checkpoint tensor {name!r} has shape {arr.shape}")
        targets[name][...] = arr
    return model
