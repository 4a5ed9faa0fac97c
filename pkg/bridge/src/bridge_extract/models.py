"""Encoder construction and slice preprocessing.

Three frozen encoders are supported:

    resnet18  -> 512-dim post-pool vector
    vit       -> 768-dim token aggregate (ViT-B/16)
    dinov2    -> 192-dim token aggregate (compact ViT)

Pretrained weights are loaded when available; in an offline environment
construction falls back to deterministic seeded initialization with a
warning. The output width contract is the same either way. The compact
192-dim encoder is built as a torchvision VisionTransformer because the
original self-supervised checkpoint is not redistributable through
torchvision.
"""

import warnings

import numpy as np
import torch
import torchvision.models as tvm
from PIL import Image, UnidentifiedImageError

from .errors import ImageReadError, ModelContractError

EXPECTED_DIMS = {"resnet18": 512, "vit": 768, "dinov2": 192}

IMAGE_SIZE = 224
# ImageNet channel statistics, the standard preprocessing for all three
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


def load_slice(path) -> torch.Tensor:
    """Decode one slice image to a normalized (3, H, W) tensor.

    Single-channel images are replicated across three channels before
    encoding, so grayscale slices enter the encoder with identical
    channel values.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("L") if img.mode in ("L", "I", "I;16", "1") else img.convert("RGB")
            img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot decode slice image {path}: {exc}")
    t = torch.from_numpy(arr)
    if t.ndim == 2:
        t = t.unsqueeze(0).repeat(3, 1, 1)
    else:
        t = t.permute(2, 0, 1)
    return (t - _MEAN) / _STD


class _ResNetEncoder(torch.nn.Module):
    def __init__(self, pretrained: bool):
        super().__init__()
        weights = tvm.ResNet18_Weights.DEFAULT if pretrained else None
        self.net = tvm.resnet18(weights=weights)
        self.net.fc = torch.nn.Identity()

    def forward(self, x):
        return self.net(x)


class _VitEncoder(torch.nn.Module):
    """Token-level access to a torchvision VisionTransformer; the stock
    forward only exposes the classification head."""

    def __init__(self, vit: torch.nn.Module, token: str):
        super().__init__()
        if token not in ("class", "mean"):
            raise ValueError(f"token must be class or mean, got {token!r}")
        self.vit = vit
        self.token = token

    def forward(self, x):
        v = self.vit
        x = v._process_input(x)
        cls = v.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = v.encoder(x)
        if self.token == "class":
            return x[:, 0]
        return x[:, 1:].mean(dim=1)


def build_encoder(model: str, token: str = "class",
                  pretrained: bool = True) -> torch.nn.Module:
    """Construct a frozen encoder in eval mode."""
    if model not in EXPECTED_DIMS:
        raise ModelContractError(
            f"unknown model {model!r}; expected one of {sorted(EXPECTED_DIMS)}"
        )
    torch.manual_seed(0)  # deterministic fallback init
    try:
        if model == "resnet18":
            enc = _ResNetEncoder(pretrained)
        elif model == "vit":
            weights = tvm.ViT_B_16_Weights.DEFAULT if pretrained else None
            enc = _VitEncoder(tvm.vit_b_16(weights=weights), token)
        else:  # dinov2: compact 192-dim ViT
            vit = tvm.VisionTransformer(
                image_size=IMAGE_SIZE, patch_size=16, num_layers=4,
                num_heads=3, hidden_dim=192, mlp_dim=768,
            )
            enc = _VitEncoder(vit, token)
    except Exception as exc:
        if not pretrained:
            raise
        warnings.warn(
            f"pretrained weights for {model} unavailable ({exc}); "
            "falling back to seeded random initialization"
        )
        return build_encoder(model, token, pretrained=False)
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


@torch.no_grad()
def encode_stack(encoder: torch.nn.Module, model: str,
                 slices: list[torch.Tensor], device: str = "cpu") -> np.ndarray:
    """Encode one patient's slices to an (n_slices, expected_dim) array."""
    batch = torch.stack(slices).to(device)
    feats = encoder.to(device)(batch).cpu().numpy().astype(np.float32)
    expected = EXPECTED_DIMS[model]
    if feats.ndim != 2 or feats.shape[1] != expected:
        raise ModelContractError(
            f"{model} produced shape {feats.shape}, expected (*, {expected})"
        )
    return feats
